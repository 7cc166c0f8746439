"""Self-verification: oracle equivalence, gradient checks and invariants in one report.

Report layout (validated against ``REPORT_SCHEMA`` before it is written)::

    {
      "passed": bool,
      "failures": [str, ...],            # names of failed checks, "<section>:<name>"
      "runtime_s": float,
      "equivalence": [{"op", "instances", "max_abs_err", "tolerance", "passed"}, ...],
      "gradcheck":   [{"name", "max_rel_err", "max_abs_err", "tolerance", "passed"}, ...],
      "invariants":  [{"name", "passed", "detail"}, ...]
    }
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import jsonschema
import numpy as np

from . import autodiff as ad
from . import losses as L
from .oracle import gradcheck_all, oracle_forward

EQUIVALENCE_TOLERANCE = 1e-10
GRADCHECK_TOLERANCE = 1e-5

REPORT_SCHEMA = {
    "type": "object",
    "required": ["passed", "failures", "runtime_s", "equivalence", "gradcheck", "invariants"],
    "additionalProperties": False,
    "properties": {
        "passed": {"type": "boolean"},
        "failures": {"type": "array", "items": {"type": "string"}},
        "runtime_s": {"type": "number", "minimum": 0},
        "equivalence": {"type": "array", "items": {
            "type": "object",
            "required": ["op", "instances", "max_abs_err", "tolerance", "passed"],
            "additionalProperties": False,
            "properties": {
                "op": {"type": "string"},
                "instances": {"type": "integer", "minimum": 1},
                "max_abs_err": {"type": "number", "minimum": 0},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "passed": {"type": "boolean"},
            },
        }},
        "gradcheck": {"type": "array", "items": {
            "type": "object",
            "required": ["name", "max_rel_err", "max_abs_err", "tolerance", "passed"],
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "max_rel_err": {"type": "number", "minimum": 0},
                "max_abs_err": {"type": "number", "minimum": 0},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "passed": {"type": "boolean"},
            },
        }},
        "invariants": {"type": "array", "items": {
            "type": "object",
            "required": ["name", "passed", "detail"],
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "passed": {"type": "boolean"},
                "detail": {"type": "string"},
            },
        }},
    },
}

T = ad.Tensor


# -- oracle equivalence -------------------------------------------------------

def _dims(rng, lo=1, hi=4, n=1):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _gen(rng, kind, c):
    g = L.Generator.init(kind, c, int(rng.integers(1 << 30)))
    # nonzero hidden biases so the ReLU actually cuts somewhere
    return L.Generator(kind, g.w1, T(rng.normal(scale=0.5, size=g.b1.shape)), g.w2,
                       T(rng.normal(scale=0.5, size=g.b2.shape)))


def _garrays(g):
    return [getattr(g, n).data for n in L.Generator.param_names]


def _frames(rng):
    t_tea = _dims(rng, 1, 4)[0]
    t_stu = _dims(rng, 1, t_tea)[0]
    return t_stu, t_tea


Instance = Tuple[np.ndarray, np.ndarray]


def _equivalence_cases() -> Dict[str, Callable[[np.random.Generator], Instance]]:
    def matmul(rng):
        m, k, n = _dims(rng, n=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        return ad.matmul(T(a), T(b)).data, oracle_forward("matmul", a, b)

    def rowwise(name, fn):
        def make(rng):
            r, c = _dims(rng, n=2)
            x = rng.normal(scale=5.0, size=(r, c))
            return fn(T(x)).data, oracle_forward(name, x)
        return make

    def binary(name, fn):
        def make(rng):
            shape = tuple(_dims(rng, n=3))
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            return fn(T(a), T(b)).data, oracle_forward(name, a, b)
        return make

    def relu(rng):
        x = rng.normal(size=tuple(_dims(rng, n=3)))
        return ad.relu(T(x)).data, oracle_forward("relu", x)

    def scale(rng):
        x, s = rng.normal(size=tuple(_dims(rng, n=2))), float(rng.normal())
        return ad.scale(T(x), s).data, oracle_forward("scale", x, s)

    def mask_channels(rng):
        if rng.uniform() < 0.5:
            t, n, c = _dims(rng, n=3)
            x, m, axis = rng.normal(size=(t, n, c)), (rng.uniform(size=(t, n)) < 0.5) * 1.0, -1
        else:
            t, c, h, w = _dims(rng, n=4)
            x, m, axis = rng.normal(size=(t, c, h, w)), (rng.uniform(size=(t, h, w)) < 0.5) * 1.0, 1
        return (ad.mask_channels(T(x), T(m), channel_axis=axis).data,
                oracle_forward("mask_channels", x, m, channel_axis=axis))

    def reduce_mean(rng):
        x = rng.normal(size=tuple(_dims(rng, n=3)))
        return ad.reduce_mean(T(x)).data, oracle_forward("reduce_mean", x)

    def conv1d(rng):
        cin, cout, n = _dims(rng, 1, 4, 3)
        x, w, b = rng.normal(size=(cin, n)), rng.normal(size=(cout, cin, 3)), rng.normal(size=cout)
        return ad.conv1d_same3(T(x), T(w), T(b)).data, oracle_forward("conv1d_same3", x, w, b)

    def conv2d(rng):
        cin, cout, h, wd = _dims(rng, 1, 4, 4)
        x, w, b = rng.normal(size=(cin, h, wd)), rng.normal(size=(cout, cin, 3, 3)), rng.normal(size=cout)
        return ad.conv2d_same3(T(x), T(w), T(b)).data, oracle_forward("conv2d_same3", x, w, b)

    def tsa(swapped):
        def make(rng):
            t_stu, t_tea = _frames(rng)
            nq, c = _dims(rng, n=2)
            f = rng.normal(size=(t_tea, nq, c))
            name = "tsa_aggregate_swapped" if swapped else "tsa_aggregate"
            return L.tsa_aggregate(L.FeatureSet(T(f)), t_stu, swapped=swapped).values.data, oracle_forward(name, f, t_stu)
        return make

    def gen_bev(rng):
        t, n, c = _dims(rng, n=3)
        x, g = rng.normal(size=(t, n, c)), _gen(rng, "1d", c)
        return L.generate_features(L.FeatureSet(T(x)), g).values.data, oracle_forward("generate_features_bev", x, *_garrays(g))

    def gen_pv(rng):
        t, c = _dims(rng, n=2)
        h, w = _dims(rng, 3, 4, 2)
        x, g = rng.normal(size=(t, c, h, w)), _gen(rng, "2d", c)
        return (L.generate_features(L.PvFeatureSet(T(x)), g).values.data,
                oracle_forward("generate_features_pv", x, *_garrays(g)))

    def rc_bev(rng):
        t_stu, t_tea = _frames(rng)
        nq, c = _dims(rng, n=2)
        s, f = rng.normal(size=(t_stu, nq, c)), rng.normal(size=(t_tea, nq, c))
        g = _gen(rng, "1d", c)
        mp = L.generate_mask((t_stu, nq), float(rng.uniform()), int(rng.integers(1 << 30)))
        got = L.rc_bev_loss(L.FeatureSet(T(s)), L.FeatureSet(T(f)), g, mp).data
        return got, oracle_forward("rc_bev_loss", s, f, mp.mask.data, *_garrays(g))

    def pv_pair(rng, level):
        t_stu, t_tea = _frames(rng)
        c = _dims(rng)[0]
        h, w = _dims(rng, 3, 4, 2)
        s, f = rng.normal(size=(t_stu, c, h, w)), rng.normal(size=(t_tea, c, h, w))
        g = _gen(rng, "2d", c)
        mp = L.generate_mask((t_stu, h, w), float(rng.uniform()), int(rng.integers(1 << 30)))
        return L.PvFeatureSet(T(s), level), L.PvFeatureSet(T(f), level), g, mp, s, f

    def rc_pv(rng):
        sp, tp, g, mp, s, f = pv_pair(rng, 3)
        return L.rc_pv_loss(sp, tp, g, mp).data, oracle_forward("rc_pv_loss", s, f, mp.mask.data, *_garrays(g))

    def spatial(rng):
        sp, tp, g, mp, s, f = pv_pair(rng, int(rng.integers(0, 3)))
        return (L.spatial_reconstruction_loss(sp, tp, g, mp).data,
                oracle_forward("spatial_reconstruction_loss", s, f, mp.mask.data, *_garrays(g)))

    def similarity(rng):
        t = _dims(rng, 2, 4)[0]
        nq, c = _dims(rng, n=2)
        f = rng.normal(size=(t, nq, c))
        i, j = rng.choice(t, size=2, replace=False)
        return L.similarity(L.FeatureSet(T(f)), int(i), int(j)).data, oracle_forward("similarity", f, int(i), int(j))

    def trd(rng):
        t = _dims(rng, 2, 4)[0]
        nq, c = _dims(rng, n=2)
        s, f = rng.normal(size=(t, nq, c)), rng.normal(size=(t, nq, c))
        tau = float(rng.uniform(0.2, 2.0))
        return L.trd_loss(L.FeatureSet(T(s)), L.FeatureSet(T(f)), tau).data, oracle_forward("trd_loss", s, f, tau)

    def dc(rng):
        shape = tuple(_dims(rng, n=2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        return L.dc_loss(T(a), T(b)).data, oracle_forward("dc_loss", a, b)

    def total(rng):
        values = {k: float(v) for k, v in zip(L.COMPONENTS, rng.uniform(0, 3, size=4))}
        weights = rng.uniform(0, 2, size=4) * (rng.uniform(size=4) < 0.7)
        if rng.uniform() < 0.5:
            cfg = L.DistillConfig(t_stu=2, t_tea=4, alpha_rc_bev=weights[0], alpha_rc_pv=weights[1],
                                  alpha_dc=weights[2], alpha_trd=0.0)
        else:
            cfg = L.DistillConfig(t_stu=4, t_tea=4, alpha_rc_bev=0.0, alpha_rc_pv=0.0,
                                  alpha_dc=weights[2], alpha_trd=weights[3])
        got, _ = L.total_distill_loss(cfg, {k: T(v) for k, v in values.items()})
        want = oracle_forward("total_distill_loss", [cfg.alphas[k] for k in L.COMPONENTS],
                              [values[k] for k in L.COMPONENTS])
        return got.data, np.asarray(want)

    def task(rng):
        from . import scene as S

        n = _dims(rng, 1, 5)[0]
        sc = S.generate_scene(int(rng.integers(1 << 30)), n, 2)
        pred = rng.normal(scale=20.0, size=(n + _dims(rng, 0, 4)[0], 4))
        return S.task_loss(T(pred), sc).data, oracle_forward("task_loss", pred, sc.ground_truth())

    return {
        "matmul": matmul,
        "softmax_rows": rowwise("softmax_rows", ad.softmax_rows),
        "log_softmax_rows": rowwise("log_softmax_rows", ad.log_softmax_rows),
        "relu": relu,
        "conv1d_same3": conv1d,
        "conv2d_same3": conv2d,
        "add": binary("add", ad.add),
        "sub": binary("sub", ad.sub),
        "mul": binary("mul", ad.mul),
        "scale": scale,
        "mask_channels": mask_channels,
        "reduce_mean": reduce_mean,
        "tsa_aggregate": tsa(False),
        "tsa_aggregate_swapped": tsa(True),
        "generate_features_bev": gen_bev,
        "generate_features_pv": gen_pv,
        "rc_bev_loss": rc_bev,
        "rc_pv_loss": rc_pv,
        "spatial_reconstruction_loss": spatial,
        "similarity": similarity,
        "trd_loss": trd,
        "dc_loss": dc,
        "total_distill_loss": total,
        "task_loss": task,
    }


def check_equivalence(instances: int = 100, seed: int = 0, tolerance: float = EQUIVALENCE_TOLERANCE,
                      ops: Optional[List[str]] = None) -> List[dict]:
    cases = _equivalence_cases()
    names = list(cases) if ops is None else list(ops)
    out = []
    for idx, name in enumerate(names):
        rng = np.random.default_rng([seed, idx])
        worst = 0.0
        try:
            for _ in range(instances):
                got, want = cases[name](rng)
                got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
                if got.shape != want.shape:
                    worst = float("inf")
                    break
                if got.size:
                    worst = max(worst, float(np.max(np.abs(got - want))))
        except Exception:  # a crashing op counts as a mismatch
            worst = float("inf")
        out.append({"op": name, "instances": instances, "max_abs_err": worst,
                    "tolerance": tolerance, "passed": worst <= tolerance})
    return out


# -- invariants ---------------------------------------------------------------

def _inv_attention_rows(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        t_stu, t_tea = _frames(rng)
        f = L.FeatureSet(T(rng.normal(scale=3.0, size=(t_tea,) + tuple(_dims(rng, n=2)))))
        t = int(rng.integers(t_stu))
        t1 = int(rng.integers(t + t_tea - t_stu + 1))
        w = L.attention_weights(f, t, t1)
        worst = max(worst, float(np.max(np.abs(w.sum(axis=1) - 1.0))), float(-w.min()))
    return worst < 1e-12, f"max row-sum deviation {worst:.3e}"


def _inv_tsa_equivariance(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        t_stu, t_tea = _frames(rng)
        nq, c = _dims(rng, 2, 5, 2)
        f = rng.normal(size=(t_tea, nq, c))
        perm = rng.permutation(nq)
        a = L.tsa_aggregate(L.FeatureSet(T(f)), t_stu).values.data
        b = L.tsa_aggregate(L.FeatureSet(T(f[:, perm])), t_stu).values.data
        worst = max(worst, float(np.max(np.abs(a[:, perm] - b))))
    return worst < 1e-12, f"max deviation {worst:.3e}"


def _inv_trd_permutation(rng) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(50):
        t = _dims(rng, 2, 4)[0]
        nq, c = _dims(rng, 2, 5, 2)
        s, f = rng.normal(size=(t, nq, c)), rng.normal(size=(t, nq, c))
        perm = rng.permutation(nq)
        a = L.trd_loss(L.FeatureSet(T(s)), L.FeatureSet(T(f))).item()
        b = L.trd_loss(L.FeatureSet(T(s[:, perm])), L.FeatureSet(T(f[:, perm]))).item()
        worst = max(worst, abs(a - b))
    return worst < 1e-12, f"max deviation {worst:.3e}"


def _inv_nonnegative(rng) -> Tuple[bool, str]:
    cases = _equivalence_cases()
    lowest = np.inf
    for name in ("rc_bev_loss", "rc_pv_loss", "spatial_reconstruction_loss", "trd_loss", "dc_loss"):
        for _ in range(50):
            lowest = min(lowest, float(cases[name](rng)[0]))
    return lowest >= 0.0, f"smallest loss {lowest:.3e}"


def _inv_trivial_zero(rng) -> Tuple[bool, str]:
    """Each loss vanishes on the input that makes its two sides equal."""
    t_stu, t_tea, nq, c, h = 2, 4, 3, 2, 3
    ones = lambda *s: L.MaskPlan(0, 0.0, T(np.ones(s)))
    f = L.FeatureSet(T(np.abs(rng.normal(size=(t_tea, nq, c)))))
    s = L.FeatureSet(L.bev_target(f, t_stu))
    vals = {"rc_bev": L.rc_bev_loss(s, f, L.Generator.identity("1d", c), ones(t_stu, nq)).item()}
    fp = L.PvFeatureSet(T(np.abs(rng.normal(size=(t_tea, c, h, h)))))
    sp = L.PvFeatureSet(L.pv_target(fp, t_stu))
    vals["rc_pv"] = L.rc_pv_loss(sp, fp, L.Generator.identity("2d", c), ones(t_stu, h, h)).item()
    low = L.PvFeatureSet(T(np.abs(rng.normal(size=(t_tea, c, h, h)))), level=2)
    low_s = L.PvFeatureSet(T(low.values.data[:t_stu]), level=2)
    vals["spatial"] = L.spatial_reconstruction_loss(low_s, low, L.Generator.identity("2d", c),
                                                    ones(t_stu, h, h)).item()
    d = T(rng.normal(size=(nq, c)))
    vals["dc"] = L.dc_loss(d, d).item()
    same = L.FeatureSet(T(rng.normal(size=(t_tea, nq, c))))
    trd = L.trd_loss(same, same).item()
    ok = all(v == 0.0 for v in vals.values()) and abs(trd) < 1e-12
    detail = ", ".join(f"{k}={v:.1e}" for k, v in vals.items()) + f", trd={trd:.1e}"
    return ok, detail


def _inv_teacher_gradient(rng) -> Tuple[bool, str]:
    s = T(rng.normal(size=(2, 3, 2)), requires_grad=True)
    f = T(rng.normal(size=(3, 3, 2)), requires_grad=True)
    g = _gen(rng, "1d", 2)
    mp = L.generate_mask((2, 3), 0.5, 3)
    fs = T(rng.normal(size=(2, 3, 2)), requires_grad=True)
    loss = ad.add(L.rc_bev_loss(L.FeatureSet(s), L.FeatureSet(f), g, mp),
                  ad.add(L.trd_loss(L.FeatureSet(s), L.FeatureSet(fs)), L.dc_loss(ad.take(s, 0), ad.take(fs, 0))))
    grads = ad.backward(loss, [s, f, fs])
    worst = max(float(np.max(np.abs(grads[f]))), float(np.max(np.abs(grads[fs]))))
    return worst == 0.0 and float(np.max(np.abs(grads[s]))) > 0, f"max teacher gradient {worst:.1e}"


def _inv_mask_replay(rng) -> Tuple[bool, str]:
    seed, ratio = int(rng.integers(1 << 62)), float(rng.uniform())
    a, b = L.generate_mask((4, 900), ratio, seed), L.generate_mask((4, 900), ratio, seed)
    big = L.generate_mask((200, 500), 0.5, seed)
    same = np.array_equal(a.mask.data, b.mask.data)
    frac = big.masked_fraction
    return same and abs(frac - 0.5) < 0.01, f"replay identical={same}, masked fraction {frac:.4f}"


def _inv_run_bookkeeping(rng) -> Tuple[bool, str]:
    from .harness import TrainConfig, train_distill

    d = L.DistillConfig(t_stu=2, t_tea=3, num_queries=4, channels=3, height=4, width=4, seed=1)
    cfg = TrainConfig(distill=d, epochs=1, batch_size=2, train_scenes=2, test_scenes=1, num_objects=3,
                      teacher_epochs=1)
    report = train_distill(cfg)
    frozen = report.teacher_checksum_before == report.teacher_checksum_after
    ok = frozen and report.max_bookkeeping_error < 1e-12
    return ok, f"teacher frozen={frozen}, bookkeeping error {report.max_bookkeeping_error:.1e}"


INVARIANTS: Dict[str, Callable[[np.random.Generator], Tuple[bool, str]]] = {
    "attention_row_normalization": _inv_attention_rows,
    "tsa_permutation_equivariance": _inv_tsa_equivariance,
    "trd_permutation_invariance": _inv_trd_permutation,
    "loss_nonnegativity": _inv_nonnegative,
    "trivial_zero": _inv_trivial_zero,
    "teacher_zero_gradient": _inv_teacher_gradient,
    "mask_replay": _inv_mask_replay,
    "frozen_teacher_and_bookkeeping": _inv_run_bookkeeping,
}


def check_invariants(seed: int = 0) -> List[dict]:
    out = []
    for idx, (name, fn) in enumerate(INVARIANTS.items()):
        try:
            ok, detail = fn(np.random.default_rng([seed, 1000 + idx]))
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append({"name": name, "passed": bool(ok), "detail": detail})
    return out


# -- suite --------------------------------------------------------------------

def run_verification_suite(out_path=None, seed: int = 0, instances: int = 100) -> dict:
    """Run every check and return the report; write it as JSON when ``out_path`` is given."""
    t0 = time.perf_counter()
    try:
        equivalence = check_equivalence(instances, seed)
    except Exception as exc:
        equivalence = [{"op": f"crash ({type(exc).__name__}: {exc})", "instances": instances,
                        "max_abs_err": float("inf"), "tolerance": EQUIVALENCE_TOLERANCE, "passed": False}]
    try:
        grads = [r.as_dict() for r in gradcheck_all(seed=seed, tolerance=GRADCHECK_TOLERANCE)]
    except Exception as exc:
        grads = [{"name": f"crash ({type(exc).__name__}: {exc})", "max_rel_err": float("inf"),
                  "max_abs_err": float("inf"), "tolerance": GRADCHECK_TOLERANCE, "passed": False}]
    invariants = check_invariants(seed)
    for row in equivalence + grads:
        for key in ("max_abs_err", "max_rel_err"):
            if key in row and not np.isfinite(row[key]):
                row[key] = 1e308  # JSON has no infinity
    failures = ([f"equivalence:{r['op']}" for r in equivalence if not r["passed"]]
                + [f"gradcheck:{r['name']}" for r in grads if not r["passed"]]
                + [f"invariant:{r['name']}" for r in invariants if not r["passed"]])
    report = {
        "passed": not failures,
        "failures": failures,
        "runtime_s": time.perf_counter() - t0,
        "equivalence": equivalence,
        "gradcheck": grads,
        "invariants": invariants,
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    if out_path is not None:
        path = Path(out_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
