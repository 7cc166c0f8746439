"""Central finite differences and the catalogue of gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def as_dict(self) -> dict:
        return {"name": self.name, "max_rel_err": self.max_rel_err, "max_abs_err": self.max_abs_err,
                "tolerance": self.tolerance, "passed": self.passed}


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x.copy()))
        flat[i] = orig - step
        down = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def compare(analytic: np.ndarray, numeric: np.ndarray) -> Tuple[float, float]:
    """(relative, absolute) error; relative is scaled by the larger gradient magnitude."""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic))) if analytic.size else 0.0,
                float(np.max(np.abs(numeric))) if numeric.size else 0.0)
    return (diff / scale if scale > 1e-12 else diff), diff


@dataclass
class GradCase:
    """``build`` maps named Tensors to a scalar loss; gradients are checked for ``wrt``."""

    name: str
    inputs: Dict[str, np.ndarray]
    wrt: Sequence[str]
    build: Callable


def _kink_distance(loss) -> float:
    from ..autodiff import graph_nodes

    worst = np.inf
    for node in graph_nodes(loss):
        if node.op in ("relu", "abs"):
            worst = min(worst, float(np.min(np.abs(node.parents[0].data))))
    return worst


def check_case(case: GradCase, step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> GradCheckReport:
    from ..autodiff import Tensor, backward

    def run(arrays: Dict[str, np.ndarray], track: bool):
        leaves = {k: Tensor(v, requires_grad=track and k in case.wrt) for k, v in arrays.items()}
        return leaves, case.build(leaves)

    leaves, loss = run(case.inputs, True)
    grads = backward(loss, [leaves[k] for k in case.wrt])
    rel = absolute = 0.0
    for k in case.wrt:
        def f(arr, k=k):
            return run({**case.inputs, k: arr}, False)[1].item()

        numeric = finite_diff_grad(f, case.inputs[k], step)
        r, a = compare(grads[leaves[k]], numeric)
        rel, absolute = max(rel, r), max(absolute, a)
    return GradCheckReport(case.name, rel, absolute, tolerance)


# -- case catalogue -----------------------------------------------------------

def _project(out, rng_proj: np.ndarray):
    from .. import autodiff as ad

    return ad.reduce_mean(ad.mul(out, ad.Tensor(rng_proj)))


def _cases() -> Dict[str, Callable[[np.random.Generator], GradCase]]:
    from .. import autodiff as ad
    from .. import losses as L
    from .. import scene as S

    def away(rng, shape):
        # magnitudes in [0.1, 1] with random sign keep relu/abs inputs off their kinks
        return rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)

    def unary(name, fn, shape=(3, 4)):
        def make(rng):
            proj = rng.normal(size=shape)
            return GradCase(name, {"x": away(rng, shape)}, ("x",),
                            lambda t: _project(fn(t["x"]), proj))
        return make

    def binary(name, fn, shape=(3, 4)):
        def make(rng):
            proj = rng.normal(size=shape)
            return GradCase(name, {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}, ("a", "b"),
                            lambda t: _project(fn(t["a"], t["b"]), proj))
        return make

    def matmul(rng):
        proj = rng.normal(size=(3, 2))
        return GradCase("matmul", {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}, ("a", "b"),
                        lambda t: _project(ad.matmul(t["a"], t["b"]), proj))

    def conv1d(rng):
        proj = rng.normal(size=(3, 5))
        return GradCase("conv1d_same3",
                        {"x": rng.normal(size=(2, 5)), "w": rng.normal(size=(3, 2, 3)), "b": rng.normal(size=3)},
                        ("x", "w", "b"), lambda t: _project(ad.conv1d_same3(t["x"], t["w"], t["b"]), proj))

    def conv2d(rng):
        proj = rng.normal(size=(2, 4, 3))
        return GradCase("conv2d_same3",
                        {"x": rng.normal(size=(2, 4, 3)), "w": rng.normal(size=(2, 2, 3, 3)), "b": rng.normal(size=2)},
                        ("x", "w", "b"), lambda t: _project(ad.conv2d_same3(t["x"], t["w"], t["b"]), proj))

    def mask_channels(rng):
        proj = rng.normal(size=(2, 3, 4))
        mask = (rng.uniform(size=(2, 3)) > 0.5).astype(float)
        return GradCase("mask_channels", {"x": rng.normal(size=(2, 3, 4)), "m": mask}, ("x",),
                        lambda t: _project(ad.mask_channels(t["x"], t["m"]), proj))

    def reduce_mean(rng):
        return GradCase("reduce_mean", {"x": rng.normal(size=(3, 3))}, ("x",), lambda t: ad.reduce_mean(t["x"]))

    def structural(rng):
        proj = rng.normal(size=(3, 2))

        def build(t):
            x = ad.reshape(t["x"], (2, 3, 2))
            y = ad.transpose(ad.take(x, 1), (1, 0))               # [2, 3]
            z = ad.stack([ad.take(x, 0), ad.take(x, 1)])         # [2, 3, 2]
            g = ad.gather_rows(ad.take(z, 0), [2, 0, 2])          # [3, 2]
            r = ad.take_range(t["x"], 0, 3)                       # [3, 2]... from [6, 2]
            return ad.add(_project(g, proj), ad.reduce_mean(ad.mul(ad.transpose(y), r)))
        return GradCase("structural", {"x": rng.normal(size=(6, 2))}, ("x",), build)

    def feats(rng, t, nq, c):
        return rng.normal(size=(t, nq, c))

    def tsa(rng):
        proj = rng.normal(size=(2, 3, 2))
        return GradCase("tsa_aggregate", {"f": feats(rng, 3, 3, 2)}, ("f",),
                        lambda t: _project(L.tsa_aggregate(L.FeatureSet(t["f"]), 2).values, proj))

    def gen_inputs(rng, kind, c=2):
        g = L.Generator.init(kind, c, int(rng.integers(1 << 30)))
        arrs = {n: np.array(getattr(g, n).data) for n in L.Generator.param_names}
        arrs["b1"] = arrs["b1"] + rng.normal(scale=0.3, size=arrs["b1"].shape)
        return arrs

    def gen_from(t, kind):
        return L.Generator(kind, t["w1"], t["b1"], t["w2"], t["b2"])

    gparams = tuple(L.Generator.param_names)

    def gen_bev(rng):
        proj = rng.normal(size=(2, 4, 2))
        inputs = {"x": feats(rng, 2, 4, 2), **gen_inputs(rng, "1d")}
        return GradCase("generate_features_bev", inputs, ("x",) + gparams,
                        lambda t: _project(L.generate_features(L.FeatureSet(t["x"]), gen_from(t, "1d")).values, proj))

    def gen_pv(rng):
        proj = rng.normal(size=(1, 2, 3, 3))
        inputs = {"x": rng.normal(size=(1, 2, 3, 3)), **gen_inputs(rng, "2d")}
        return GradCase("generate_features_pv", inputs, ("x",) + gparams,
                        lambda t: _project(L.generate_features(L.PvFeatureSet(t["x"]), gen_from(t, "2d")).values, proj))

    def rc_bev(rng):
        mp = L.generate_mask((2, 3), 0.5, int(rng.integers(1 << 30)))
        inputs = {"s": feats(rng, 2, 3, 2), "f": feats(rng, 3, 3, 2), **gen_inputs(rng, "1d")}
        return GradCase("rc_bev_loss", inputs, ("s",) + gparams,
                        lambda t: L.rc_bev_loss(L.FeatureSet(t["s"]), L.FeatureSet(t["f"]), gen_from(t, "1d"), mp))

    def rc_pv(rng):
        mp = L.generate_mask((1, 3, 3), 0.5, int(rng.integers(1 << 30)))
        inputs = {"s": rng.normal(size=(1, 2, 3, 3)), "f": rng.normal(size=(2, 2, 3, 3)), **gen_inputs(rng, "2d")}
        return GradCase("rc_pv_loss", inputs, ("s",) + gparams,
                        lambda t: L.rc_pv_loss(L.PvFeatureSet(t["s"]), L.PvFeatureSet(t["f"]), gen_from(t, "2d"), mp))

    def spatial(rng):
        mp = L.generate_mask((1, 3, 4), 0.5, int(rng.integers(1 << 30)))
        inputs = {"s": rng.normal(size=(1, 2, 3, 4)), "f": rng.normal(size=(2, 2, 3, 4)), **gen_inputs(rng, "2d")}
        return GradCase("spatial_reconstruction_loss", inputs, ("s",) + gparams,
                        lambda t: L.spatial_reconstruction_loss(L.PvFeatureSet(t["s"], level=1),
                                                                L.PvFeatureSet(t["f"], level=1),
                                                                gen_from(t, "2d"), mp))

    def similarity(rng):
        proj = rng.normal(size=(3, 3))
        return GradCase("similarity", {"f": feats(rng, 2, 3, 2)}, ("f",),
                        lambda t: _project(L.similarity(L.FeatureSet(t["f"]), 0, 1), proj))

    def trd(rng):
        return GradCase("trd_loss", {"s": feats(rng, 3, 3, 2), "f": feats(rng, 3, 3, 2)}, ("s",),
                        lambda t: L.trd_loss(L.FeatureSet(t["s"]), L.FeatureSet(t["f"]), 0.5))

    def dc(rng):
        return GradCase("dc_loss", {"s": rng.normal(size=(3, 2)), "f": rng.normal(size=(3, 2))}, ("s",),
                        lambda t: L.dc_loss(t["s"], t["f"]))

    def total(rng):
        cfg = L.DistillConfig(t_stu=1, t_tea=2, num_queries=3, channels=2, height=3, width=3)
        mb = L.generate_mask((1, 3), 0.5, int(rng.integers(1 << 30)))
        mp = L.generate_mask((1, 3, 3), 0.5, int(rng.integers(1 << 30)))
        gb, gp = gen_inputs(rng, "1d"), gen_inputs(rng, "2d")
        inputs = {"s": feats(rng, 1, 3, 2), "f": feats(rng, 2, 3, 2),
                  "ps": rng.normal(size=(1, 2, 3, 3)), "pf": rng.normal(size=(2, 2, 3, 3)),
                  "ds": rng.normal(size=(3, 2)), "df": rng.normal(size=(3, 2)),
                  **{f"b_{k}": v for k, v in gb.items()}, **{f"p_{k}": v for k, v in gp.items()}}

        def build(t):
            g1 = L.Generator("1d", *(t[f"b_{k}"] for k in gparams))
            g2 = L.Generator("2d", *(t[f"p_{k}"] for k in gparams))
            comps = {
                "rc_bev": lambda: L.rc_bev_loss(L.FeatureSet(t["s"]), L.FeatureSet(t["f"]), g1, mb),
                "rc_pv": lambda: L.rc_pv_loss(L.PvFeatureSet(t["ps"]), L.PvFeatureSet(t["pf"]), g2, mp),
                "dc": lambda: L.dc_loss(t["ds"], t["df"]),
            }
            return L.total_distill_loss(cfg, comps)[0]
        wrt = ("s", "ps", "ds") + tuple(f"b_{k}" for k in gparams) + tuple(f"p_{k}" for k in gparams)
        return GradCase("total_distill_loss", inputs, wrt, build)

    def small_scene(rng):
        sc = S.generate_scene(int(rng.integers(1 << 30)), 2, 2)
        return S.observe(sc, 3, 3, 2), sc

    def encoder(rng):
        obs, _ = small_scene(rng)
        enc = S.ToyEncoder.init("student", 2, 2, int(rng.integers(1 << 30)))
        inputs = {n: np.array(getattr(enc, n).data) for n in enc.param_names}
        pb = rng.normal(size=(2, 3, 2))
        pp = rng.normal(size=(2, 2, 3, 3))

        def build(t):
            e = S.ToyEncoder("student", 2, 2, *(t[n] for n in S.ToyEncoder.param_names))
            out = S.encode(e, None, 2, obs=obs)
            return ad.add(_project(out.bev.values, pb), _project(out.pv[3].values, pp))
        return GradCase("encoder", inputs, tuple(S.ToyEncoder.param_names), build)

    def decoder(rng):
        dec = S.ToyDecoder.init(2, int(rng.integers(1 << 30)), hidden=3)
        inputs = {n: np.array(getattr(dec, n).data) for n in dec.param_names}
        inputs["b1"] = inputs["b1"] + rng.normal(scale=0.3, size=inputs["b1"].shape)
        inputs["f"] = feats(rng, 2, 2, 2)
        pd, pp = rng.normal(size=(2, 2)), rng.normal(size=(2, 4))

        def build(t):
            d = S.ToyDecoder(2, 3, *(t[n] for n in S.ToyDecoder.param_names))
            decoded, pred = S.decode_and_regress(d, L.FeatureSet(t["f"]))
            return ad.add(_project(decoded, pd), _project(pred, pp))
        return GradCase("decoder", inputs, ("f",) + tuple(S.ToyDecoder.param_names), build)

    def task(rng):
        _, sc = small_scene(rng)
        gt = sc.ground_truth()
        pred = np.concatenate([gt, rng.normal(size=(1, 4)) * 30], axis=0)
        pred = pred + away(rng, pred.shape)
        return GradCase("task_loss", {"p": pred}, ("p",), lambda t: S.task_loss(t["p"], sc))

    return {
        "matmul": matmul,
        "softmax_rows": unary("softmax_rows", ad.softmax_rows),
        "log_softmax_rows": unary("log_softmax_rows", ad.log_softmax_rows),
        "relu": unary("relu", ad.relu),
        "abs": unary("abs", ad.abs_),
        "conv1d_same3": conv1d,
        "conv2d_same3": conv2d,
        "add": binary("add", ad.add),
        "sub": binary("sub", ad.sub),
        "mul": binary("mul", ad.mul),
        "scale": unary("scale", lambda x: ad.scale(x, -1.7)),
        "mask_channels": mask_channels,
        "reduce_mean": reduce_mean,
        "structural": structural,
        "tsa_aggregate": tsa,
        "generate_features_bev": gen_bev,
        "generate_features_pv": gen_pv,
        "rc_bev_loss": rc_bev,
        "rc_pv_loss": rc_pv,
        "spatial_reconstruction_loss": spatial,
        "similarity": similarity,
        "trd_loss": trd,
        "dc_loss": dc,
        "total_distill_loss": total,
        "encoder": encoder,
        "decoder": decoder,
        "task_loss": task,
    }


def available_checks() -> List[str]:
    return list(_cases())


def gradcheck_all(seed: int = 0, ops: Optional[Sequence[str]] = None, tolerance: float = DEFAULT_TOLERANCE,
                  step: float = DEFAULT_STEP, max_tries: int = 50) -> List[GradCheckReport]:
    """Check every primitive and composite (or just ``ops``) on random small shapes.

    Instances whose ReLU/abs inputs come within ``KINK_MARGIN`` of zero are
    redrawn, so the subgradient convention never enters the comparison.
    """
    cases = _cases()
    names = list(cases) if ops is None else list(ops)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise ValueError(f"unknown gradient checks: {unknown}")
    reports = []
    for idx, name in enumerate(names):
        rng = np.random.default_rng([seed, idx])
        for _ in range(max_tries):
            case = cases[name](rng)
            from ..autodiff import Tensor
            probe = case.build({k: Tensor(v) for k, v in case.inputs.items()})
            if _kink_distance_of(case, probe) > KINK_MARGIN:
                break
        else:
            raise RuntimeError(f"could not draw a kink-free instance for {name}")
        reports.append(check_case(case, step, tolerance))
    return reports


def _kink_distance_of(case: GradCase, probe) -> float:
    # constant leaves never record parents, so rebuild with tracking on
    from ..autodiff import Tensor

    tracked = case.build({k: Tensor(v, requires_grad=True) for k, v in case.inputs.items()})
    return _kink_distance(tracked)
