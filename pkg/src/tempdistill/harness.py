"""Teacher pretraining, student distillation runs, ablations and run reports."""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import autodiff as ad
from . import losses as L
from . import scene as S
from .autodiff import Tensor, derive_seed
from .optim import AdamWHyper, AdamWState, adamw_step, cosine_lr

log = logging.getLogger(__name__)

OUTPUT_ENV = "TEMPDISTILL_OUTPUT_ROOT"

# stream tags for derive_seed
_DATA_TRAIN, _DATA_TEST, _TEACHER, _STUDENT_ENC, _STUDENT_DEC = 1, 2, 3, 4, 5
_GEN_BEV, _GEN_PV, _GEN_SP, _SHUFFLE, _MASK_BEV, _MASK_PV, _MASK_SP = 6, 7, 8, 9, 10, 11, 12


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    distill: L.DistillConfig = field(default_factory=L.DistillConfig)
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    cosine: bool = True
    epochs: int = 40
    batch_size: int = 1
    train_scenes: int = 64
    test_scenes: int = 16
    num_objects: int = 12
    teacher_epochs: int = 100
    teacher_lr: float = 1e-2
    output_dir: Optional[str] = None
    name: str = "run"

    def __post_init__(self):
        if not self.lr > 0 or not self.teacher_lr > 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.teacher_epochs < 0:
            raise ConfigError("teacher_epochs must be >= 0")
        if self.batch_size < 1 or self.train_scenes < 1 or self.test_scenes < 1:
            raise ConfigError("batch_size, train_scenes and test_scenes must be >= 1")
        if not 1 <= self.num_objects <= self.distill.num_queries:
            raise ConfigError("num_objects must lie in [1, num_queries]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.weight_decay >= 0):
            raise ConfigError("invalid AdamW hyperparameters")

    @property
    def seed(self) -> int:
        return self.distill.seed

    @property
    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> Dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "distill"}
        d.update({f.name: getattr(self.distill, f.name) for f in dataclasses.fields(self.distill)})
        return d

    def replace(self, **overrides) -> "TrainConfig":
        return config_from_dict({**_raw_dict(self), **overrides})


_DISTILL_KEYS = {f.name for f in dataclasses.fields(L.DistillConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"distill"}


def _raw_dict(cfg: TrainConfig) -> Dict[str, Any]:
    """Like to_dict, but loss weights keep their 'unset' state when they equal the mode default."""
    d = cfg.to_dict()
    probe = L.DistillConfig(t_stu=cfg.distill.t_stu, t_tea=cfg.distill.t_tea)
    for k in ("alpha_rc_bev", "alpha_rc_pv", "alpha_dc", "alpha_trd"):
        if d[k] == getattr(probe, k):
            d[k] = None
    return d


def config_from_dict(raw: Dict[str, Any]) -> TrainConfig:
    """Strict: unknown keys and bad values raise :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a key/value mapping")
    unknown = set(raw) - _DISTILL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        distill = L.DistillConfig(**{k: v for k, v in raw.items() if k in _DISTILL_KEYS})
        return TrainConfig(distill=distill, **{k: v for k, v in raw.items() if k in _TRAIN_KEYS})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a key/value mapping")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(raw)


# -- data and teacher ----------------------------------------------------------

@dataclass
class Dataset:
    train: List[S.SceneSample]
    test: List[S.SceneSample]


def build_dataset(cfg: TrainConfig) -> Dataset:
    t = cfg.distill.t_tea
    train = [S.generate_scene(derive_seed(cfg.seed, _DATA_TRAIN, i), cfg.num_objects, t)
             for i in range(cfg.train_scenes)]
    test = [S.generate_scene(derive_seed(cfg.seed, _DATA_TEST, i), cfg.num_objects, t)
            for i in range(cfg.test_scenes)]
    return Dataset(train, test)


def checksum(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class Teacher:
    encoder: S.ToyEncoder
    decoder: S.ToyDecoder

    def arrays(self) -> List[np.ndarray]:
        return S.param_arrays(self.encoder) + S.param_arrays(self.decoder)

    def checksum(self) -> str:
        return checksum(self.arrays())


@dataclass
class SampleCache:
    """Frozen-teacher outputs and observations for one scene (written once, then read-only)."""

    scene: S.SceneSample
    obs_student: S.Observation
    teacher_bev: L.FeatureSet
    teacher_pv: Dict[int, L.PvFeatureSet]
    teacher_decoded: Tensor
    teacher_pred: np.ndarray
    bev_target: Tensor
    pv_target: Tensor


def _dims(cfg: TrainConfig):
    d = cfg.distill
    return d.num_queries, d.height


def _task_step(enc, dec, obs, scene, t_in):
    e = S.encode(enc, None, t_in, obs=obs)
    decoded, pred = S.decode_and_regress(dec, e.bev, e.anchors)
    return e, decoded, pred


def _train_loop(cfg: TrainConfig, models: Sequence[Any], scenes, obs, sample_loss, epochs: int,
                lr: float, tag: int, on_step=None):
    """Shared AdamW loop. ``sample_loss(i) -> (loss Tensor, stats dict)``; returns per-epoch means."""
    params = [p for m in models for p in S.param_arrays(m)]
    state = AdamWState.zeros_like(params)
    hyper = dataclasses.replace(cfg.hyper, lr=lr)
    n = len(scenes)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE, tag, epoch)).permutation(n)
        sums: Dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad_sum = None
            for i in batch:
                loss, stats = sample_loss(int(i), epoch)
                leaves = [p for m in models for p in S.parameters(m)]
                grads = ad.backward(loss, leaves)
                g = [grads[p] for p in leaves]
                grad_sum = g if grad_sum is None else [a + b for a, b in zip(grad_sum, g)]
                for k, v in stats.items():
                    sums[k] = sums.get(k, 0.0) + v
                if on_step is not None:
                    on_step(stats)
            grads = [g / len(batch) for g in grad_sum]
            step_lr = cosine_lr(step, total_steps, lr) if cfg.cosine else lr
            params, state = adamw_step([p for m in models for p in S.param_arrays(m)], grads, state,
                                       hyper, lr=step_lr)
            it = iter(params)
            for m in models:
                S.set_param_arrays(m, [next(it) for _ in m.param_names])
            step += 1
        history.append({"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}})
        log.info("%s epoch %d/%d total %.6f", "teacher" if tag == _TEACHER else "student",
                 epoch + 1, epochs, history[-1].get("total", history[-1].get("task", float("nan"))))
    return history


_TEACHER_CACHE: Dict[tuple, Teacher] = {}
_OBS_CACHE: Dict[tuple, Tuple[Dataset, List[S.Observation], List[S.Observation], List[S.Observation], List[S.Observation]]] = {}


def _teacher_key(cfg: TrainConfig) -> tuple:
    d = cfg.distill
    return (d.seed, d.t_tea, d.num_queries, d.channels, d.height, cfg.num_objects, cfg.train_scenes,
            cfg.test_scenes, cfg.teacher_epochs, cfg.teacher_lr, cfg.batch_size, cfg.beta1, cfg.beta2,
            cfg.eps, cfg.weight_decay, cfg.cosine)


def _data_and_obs(cfg: TrainConfig):
    d = cfg.distill
    key = (d.seed, d.t_tea, d.t_stu, d.num_queries, d.height, cfg.num_objects, cfg.train_scenes, cfg.test_scenes)
    if key not in _OBS_CACHE:
        data = build_dataset(cfg)
        nq, h = _dims(cfg)
        tr_tea = [S.observe(s, nq, h, d.t_tea) for s in data.train]
        te_tea = [S.observe(s, nq, h, d.t_tea) for s in data.test]
        tr_stu = [S.observe(s, nq, h, d.t_stu) for s in data.train]
        te_stu = [S.observe(s, nq, h, d.t_stu) for s in data.test]
        if len(_OBS_CACHE) > 4:
            _OBS_CACHE.clear()
        _OBS_CACHE[key] = (data, tr_tea, te_tea, tr_stu, te_stu)
    return _OBS_CACHE[key]


def train_teacher(cfg: TrainConfig) -> Teacher:
    """Pretrain the long-horizon teacher on the task loss; memoised per configuration."""
    key = _teacher_key(cfg)
    if key in _TEACHER_CACHE:
        cached = _TEACHER_CACHE[key]
        return Teacher(*[_clone(m) for m in (cached.encoder, cached.decoder)])
    d = cfg.distill
    data, tr_tea, _, _, _ = _data_and_obs(cfg)
    enc = S.ToyEncoder.init("teacher", d.t_tea, d.channels, derive_seed(d.seed, _TEACHER, 0))
    dec = S.ToyDecoder.init(d.channels, derive_seed(d.seed, _TEACHER, 1))

    def sample_loss(i, epoch):
        _, _, pred = _task_step(enc, dec, tr_tea[i], data.train[i], d.t_tea)
        loss = S.task_loss(pred, data.train[i])
        return loss, {"task": loss.item()}

    if cfg.teacher_epochs:
        _train_loop(cfg, [enc, dec], data.train, tr_tea, sample_loss, cfg.teacher_epochs,
                    cfg.teacher_lr, tag=_TEACHER)
    teacher = Teacher(enc, dec)
    _TEACHER_CACHE[key] = Teacher(_clone(enc), _clone(dec))
    return teacher


def _clone(model):
    new = dataclasses.replace(model)
    S.set_param_arrays(new, [a.copy() for a in S.param_arrays(model)])
    return new


def _teacher_outputs(teacher: Teacher, cfg: TrainConfig, scene, obs_tea, obs_stu) -> SampleCache:
    d = cfg.distill
    e, decoded, pred = _task_step(teacher.encoder, teacher.decoder, obs_tea, scene, d.t_tea)
    bev = L.FeatureSet(e.bev.values.detach())
    pv = {lvl: L.PvFeatureSet(p.values.detach(), level=lvl) for lvl, p in e.pv.items()}
    return SampleCache(
        scene=scene, obs_student=obs_stu, teacher_bev=bev, teacher_pv=pv,
        teacher_decoded=decoded.detach(), teacher_pred=pred.data,
        bev_target=L.bev_target(bev, d.t_stu),
        pv_target=L.pv_target(pv[3], d.t_stu),
    )


# -- distillation run ----------------------------------------------------------

@dataclass
class RunReport:
    config: Dict[str, Any]
    mode: str
    components: List[str]
    epochs: List[Dict[str, float]]
    final: Dict[str, float]
    teacher_checksum_before: str
    teacher_checksum_after: str
    max_bookkeeping_error: float
    wall_clock_s: float = 0.0
    run_dir: Optional[str] = None
    student_checksum: str = ""

    def metrics(self) -> Dict[str, Any]:
        """Everything except timing and paths; bit-identical across equal-config runs."""
        return {
            "config": self.config,
            "mode": self.mode,
            "components": self.components,
            "epochs": self.epochs,
            "final": self.final,
            "teacher_checksum_before": self.teacher_checksum_before,
            "teacher_checksum_after": self.teacher_checksum_after,
            "student_checksum": self.student_checksum,
            "max_bookkeeping_error": self.max_bookkeeping_error,
        }


@dataclass
class Student:
    encoder: S.ToyEncoder
    decoder: S.ToyDecoder
    gen_bev: L.Generator
    gen_pv: L.Generator
    gen_spatial: L.Generator

    def trainable(self, cfg: L.DistillConfig) -> list:
        models = [self.encoder, self.decoder]
        if cfg.alpha_rc_bev > 0:
            models.append(self.gen_bev)
        if cfg.alpha_rc_pv > 0:
            models += [self.gen_pv, self.gen_spatial]
        return models


def init_student(cfg: TrainConfig) -> Student:
    d = cfg.distill
    return Student(
        encoder=S.ToyEncoder.init("student", d.t_stu, d.channels, derive_seed(d.seed, _STUDENT_ENC)),
        decoder=S.ToyDecoder.init(d.channels, derive_seed(d.seed, _STUDENT_DEC)),
        gen_bev=L.Generator.init("1d", d.channels, derive_seed(d.seed, _GEN_BEV)),
        gen_pv=L.Generator.init("2d", d.channels, derive_seed(d.seed, _GEN_PV)),
        gen_spatial=L.Generator.init("2d", d.channels, derive_seed(d.seed, _GEN_SP)),
    )


def active_components(d: L.DistillConfig) -> List[str]:
    return [k for k in L.COMPONENTS if d.alphas[k] > 0]


def student_sample_loss(student: Student, cache: SampleCache, cfg: TrainConfig, masks: Optional[dict]):
    """Task loss plus weighted distillation terms for one scene."""
    d = cfg.distill
    e = S.encode(student.encoder, None, d.t_stu, obs=cache.obs_student)
    decoded, pred = S.decode_and_regress(student.decoder, e.bev, e.anchors)
    task = S.task_loss(pred, cache.scene)

    def rc_bev():
        return L.rc_bev_loss(e.bev, cache.teacher_bev, student.gen_bev, masks["bev"], target=cache.bev_target)

    def rc_pv():
        temporal = L.rc_pv_loss(e.pv[3], cache.teacher_pv[3], student.gen_pv, masks["pv"],
                                target=cache.pv_target)
        spatial = L.spatial_reconstruction_loss(e.pv[2], cache.teacher_pv[2], student.gen_spatial, masks["sp"])
        return ad.add(temporal, spatial)

    comps = {"rc_bev": rc_bev, "rc_pv": rc_pv,
             "dc": lambda: L.dc_loss(decoded, cache.teacher_decoded),
             "trd": lambda: L.trd_loss(e.bev, cache.teacher_bev, d.temperature)}
    dist, weighted = L.total_distill_loss(d, comps)
    total = ad.add(task, dist)
    stats = {"task": task.item(), **weighted, "distill_total": dist.item(), "total": total.item()}
    return total, stats, e, pred


def _masks(cfg: TrainConfig, epoch: int, i: int, res2: int) -> dict:
    d = cfg.distill
    out = {}
    if d.alpha_rc_bev > 0:
        out["bev"] = L.generate_mask((d.t_stu, d.num_queries), d.mask_ratio,
                                     derive_seed(d.seed, _MASK_BEV, epoch, i))
    if d.alpha_rc_pv > 0:
        pr = d.effective_pv_mask_ratio
        out["pv"] = L.generate_mask((d.t_stu, d.height, d.height), pr, derive_seed(d.seed, _MASK_PV, epoch, i))
        out["sp"] = L.generate_mask((d.t_stu, res2, res2), pr, derive_seed(d.seed, _MASK_SP, epoch, i))
    return out


def evaluate(student: Student, caches: Sequence[SampleCache], cfg: TrainConfig) -> Dict[str, float]:
    d = cfg.distill
    align, pos, vel, tpos, tvel = [], [], [], [], []
    for c in caches:
        e = S.encode(student.encoder, None, d.t_stu, obs=c.obs_student)
        _, pred = S.decode_and_regress(student.decoder, e.bev, e.anchors)
        generated = L.generate_features(L.FeatureSet(e.bev.values.detach()), student.gen_bev).values
        align.append(float(L.reconstruction_mse(generated, c.bev_target).data))
        p, v = S.prediction_errors(pred.data, c.scene)
        pos.append(p)
        vel.append(v)
        p, v = S.prediction_errors(c.teacher_pred, c.scene)
        tpos.append(p)
        tvel.append(v)
    return {
        "alignment_mse": float(np.mean(align)),
        "mean_position_error": float(np.mean(pos)),
        "mean_velocity_error": float(np.mean(vel)),
        "teacher_position_error": float(np.mean(tpos)),
        "teacher_velocity_error": float(np.mean(tvel)),
    }


def train_distill(cfg: TrainConfig, out_root: Optional[str] = None) -> RunReport:
    """Train a student (encoder, decoder and any active generators) against a frozen teacher.

    ``out_root`` (or ``cfg.output_dir``) selects where a fresh timestamped
    run directory is written; with neither set, nothing is written.
    """
    t0 = time.perf_counter()
    d = cfg.distill
    data, tr_tea, te_tea, tr_stu, te_stu = _data_and_obs(cfg)
    teacher = train_teacher(cfg)
    before = teacher.checksum()
    train_caches = [_teacher_outputs(teacher, cfg, s, o1, o2) for s, o1, o2 in zip(data.train, tr_tea, tr_stu)]
    test_caches = [_teacher_outputs(teacher, cfg, s, o1, o2) for s, o1, o2 in zip(data.test, te_tea, te_stu)]

    student = init_student(cfg)
    res2 = d.height * 2
    worst = [0.0]

    def sample_loss(i, epoch):
        loss, stats, _, _ = student_sample_loss(student, train_caches[i], cfg, _masks(cfg, epoch, i, res2))
        return loss, stats

    def check_books(stats):
        parts = sum(stats[k] for k in L.COMPONENTS if k in stats)
        worst[0] = max(worst[0], abs(stats["distill_total"] - parts),
                       abs(stats["total"] - stats["task"] - stats["distill_total"]))

    history = _train_loop(cfg, student.trainable(d), data.train, tr_stu, sample_loss, cfg.epochs,
                          cfg.lr, tag=_STUDENT_ENC, on_step=check_books)
    final = evaluate(student, test_caches, cfg)
    after = teacher.checksum()
    report = RunReport(
        config=cfg.to_dict(), mode=d.mode, components=active_components(d), epochs=history,
        final=final, teacher_checksum_before=before, teacher_checksum_after=after,
        max_bookkeeping_error=worst[0], wall_clock_s=time.perf_counter() - t0,
        student_checksum=checksum([a for m in student.trainable(d) for a in S.param_arrays(m)]),
    )
    root = out_root or cfg.output_dir
    if root:
        report.run_dir = str(write_run(report, root, cfg.name))
    return report


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Same run with every distillation weight set to zero."""
    return cfg.replace(alpha_rc_bev=0.0, alpha_rc_pv=0.0, alpha_dc=0.0, alpha_trd=0.0,
                       name=f"{cfg.name}-baseline")


# -- run directories -----------------------------------------------------------

def default_output_root() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


def _fresh_dir(root, name: str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}_{name}"
    path = root / base
    n = 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1
            path = root / f"{base}_{n}"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def write_run(report: RunReport, root, name: str = "run") -> Path:
    path = _fresh_dir(root, name)
    (path / "metrics.json").write_text(_dump(report.metrics()) + "\n")
    (path / "run.json").write_text(_dump({"wall_clock_s": report.wall_clock_s,
                                          "created": _dt.datetime.now().isoformat(timespec="seconds")}) + "\n")
    (path / "config.yaml").write_text(yaml.safe_dump(report.config, sort_keys=True))
    return path


CURVE_COLUMNS = ("epoch", "task", "rc_bev", "rc_pv", "dc", "trd", "distill_total", "total")


def summarize_run(run_dir) -> Tuple[Path, Path]:
    """Write per-epoch curves (CSV) and a JSON summary next to a run's metrics."""
    run_dir = Path(run_dir)
    metrics = json.loads((run_dir / "metrics.json").read_text())
    timing = {}
    if (run_dir / "run.json").exists():
        timing = json.loads((run_dir / "run.json").read_text())
    cols = [c for c in CURVE_COLUMNS if c in ("epoch", "task", "distill_total", "total")
            or c in metrics["components"]]
    curves = run_dir / "curves.csv"
    with open(curves, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in metrics["epochs"]:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    summary = run_dir / "summary.json"
    summary.write_text(_dump({
        "mode": metrics["mode"],
        "components": metrics["components"],
        "final": metrics["final"],
        "final_epoch": metrics["epochs"][-1] if metrics["epochs"] else {},
        "teacher_frozen": metrics["teacher_checksum_before"] == metrics["teacher_checksum_after"],
        "wall_clock_s": timing.get("wall_clock_s"),
    }) + "\n")
    return curves, summary


# -- ablations -----------------------------------------------------------------

ABLATION_KINDS = ("mask-ratio", "loss-weights", "frame-count", "loss-components")

DEFAULT_GRIDS: Dict[str, list] = {
    "mask-ratio": [0.4, 0.5, 0.6, 0.75, 0.9],
    "loss-weights": [1e-5, 2e-5, 5e-5, 1e-4, 2e-4],
    "frame-count": [2, 4, 8],
    "loss-components": ["", "pv", "bev", "dc", "bev+dc", "pv+bev", "pv+bev+dc"],
}

TABLE_COLUMNS = ("kind", "value", "mode", "alignment_mse", "mean_position_error", "mean_velocity_error",
                 "final_total_loss")


def ablation_config(base: TrainConfig, kind: str, value) -> TrainConfig:
    d = base.distill
    if kind == "mask-ratio":
        return base.replace(mask_ratio=float(value), name=f"mask-{value}")
    if kind == "loss-weights":
        return base.replace(alpha_rc_bev=float(value), name=f"alpha1-{value}")
    if kind == "frame-count":
        return base.replace(t_stu=int(value), alpha_rc_bev=None, alpha_rc_pv=None, alpha_dc=None,
                            alpha_trd=None, name=f"frames-{value}")
    if kind == "loss-components":
        parts = {p for p in str(value).split("+") if p}
        bad = parts - {"pv", "bev", "dc"}
        if bad:
            raise ValueError(f"unknown loss components {sorted(bad)}")
        if d.mode != L.PARTIAL_FRAMES:
            raise ValueError("the loss-component ablation needs partial-frames mode")
        return base.replace(alpha_rc_bev=L.DEFAULT_ALPHAS[0] if "bev" in parts else 0.0,
                            alpha_rc_pv=L.DEFAULT_ALPHAS[1] if "pv" in parts else 0.0,
                            alpha_dc=L.DEFAULT_ALPHAS[2] if "dc" in parts else 0.0,
                            alpha_trd=0.0, name=f"components-{value or 'none'}")
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


def run_ablation(kind: str, grid: Optional[Sequence] = None, base: Optional[TrainConfig] = None,
                 out_root: Optional[str] = None) -> Tuple[List[Dict[str, Any]], Optional[Path]]:
    """One training run per grid point at the base seed; returns table rows and the CSV path."""
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    grid = DEFAULT_GRIDS[kind] if grid is None else list(grid)
    if not grid:
        raise ValueError("ablation grid is empty")
    base = base or TrainConfig()
    configs = [ablation_config(base, kind, v) for v in grid]  # validate everything before training
    rows = []
    for value, cfg in zip(grid, configs):
        rep = train_distill(cfg)
        rows.append({
            "kind": kind, "value": value, "mode": rep.mode,
            "alignment_mse": rep.final["alignment_mse"],
            "mean_position_error": rep.final["mean_position_error"],
            "mean_velocity_error": rep.final["mean_velocity_error"],
            "final_total_loss": rep.epochs[-1]["total"],
        })
    path = None
    if out_root:
        path = _fresh_dir(out_root, f"ablate-{kind}") / "table.csv"
        path.write_text(format_table_csv(rows))
    return rows, path


def format_table_csv(rows: Sequence[Dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in TABLE_COLUMNS])
    return buf.getvalue()


def format_table_text(rows: Sequence[Dict[str, Any]]) -> str:
    head = f"{'value':>12} {'mode':>15} {'align_mse':>11} {'pos_err':>9} {'vel_err':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{str(r['value']):>12} {r['mode']:>15} {r['alignment_mse']:>11.5f} "
                     f"{r['mean_position_error']:>9.4f} {r['mean_velocity_error']:>9.4f}")
    return "\n".join(lines)
