"""Temporal distillation losses.

Frame convention throughout: frame index 0 is the current timestamp and a
larger index is further in the past, so the first ``T_stu`` teacher frames
coincide in time with the student's frames and the teacher's extra ``k``
frames are older history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MAX_FRAME_GAP = 8

PARTIAL_FRAMES = "partial-frames"
FULL_FRAMES = "full-frames"

# loss weights from the training setup: rc_bev, rc_pv, dc, trd
DEFAULT_ALPHAS = (5e-4, 1e-3, 1.0, 1.0)
ABLATION_ALPHA_BEV = 5e-5


@dataclass(frozen=True)
class FeatureSet:
    """Sparse BEV query features, ``values`` shaped [T, Nq, C]."""

    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"FeatureSet needs a non-empty [T, Nq, C] tensor, got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def queries(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PvFeatureSet:
    """Perspective-view feature maps, ``values`` shaped [T, C, H, W]."""

    values: Tensor
    level: int = 3

    def __post_init__(self):
        if self.values.data.ndim != 4:
            raise ShapeError(f"PvFeatureSet needs a [T, C, H, W] tensor, got {self.values.shape}")
        if self.values.shape[2] < 3 or self.values.shape[3] < 3:
            raise ShapeError("PV maps must be at least 3x3")
        if self.level not in (0, 1, 2, 3):
            raise ValueError(f"FPN level must be 0..3, got {self.level}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


@dataclass(frozen=True)
class MaskPlan:
    seed: int
    ratio: float
    mask: Tensor

    @property
    def shape(self):
        return self.mask.shape

    @property
    def masked_fraction(self) -> float:
        return 1.0 - float(self.mask.data.mean())


def generate_mask(shape, ratio: float, seed: int) -> MaskPlan:
    """Binary keep-mask: an entry is 0 exactly when its uniform draw is < ``ratio``.

    Draws are taken row-major over ``shape`` from a fresh SplitMix64 stream.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    draws = ad.RandomSource(seed).uniform_array(n)
    mask = (draws >= ratio).astype(np.float64).reshape(shape)
    return MaskPlan(seed=int(seed), ratio=float(ratio), mask=Tensor(mask))


@dataclass
class Generator:
    """conv -> ReLU -> conv, channel count preserved.

    ``kind`` is ``"1d"`` for BEV query features (the query axis is treated as
    the spatial axis) and ``"2d"`` for PV maps.
    """

    kind: str
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    param_names = ("w1", "b1", "w2", "b2")

    def __post_init__(self):
        if self.kind not in ("1d", "2d"):
            raise ValueError(f"generator kind must be '1d' or '2d', got {self.kind!r}")

    @classmethod
    def init(cls, kind: str, channels: int, seed: int, hidden: Optional[int] = None) -> "Generator":
        hidden = hidden or channels
        rng = np.random.default_rng(seed)
        taps = 3 if kind == "1d" else 9
        kshape = (3,) if kind == "1d" else (3, 3)
        s1 = 1.0 / math.sqrt(channels * taps)
        s2 = 1.0 / math.sqrt(hidden * taps)
        return cls(
            kind=kind,
            w1=ad.parameter(rng.uniform(-s1, s1, (hidden, channels) + kshape)),
            b1=ad.parameter(np.zeros(hidden)),
            w2=ad.parameter(rng.uniform(-s2, s2, (channels, hidden) + kshape)),
            b2=ad.parameter(np.zeros(channels)),
        )

    @classmethod
    def identity(cls, kind: str, channels: int) -> "Generator":
        """Delta kernels and zero biases: maps nonnegative inputs to themselves."""
        kshape = (3,) if kind == "1d" else (3, 3)
        w = np.zeros((channels, channels) + kshape)
        centre = (1,) if kind == "1d" else (1, 1)
        for c in range(channels):
            w[(c, c) + centre] = 1.0
        return cls(kind, ad.parameter(w), ad.parameter(np.zeros(channels)),
                   ad.parameter(w.copy()), ad.parameter(np.zeros(channels)))

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def _conv(kind):
    return ad.conv1d_same3 if kind == "1d" else ad.conv2d_same3


def generate_features(masked: Union[FeatureSet, PvFeatureSet], g: Generator):
    """Run the generator independently on every frame of already-masked input."""
    conv = _conv(g.kind)
    if isinstance(masked, FeatureSet):
        if g.kind != "1d":
            raise ValueError("BEV features need a 1d generator")
        if masked.channels != g.channels:
            raise ShapeError(f"generator expects {g.channels} channels, got {masked.channels}")
        x = ad.transpose(masked.values, (0, 2, 1))  # [T, C, Nq]
        h = ad.relu(conv(x, g.w1, g.b1))
        y = conv(h, g.w2, g.b2)
        return FeatureSet(ad.transpose(y, (0, 2, 1)))
    if isinstance(masked, PvFeatureSet):
        if g.kind != "2d":
            raise ValueError("PV features need a 2d generator")
        if masked.channels != g.channels:
            raise ShapeError(f"generator expects {g.channels} channels, got {masked.channels}")
        h = ad.relu(conv(masked.values, g.w1, g.b1))
        return PvFeatureSet(conv(h, g.w2, g.b2), level=masked.level)
    raise TypeError(f"cannot generate features from {type(masked).__name__}")


def _attend(query: Tensor, key: Tensor, value: Tensor) -> Tensor:
    c = query.shape[1]
    logits = ad.scale(ad.matmul(query, ad.transpose(key)), 1.0 / math.sqrt(c))
    return ad.matmul(ad.softmax_rows(logits), value)


def tsa_aggregate(teacher: FeatureSet, t_stu: int, swapped: bool = False) -> FeatureSet:
    """Temporal self-attention target with ``t_stu`` frames.

    Output frame ``t`` sums attention terms over teacher frames
    ``0 .. t + k`` (``k = T_tea - t_stu``); in each term frame ``t1`` supplies
    queries and values and frame ``t`` supplies keys. ``swapped=True`` uses
    frame ``t`` as the query instead, kept for comparison only.
    """
    k = teacher.frames - t_stu
    if t_stu < 1 or not 0 <= k < MAX_FRAME_GAP:
        raise ValueError(f"teacher has {teacher.frames} frames; frame gap {k} for {t_stu} "
                         f"student frames is outside [0, {MAX_FRAME_GAP})")
    frames = [ad.take(teacher.values, i) for i in range(teacher.frames)]
    out = []
    for t in range(t_stu):
        terms = []
        for t1 in range(t + k + 1):
            if swapped:
                terms.append(_attend(frames[t], frames[t1], frames[t1]))
            else:
                terms.append(_attend(frames[t1], frames[t], frames[t1]))
        out.append(ad.add_n(terms))
    return FeatureSet(ad.stack(out))


def attention_weights(teacher: FeatureSet, t: int, t1: int) -> np.ndarray:
    """The row-stochastic matrix used in one aggregation term (for inspection)."""
    f = teacher.values.data
    logits = f[t1] @ f[t].T / math.sqrt(teacher.channels)
    return ad.softmax_rows(Tensor(logits)).data


def pv_tokens(pv: PvFeatureSet) -> FeatureSet:
    """[T, C, H, W] -> [T, H*W, C]: every pixel becomes a token."""
    t, c, h, w = pv.values.shape
    flat = ad.reshape(pv.values, (t, c, h * w))
    return FeatureSet(ad.transpose(flat, (0, 2, 1)))


def pv_untokens(tokens: FeatureSet, h: int, w: int, level: int = 3) -> PvFeatureSet:
    t, _, c = tokens.values.shape
    chw = ad.transpose(tokens.values, (0, 2, 1))
    return PvFeatureSet(ad.reshape(chw, (t, c, h, w)), level=level)


def reconstruction_mse(generated: Tensor, target: Tensor) -> Tensor:
    if generated.shape != target.shape:
        raise ShapeError(f"generated {generated.shape} vs target {target.shape}")
    return ad.mse(generated, target)


def bev_target(teacher: FeatureSet, t_stu: int) -> Tensor:
    return tsa_aggregate(FeatureSet(teacher.values.detach()), t_stu).values.detach()


def pv_target(teacher_pv: PvFeatureSet, t_stu: int) -> Tensor:
    h, w = teacher_pv.spatial
    tokens = pv_tokens(PvFeatureSet(teacher_pv.values.detach(), level=teacher_pv.level))
    agg = tsa_aggregate(tokens, t_stu)
    return pv_untokens(agg, h, w).values.detach()


def rc_bev_loss(student: FeatureSet, teacher: FeatureSet, g: Generator, mp: MaskPlan,
                target: Optional[Tensor] = None) -> Tensor:
    """Masked BEV reconstruction against the temporally aggregated teacher.

    ``target`` may be passed in precomputed (the teacher is frozen, so the
    aggregate for a fixed sample never changes).
    """
    if mp.shape != (student.frames, student.queries):
        raise ShapeError(f"mask {mp.shape} does not cover student features {student.values.shape}")
    if target is None:
        target = bev_target(teacher, student.frames)
    masked = FeatureSet(ad.mask_channels(student.values, mp.mask, channel_axis=-1))
    generated = generate_features(masked, g).values
    return reconstruction_mse(generated, target.detach())


def rc_pv_loss(student_pv: PvFeatureSet, teacher_pv: PvFeatureSet, g: Generator, mp: MaskPlan,
               target: Optional[Tensor] = None) -> Tensor:
    """Temporal reconstruction on the final FPN level; tokens are pixels."""
    if student_pv.level != 3 or teacher_pv.level != 3:
        raise ValueError("temporal PV reconstruction applies to FPN level 3 only; "
                         "use spatial_reconstruction_loss for lower levels")
    if teacher_pv.values.shape[1:] != student_pv.values.shape[1:]:
        raise ShapeError("teacher and student PV maps differ in channel or spatial extent")
    h, w = student_pv.spatial
    if mp.shape != (student_pv.frames, h, w):
        raise ShapeError(f"mask {mp.shape} does not cover PV maps {student_pv.values.shape}")
    if target is None:
        target = pv_target(teacher_pv, student_pv.frames)
    masked = PvFeatureSet(ad.mask_channels(student_pv.values, mp.mask, channel_axis=1), level=3)
    generated = generate_features(masked, g).values
    return reconstruction_mse(generated, target.detach())


def spatial_reconstruction_loss(student_pv: PvFeatureSet, teacher_pv: PvFeatureSet,
                                g: Generator, mp: MaskPlan) -> Tensor:
    """Per-frame masked generation toward the same-frame teacher map (lower FPN levels)."""
    if student_pv.level == 3 or teacher_pv.level == 3:
        raise ValueError("level 3 uses the temporal reconstruction loss")
    if teacher_pv.frames < student_pv.frames:
        raise ShapeError("teacher has fewer frames than the student")
    if teacher_pv.values.shape[1:] != student_pv.values.shape[1:]:
        raise ShapeError("teacher and student PV maps differ in channel or spatial extent")
    h, w = student_pv.spatial
    if mp.shape != (student_pv.frames, h, w):
        raise ShapeError(f"mask {mp.shape} does not cover PV maps {student_pv.values.shape}")
    target = teacher_pv.values.detach()
    if teacher_pv.frames > student_pv.frames:
        target = ad.take_range(target, 0, student_pv.frames)
    masked = PvFeatureSet(ad.mask_channels(student_pv.values, mp.mask, channel_axis=1),
                          level=student_pv.level)
    return reconstruction_mse(generate_features(masked, g).values, target)


def similarity(f: FeatureSet, i: int, j: int) -> Tensor:
    """Query-to-query similarity F_i F_j^T between two distinct frames."""
    if i == j:
        raise ValueError("self-similarity (i == j) is excluded")
    for idx in (i, j):
        if not 0 <= idx < f.frames:
            raise IndexError(f"frame {idx} out of range for {f.frames} frames")
    return ad.matmul(ad.take(f.values, i), ad.transpose(ad.take(f.values, j)))


def trd_loss(student: FeatureSet, teacher: FeatureSet, tau: float = 0.5) -> Tensor:
    """Relational KL between student and teacher inter-frame similarity maps.

    For each frame pair ``i < j`` both similarity matrices are divided by
    ``tau`` and softmaxed along rows; the contribution is
    ``sum p_stu * (log p_stu - log p_tea) / Nq**2``. Pairs are averaged.
    """
    if student.frames != teacher.frames:
        raise ShapeError(f"frame counts differ: {student.frames} vs {teacher.frames}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if student.frames < 2:
        raise ValueError("relational distillation needs at least two frames")
    if student.queries != teacher.queries:
        raise ShapeError("query counts differ")
    tea = FeatureSet(teacher.values.detach())
    inv = 1.0 / tau
    pair_terms = []
    for i in range(student.frames):
        for j in range(i + 1, student.frames):
            s_logits = ad.scale(similarity(student, i, j), inv)
            t_logits = ad.scale(similarity(tea, i, j), inv)
            p = ad.softmax_rows(s_logits)
            log_ratio = ad.sub(ad.log_softmax_rows(s_logits), ad.log_softmax_rows(t_logits))
            pair_terms.append(ad.reduce_mean(ad.mul(p, log_ratio)))
    return ad.scale(ad.add_n(pair_terms), 1.0 / len(pair_terms))


def dc_loss(student_d: Tensor, teacher_d: Tensor) -> Tensor:
    if student_d.shape != teacher_d.shape:
        raise ShapeError(f"decoded features differ in shape: {student_d.shape} vs {teacher_d.shape}")
    return ad.mse(student_d, teacher_d.detach())


@dataclass(frozen=True)
class DistillConfig:
    """Weights and sizes for one distillation setup.

    The mode is derived from the frame counts. Unset loss weights take the
    default for that mode; explicitly set weights that break the gating rule
    (no relational term with partial frames, no reconstruction terms with
    full frames) are rejected.
    """

    t_stu: int = 4
    t_tea: int = 8
    num_queries: int = 16
    channels: int = 8
    height: int = 8
    width: int = 8
    mask_ratio: float = 0.5
    pv_mask_ratio: Optional[float] = None
    temperature: float = 0.5
    alpha_rc_bev: Optional[float] = None
    alpha_rc_pv: Optional[float] = None
    alpha_dc: Optional[float] = None
    alpha_trd: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("t_stu", "t_tea", "num_queries", "channels", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if int(self.seed) < 0:
            raise ValueError("seed must be >= 0")
        k = self.t_tea - self.t_stu
        if not 0 <= k < MAX_FRAME_GAP:
            raise ValueError(f"t_tea - t_stu = {k} must lie in [0, {MAX_FRAME_GAP})")
        if self.height < 3 or self.width < 3:
            raise ValueError("PV maps must be at least 3x3")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.pv_mask_ratio is not None and not 0.0 <= self.pv_mask_ratio <= 1.0:
            raise ValueError(f"pv_mask_ratio must lie in [0, 1], got {self.pv_mask_ratio}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

        partial = self.mode == PARTIAL_FRAMES
        defaults = (DEFAULT_ALPHAS[0] if partial else 0.0,
                    DEFAULT_ALPHAS[1] if partial else 0.0,
                    DEFAULT_ALPHAS[2],
                    0.0 if partial else DEFAULT_ALPHAS[3])
        names = ("alpha_rc_bev", "alpha_rc_pv", "alpha_dc", "alpha_trd")
        for name, d in zip(names, defaults):
            v = getattr(self, name)
            v = d if v is None else float(v)
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"{name} must be finite and nonnegative")
            object.__setattr__(self, name, v)
        if partial and self.alpha_trd != 0.0:
            raise ValueError("partial-frames mode (t_stu < t_tea) requires alpha_trd = 0")
        if not partial and (self.alpha_rc_bev != 0.0 or self.alpha_rc_pv != 0.0):
            raise ValueError("full-frames mode (t_stu == t_tea) requires alpha_rc_bev = alpha_rc_pv = 0")

    @property
    def mode(self) -> str:
        return PARTIAL_FRAMES if self.t_stu < self.t_tea else FULL_FRAMES

    @property
    def frame_gap(self) -> int:
        return self.t_tea - self.t_stu

    @property
    def alphas(self) -> Dict[str, float]:
        return {"rc_bev": self.alpha_rc_bev, "rc_pv": self.alpha_rc_pv,
                "dc": self.alpha_dc, "trd": self.alpha_trd}

    @property
    def effective_pv_mask_ratio(self) -> float:
        return self.mask_ratio if self.pv_mask_ratio is None else self.pv_mask_ratio


COMPONENTS = ("rc_bev", "rc_pv", "dc", "trd")

Component = Union[Tensor, Callable[[], Tensor], None]


def total_distill_loss(cfg: DistillConfig, components: Mapping[str, Component]
                       ) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of the four distillation terms.

    ``components`` maps component names to tensors or zero-argument
    callables; a component whose weight is 0 is never evaluated and may be
    missing. Returns the total and the weighted value of each evaluated term.
    """
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    partial = cfg.mode == PARTIAL_FRAMES
    if (partial and cfg.alpha_trd != 0) or (not partial and (cfg.alpha_rc_bev or cfg.alpha_rc_pv)):
        raise ValueError("loss weights violate the frame-mode gating rule")
    terms = []
    weighted: Dict[str, float] = {}
    for name in COMPONENTS:
        alpha = cfg.alphas[name]
        if alpha == 0.0:
            continue
        comp = components.get(name)
        if comp is None:
            raise ValueError(f"component {name!r} has weight {alpha} but was not supplied")
        value = comp() if callable(comp) else comp
        term = ad.scale(value, alpha)
        terms.append(term)
        weighted[name] = float(term.data)
    if not terms:
        return Tensor(0.0), weighted
    return ad.add_n(terms), weighted
