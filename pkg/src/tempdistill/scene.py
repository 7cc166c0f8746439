"""Synthetic multi-frame driving scenes and toy teacher/student networks.

Objects move at constant velocity in a flat BEV world while the observer
translates between frames. Each sparse query is anchored at a current-frame
detection (or at a fixed background location when there are more queries
than objects); at every past frame the anchor is warped by ego motion and
the query "samples" the detection it tracks plus a rasterised PV map.

Frame 0 is the current frame; larger indices are older.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import FeatureSet, PvFeatureSet

DT = 0.5
EXTENT = 50.0
MAX_SPEED = 15.0
MAX_EGO_STEP = 5.0
OBS_NOISE = 0.5

OBS_DIM = 5
RASTER_DIM = 3
POS_SCALE = 10.0
PV_LEVELS = (2, 3)


@dataclass(frozen=True)
class QueryState:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float
    vx: float
    vy: float

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError("query extents must be positive")
        if not -math.pi <= self.theta < math.pi:
            raise ValueError(f"yaw {self.theta} outside [-pi, pi)")


def ego_align(q: QueryState, frame_offset: int, ego_motion, start: int = 0, dt: float = DT) -> QueryState:
    """Where ``q`` (seen at frame ``start``) sits ``frame_offset`` frames earlier.

    The position moves back along the velocity by ``frame_offset * dt`` and
    picks up the observer translation accumulated over those frames;
    velocity, extents and yaw are unchanged.
    """
    if frame_offset < 0:
        raise ValueError("frame_offset must be >= 0")
    ego = np.asarray(ego_motion, dtype=np.float64).reshape(-1, 2)
    if start + frame_offset > len(ego):
        raise ValueError("not enough ego-motion entries for this offset")
    shift = ego[start:start + frame_offset].sum(axis=0) if frame_offset else np.zeros(2)
    elapsed = frame_offset * dt
    return QueryState(
        x=q.x - q.vx * elapsed + float(shift[0]),
        y=q.y - q.vy * elapsed + float(shift[1]),
        z=q.z, w=q.w, l=q.l, h=q.h, theta=q.theta, vx=q.vx, vy=q.vy,
    )


@dataclass
class SceneSample:
    """One synthetic scene.

    ``initial_positions`` are world positions at the oldest frame;
    ``ego_motion[t]`` is the observer displacement from frame ``t + 1`` to
    frame ``t``; ``detections`` are noisy observed positions in each frame's
    ego coordinates.
    """

    seed: int
    initial_positions: np.ndarray
    velocities: np.ndarray
    extents: np.ndarray
    yaw: np.ndarray
    ego_motion: np.ndarray
    detections: np.ndarray
    dt: float = DT

    @property
    def frames(self) -> int:
        return self.ego_motion.shape[0]

    @property
    def num_objects(self) -> int:
        return self.initial_positions.shape[0]

    def ego_position(self, t: int) -> np.ndarray:
        return self.ego_motion[t:].sum(axis=0)

    def positions_at(self, t: int) -> np.ndarray:
        """Exact (noise-free) object positions at frame ``t`` in that frame's coordinates."""
        elapsed = (self.frames - 1 - t) * self.dt
        return self.initial_positions + self.velocities * elapsed - self.ego_position(t)

    @property
    def gt_positions(self) -> np.ndarray:
        return self.positions_at(0)

    @property
    def gt_velocities(self) -> np.ndarray:
        return self.velocities

    def ground_truth(self) -> np.ndarray:
        """[n, 4] rows of (x, y, vx, vy) at the current frame."""
        return np.concatenate([self.gt_positions, self.gt_velocities], axis=1)

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "dt": self.dt,
            "initial_positions": self.initial_positions.tolist(),
            "velocities": self.velocities.tolist(),
            "extents": self.extents.tolist(),
            "yaw": self.yaw.tolist(),
            "ego_motion": self.ego_motion.tolist(),
            "detections": self.detections.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SceneSample":
        return cls(
            seed=int(rec["seed"]),
            dt=float(rec["dt"]),
            initial_positions=np.array(rec["initial_positions"], dtype=np.float64).reshape(-1, 2),
            velocities=np.array(rec["velocities"], dtype=np.float64).reshape(-1, 2),
            extents=np.array(rec["extents"], dtype=np.float64).reshape(-1, 3),
            yaw=np.array(rec["yaw"], dtype=np.float64).reshape(-1),
            ego_motion=np.array(rec["ego_motion"], dtype=np.float64).reshape(-1, 2),
            detections=np.array(rec["detections"], dtype=np.float64),
        )


def generate_scene(seed: int, num_objects: int, frames: int, obs_noise: float = OBS_NOISE) -> SceneSample:
    if num_objects < 1 or frames < 1:
        raise ValueError("need at least one object and one frame")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-EXTENT, EXTENT, (num_objects, 2))
    speed = rng.uniform(0.0, MAX_SPEED, num_objects)
    heading = rng.uniform(-math.pi, math.pi, num_objects)
    vel = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=1)
    extents = np.stack([rng.uniform(1.5, 2.5, num_objects),
                        rng.uniform(3.5, 5.5, num_objects),
                        rng.uniform(1.4, 2.0, num_objects)], axis=1)
    ego = rng.uniform(-MAX_EGO_STEP, MAX_EGO_STEP, (frames, 2))
    noise = rng.normal(0.0, obs_noise, (frames, num_objects, 2))
    scene = SceneSample(seed=int(seed), initial_positions=pos, velocities=vel, extents=extents,
                        yaw=heading, ego_motion=ego, detections=np.zeros((frames, num_objects, 2)))
    scene.detections = np.stack([scene.positions_at(t) for t in range(frames)]) + noise
    return scene


def write_scenes(path, scenes: Iterable[SceneSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_record()) + "\n")


def read_scenes(path) -> List[SceneSample]:
    with open(path, encoding="utf-8") as fh:
        return [SceneSample.from_record(json.loads(line)) for line in fh if line.strip()]


# -- observation -------------------------------------------------------------

@dataclass
class Observation:
    """Parameter-free inputs to the encoder for one scene and frame count."""

    anchors: np.ndarray          # [Nq, 2] current-frame query positions
    queries: np.ndarray          # [T*Nq, T*OBS_DIM] block-diagonal per-frame observations
    pooling: np.ndarray          # [Nq, T*Nq] temporal mean
    rasters: Dict[int, np.ndarray]    # level -> [T*R*R, RASTER_DIM]
    sampling: Dict[int, np.ndarray]   # level -> [T*Nq, T*R*R] bilinear, block-diagonal
    resolution: Dict[int, int]
    frames: int


def _background_anchors(count: int) -> np.ndarray:
    side = max(1, math.ceil(math.sqrt(count)))
    ticks = np.linspace(-EXTENT * 0.75, EXTENT * 0.75, side)
    grid = np.array([(x, y) for y in ticks for x in ticks])
    return grid[:count]


def _grid_coords(p: np.ndarray, res: int) -> np.ndarray:
    # metric position -> continuous pixel coordinate, pixel centres at integers
    return (p + EXTENT) / (2 * EXTENT) * res - 0.5


def _bilinear(points: np.ndarray, res: int) -> np.ndarray:
    """[n, res*res] bilinear weights of ``points`` on a res x res grid (zero outside)."""
    out = np.zeros((points.shape[0], res * res))
    g = _grid_coords(points, res)
    for i, (cx, cy) in enumerate(g):
        x0, y0 = math.floor(cx), math.floor(cy)
        fx, fy = cx - x0, cy - y0
        for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            xi, yi = x0 + dx, y0 + dy
            if 0 <= xi < res and 0 <= yi < res and wt > 0:
                out[i, yi * res + xi] += wt
    return out


def observe(scene: SceneSample, num_queries: int, height: int, frames: int) -> Observation:
    """Build everything the encoder reads from ``scene`` for its first ``frames`` frames."""
    if frames > scene.frames:
        raise ValueError(f"scene has {scene.frames} frames, {frames} requested")
    n = scene.num_objects
    if n > num_queries:
        raise ValueError(f"{n} objects do not fit in {num_queries} queries")
    anchors = np.concatenate([scene.detections[0], _background_anchors(num_queries - n)], axis=0)
    anchors = anchors[:num_queries]

    per_frame = np.zeros((frames, num_queries, OBS_DIM))
    aligned = np.zeros((frames, num_queries, 2))
    for t in range(frames):
        shift = scene.ego_motion[:t].sum(axis=0)
        aligned[t] = anchors + shift
        rel = scene.detections[t] - aligned[t, :n]
        per_frame[t, :n, 0] = 1.0
        per_frame[t, :n, 1:3] = rel / POS_SCALE
        per_frame[t, :n, 3] = scene.extents[:, 0] / 5.0
        per_frame[t, :n, 4] = scene.extents[:, 1] / 5.0
    queries = np.zeros((frames * num_queries, frames * OBS_DIM))
    for t in range(frames):
        queries[t * num_queries:(t + 1) * num_queries, t * OBS_DIM:(t + 1) * OBS_DIM] = per_frame[t]
    pooling = np.tile(np.eye(num_queries), (1, frames)) / frames

    rasters, sampling, resolution = {}, {}, {}
    for level in PV_LEVELS:
        res = height * 2 ** (3 - level)
        resolution[level] = res
        ras = np.zeros((frames, res * res, RASTER_DIM))
        samp = np.zeros((frames * num_queries, frames * res * res))
        for t in range(frames):
            splat = _bilinear(scene.detections[t], res)  # [n, res*res]
            ras[t, :, 0] = splat.sum(axis=0)
            ras[t, :, 1] = splat.T @ (scene.extents[:, 0] / 5.0)
            ras[t, :, 2] = splat.T @ (scene.extents[:, 1] / 5.0)
            samp[t * num_queries:(t + 1) * num_queries, t * res * res:(t + 1) * res * res] = \
                _bilinear(aligned[t], res)
        rasters[level] = ras.reshape(frames * res * res, RASTER_DIM)
        sampling[level] = samp
    return Observation(anchors=anchors, queries=queries, pooling=pooling, rasters=rasters,
                       sampling=sampling, resolution=resolution, frames=frames)


# -- networks -----------------------------------------------------------------

def param_arrays(model) -> List[np.ndarray]:
    return [getattr(model, n).data for n in model.param_names]


def set_param_arrays(model, arrays: Sequence[np.ndarray]) -> None:
    for name, arr in zip(model.param_names, arrays):
        setattr(model, name, ad.parameter(arr))


def parameters(model) -> List[Tensor]:
    return [getattr(model, n) for n in model.param_names]


def _ones(n: int) -> Tensor:
    return Tensor(np.ones((n, 1)))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), ad.matmul(_ones(x.shape[0]), b))


@dataclass
class ToyEncoder:
    """Per-frame linear query embedding + PV projection + one spatial self-attention layer."""

    role: str
    frames: int
    channels: int
    embed: Tensor       # [frames*OBS_DIM, C]: one OBS_DIM x C block per frame
    embed_b: Tensor     # [1, C]
    pv2_w: Tensor       # [RASTER_DIM, C]
    pv2_b: Tensor
    pv3_w: Tensor
    pv3_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor

    param_names = ("embed", "embed_b", "pv2_w", "pv2_b", "pv3_w", "pv3_b", "wq", "wk", "wv")

    def __post_init__(self):
        if self.role not in ("teacher", "student"):
            raise ValueError("role must be 'teacher' or 'student'")

    @classmethod
    def init(cls, role: str, frames: int, channels: int, seed: int) -> "ToyEncoder":
        rng = np.random.default_rng(seed)
        c = channels

        def u(shape, fan_in):
            s = 1.0 / math.sqrt(fan_in)
            return ad.parameter(rng.uniform(-s, s, shape))

        return cls(
            role=role, frames=frames, channels=c,
            embed=u((frames * OBS_DIM, c), OBS_DIM),
            embed_b=ad.parameter(np.zeros((1, c))),
            pv2_w=u((RASTER_DIM, c), RASTER_DIM), pv2_b=ad.parameter(np.zeros((1, c))),
            pv3_w=u((RASTER_DIM, c), RASTER_DIM), pv3_b=ad.parameter(np.zeros((1, c))),
            wq=u((c, c), c), wk=u((c, c), c), wv=u((c, c), c),
        )


@dataclass
class Encoding:
    bev: FeatureSet
    pv: Dict[int, PvFeatureSet]
    anchors: np.ndarray
    pooling: np.ndarray


def encode(enc: ToyEncoder, scene: Optional[SceneSample], t_in: int,
           obs: Optional[Observation] = None, num_queries: int = 16, height: int = 8) -> Encoding:
    """BEV query features [t_in, Nq, C] plus PV maps for FPN levels 2 and 3."""
    if t_in > enc.frames:
        raise ValueError(f"encoder was built for {enc.frames} frames, {t_in} requested")
    if obs is None:
        if scene is None:
            raise ValueError("need a scene or a precomputed observation")
        if t_in > scene.frames:
            raise ValueError(f"scene has {scene.frames} frames, {t_in} requested")
        obs = observe(scene, num_queries, height, t_in)
    elif obs.frames != t_in:
        raise ValueError(f"observation covers {obs.frames} frames, {t_in} requested")
    c = enc.channels
    nq = obs.anchors.shape[0]

    embed = enc.embed if t_in == enc.frames else ad.take_range(enc.embed, 0, t_in * OBS_DIM)
    x = _affine(Tensor(obs.queries), embed, enc.embed_b)       # [T*Nq, C]
    pv = {}
    for level in PV_LEVELS:
        w, b = getattr(enc, f"pv{level}_w"), getattr(enc, f"pv{level}_b")
        res = obs.resolution[level]
        tokens = _affine(Tensor(obs.rasters[level]), w, b)     # [T*R*R, C]
        x = ad.add(x, ad.matmul(Tensor(obs.sampling[level]), tokens))
        maps = ad.transpose(ad.reshape(tokens, (t_in, res * res, c)), (0, 2, 1))
        pv[level] = PvFeatureSet(ad.reshape(maps, (t_in, c, res, res)), level=level)

    frames = []
    inv = 1.0 / math.sqrt(c)
    for t in range(t_in):
        f = ad.take_range(x, t * nq, (t + 1) * nq)
        att = ad.softmax_rows(ad.scale(ad.matmul(ad.matmul(f, enc.wq),
                                                 ad.transpose(ad.matmul(f, enc.wk))), inv))
        frames.append(ad.add(f, ad.matmul(att, ad.matmul(f, enc.wv))))
    return Encoding(bev=FeatureSet(ad.stack(frames)), pv=pv, anchors=obs.anchors, pooling=obs.pooling)


@dataclass
class ToyDecoder:
    """Temporal mean pooling, a two-layer perceptron giving D, and a linear box/velocity head."""

    channels: int
    hidden: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    wh: Tensor
    bh: Tensor

    param_names = ("w1", "b1", "w2", "b2", "wh", "bh")

    @classmethod
    def init(cls, channels: int, seed: int, hidden: int = 16) -> "ToyDecoder":
        rng = np.random.default_rng(seed)

        def u(shape, fan_in):
            s = 1.0 / math.sqrt(fan_in)
            return ad.parameter(rng.uniform(-s, s, shape))

        return cls(channels=channels, hidden=hidden,
                   w1=u((channels, hidden), channels), b1=ad.parameter(np.zeros((1, hidden))),
                   w2=u((hidden, channels), hidden), b2=ad.parameter(np.zeros((1, channels))),
                   wh=u((channels, 4), channels), bh=ad.parameter(np.zeros((1, 4))))

    @classmethod
    def zeros(cls, channels: int, hidden: int = 16) -> "ToyDecoder":
        z = lambda *s: ad.parameter(np.zeros(s))
        return cls(channels, hidden, z(channels, hidden), z(1, hidden), z(hidden, channels),
                   z(1, channels), z(channels, 4), z(1, 4))


def decode_and_regress(dec: ToyDecoder, f: FeatureSet, anchors: Optional[np.ndarray] = None
                       ) -> Tuple[Tensor, Tensor]:
    """Decoded features D [Nq, C] and predictions [Nq, 4] = (x, y, vx, vy).

    Positions are offsets from ``anchors`` when given; all outputs are in
    metres and metres per second.
    """
    t, nq, c = f.values.shape
    if c != dec.channels:
        raise ValueError(f"decoder expects {dec.channels} channels, got {c}")
    flat = ad.reshape(f.values, (t * nq, c))
    pooling = np.tile(np.eye(nq), (1, t)) / t
    pooled = ad.matmul(Tensor(pooling), flat)
    hidden = ad.relu(_affine(pooled, dec.w1, dec.b1))
    decoded = _affine(hidden, dec.w2, dec.b2)
    raw = ad.scale(_affine(decoded, dec.wh, dec.bh), POS_SCALE)
    if anchors is not None:
        offset = np.zeros((nq, 4))
        offset[:, :2] = anchors
        raw = ad.add(raw, Tensor(offset))
    return decoded, raw


def match_queries(predictions: np.ndarray, scene: SceneSample) -> np.ndarray:
    """Index of the query whose predicted position is nearest to each object."""
    pred_pos = np.asarray(predictions)[:, :2]
    gt = scene.gt_positions
    d2 = ((gt[:, None, :] - pred_pos[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def task_loss(predictions: Tensor, scene: SceneSample) -> Tensor:
    """Mean L1 over matched (x, y, vx, vy); unmatched queries are ignored."""
    idx = match_queries(predictions.data, scene)
    matched = ad.gather_rows(predictions, idx)
    return ad.reduce_mean(ad.abs_(ad.sub(matched, Tensor(scene.ground_truth()))))


def prediction_errors(predictions: np.ndarray, scene: SceneSample) -> Tuple[float, float]:
    """Mean Euclidean position and velocity error over matched objects."""
    pred = np.asarray(predictions)
    idx = match_queries(pred, scene)
    m = pred[idx]
    pos = np.linalg.norm(m[:, :2] - scene.gt_positions, axis=1).mean()
    vel = np.linalg.norm(m[:, 2:] - scene.gt_velocities, axis=1).mean()
    return float(pos), float(vel)
