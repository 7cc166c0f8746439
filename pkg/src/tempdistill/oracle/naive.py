"""Brute-force reference forwards.

Everything here works on nested Python lists with explicit loops and
``math``. Nothing is imported from :mod:`tempdistill.autodiff`; numpy only
appears at the boundary to turn inputs into lists and results back into
arrays so callers can compare.
"""

from __future__ import annotations

import math
from typing import Callable, Dict

import numpy as np


def _lists(x):
    return np.asarray(x, dtype=np.float64).tolist()


def _zeros(*shape):
    if len(shape) == 1:
        return [0.0] * shape[0]
    return [_zeros(*shape[1:]) for _ in range(shape[0])]


# -- primitives ---------------------------------------------------------------

def matmul(a, b):
    a, b = _lists(a), _lists(b)
    m, k = len(a), len(a[0])
    if len(b) != k:
        raise ValueError(f"matmul: inner extents {k} and {len(b)} differ")
    n = len(b[0])
    out = _zeros(m, n)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return np.array(out)


def _softmax_row(row):
    top = max(row)
    exps = [math.exp(v - top) for v in row]
    total = sum(exps)
    return [e / total for e in exps]


def softmax_rows(x):
    return np.array([_softmax_row(r) for r in _lists(x)])


def log_softmax_rows(x):
    out = []
    for row in _lists(x):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        out.append([v - lse for v in row])
    return np.array(out)


def relu(x):
    flat = np.asarray(x, dtype=np.float64).ravel().tolist()
    res = []
    for v in flat:
        res.append(v if v > 0.0 else 0.0)
    return np.array(res).reshape(np.shape(x))


def conv1d(x, w, b):
    x, w, b = _lists(x), _lists(w), _lists(b)
    cin, length = len(x), len(x[0])
    cout = len(w)
    if len(w[0]) != cin or len(w[0][0]) != 3:
        raise ValueError("conv1d: weight shape does not match input")
    out = _zeros(cout, length)
    for co in range(cout):
        for pos in range(length):
            s = b[co]
            for ci in range(cin):
                for k in range(3):
                    src = pos + k - 1
                    if 0 <= src < length:
                        s += w[co][ci][k] * x[ci][src]
            out[co][pos] = s
    return np.array(out)


def conv2d(x, w, b):
    x, w, b = _lists(x), _lists(w), _lists(b)
    cin, height, width = len(x), len(x[0]), len(x[0][0])
    cout = len(w)
    if len(w[0]) != cin:
        raise ValueError("conv2d: weight shape does not match input")
    out = _zeros(cout, height, width)
    for co in range(cout):
        for r in range(height):
            for c in range(width):
                s = b[co]
                for ci in range(cin):
                    for kr in range(3):
                        for kc in range(3):
                            rr, cc = r + kr - 1, c + kc - 1
                            if 0 <= rr < height and 0 <= cc < width:
                                s += w[co][ci][kr][kc] * x[ci][rr][cc]
                out[co][r][c] = s
    return np.array(out)


def _elementwise(a, b, fn):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes {a.shape} and {b.shape} differ")
    fa, fb = a.ravel().tolist(), b.ravel().tolist()
    return np.array([fn(u, v) for u, v in zip(fa, fb)]).reshape(a.shape)


def add(a, b):
    return _elementwise(a, b, lambda u, v: u + v)


def sub(a, b):
    return _elementwise(a, b, lambda u, v: u - v)


def mul(a, b):
    return _elementwise(a, b, lambda u, v: u * v)


def scale(a, s):
    a = np.asarray(a, dtype=np.float64)
    return np.array([v * s for v in a.ravel().tolist()]).reshape(a.shape)


def mask_channels(a, mask, channel_axis=-1):
    """Multiply ``a`` by ``mask`` repeated along ``channel_axis``."""
    a = np.asarray(a, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    axis = channel_axis % a.ndim
    out = np.empty_like(a)
    for idx in np.ndindex(*a.shape):
        m_idx = idx[:axis] + idx[axis + 1:]
        out[idx] = a[idx] * float(mask[m_idx])
    return out


def mean(x):
    flat = np.asarray(x, dtype=np.float64).ravel().tolist()
    if not flat:
        raise ValueError("mean of empty input")
    s = 0.0
    for v in flat:
        s += v
    return s / len(flat)


# -- composites ---------------------------------------------------------------

def _attention(query, key, value):
    """softmax(query . key^T / sqrt(C)) . value, all as lists [N][C]."""
    n, c = len(query), len(query[0])
    inv = 1.0 / math.sqrt(c)
    out = _zeros(n, len(value[0]))
    for i in range(n):
        logits = []
        for j in range(len(key)):
            s = 0.0
            for ch in range(c):
                s += query[i][ch] * key[j][ch]
            logits.append(s * inv)
        weights = _softmax_row(logits)
        for j, wt in enumerate(weights):
            for ch in range(len(value[0])):
                out[i][ch] += wt * value[j][ch]
    return out


def tsa_aggregate(teacher, t_stu):
    f = _lists(teacher)
    k = len(f) - t_stu
    if not 0 <= k < 8:
        raise ValueError(f"frame gap {k} outside [0, 8)")
    nq, c = len(f[0]), len(f[0][0])
    out = []
    for t in range(t_stu):
        acc = _zeros(nq, c)
        for t1 in range(t + k + 1):
            term = _attention(f[t1], f[t], f[t1])
            for q in range(nq):
                for ch in range(c):
                    acc[q][ch] += term[q][ch]
        out.append(acc)
    return np.array(out)


def tsa_aggregate_swapped(teacher, t_stu):
    """Alternative reading: current frame as query, frame t1 as key and value."""
    f = _lists(teacher)
    k = len(f) - t_stu
    if not 0 <= k < 8:
        raise ValueError(f"frame gap {k} outside [0, 8)")
    nq, c = len(f[0]), len(f[0][0])
    out = []
    for t in range(t_stu):
        acc = _zeros(nq, c)
        for t1 in range(t + k + 1):
            term = _attention(f[t], f[t1], f[t1])
            for q in range(nq):
                for ch in range(c):
                    acc[q][ch] += term[q][ch]
        out.append(acc)
    return np.array(out)


def _transpose(m):
    return [[m[r][c] for r in range(len(m))] for c in range(len(m[0]))]


def generate_features_bev(x, w1, b1, w2, b2):
    frames = []
    for frame in _lists(x):
        h = conv1d(_transpose(frame), w1, b1)
        h = relu(h)
        out = conv1d(h, w2, b2).tolist()
        frames.append(_transpose(out))
    return np.array(frames)


def generate_features_pv(x, w1, b1, w2, b2):
    frames = []
    for frame in _lists(x):
        h = relu(conv2d(frame, w1, b1))
        frames.append(conv2d(h, w2, b2))
    return np.array(frames)


def mse(a, b):
    a = np.asarray(a, dtype=np.float64).ravel().tolist()
    b = np.asarray(b, dtype=np.float64).ravel().tolist()
    if len(a) != len(b):
        raise ValueError("mse: size mismatch")
    s = 0.0
    for u, v in zip(a, b):
        s += (u - v) * (u - v)
    return s / len(a)


def rc_bev(student, teacher, mask, w1, b1, w2, b2):
    t_stu = len(student)
    masked = mask_channels(student, mask, channel_axis=-1)
    gen = generate_features_bev(masked, w1, b1, w2, b2)
    target = tsa_aggregate(teacher, t_stu)
    return mse(gen, target)


def _pv_tokens(frames):
    # [T][C][H][W] -> [T][H*W][C]
    out = []
    for fr in frames:
        c, h, w = len(fr), len(fr[0]), len(fr[0][0])
        out.append([[fr[ch][r][col] for ch in range(c)] for r in range(h) for col in range(w)])
    return out


def _pv_untokens(tokens, h, w):
    out = []
    for tk in tokens:
        c = len(tk[0])
        out.append([[[tk[r * w + col][ch] for col in range(w)] for r in range(h)]
                    for ch in range(c)])
    return out


def rc_pv(student, teacher, mask, w1, b1, w2, b2):
    s = _lists(student)
    t_stu, h, w = len(s), len(s[0][0]), len(s[0][0][0])
    masked = mask_channels(student, mask, channel_axis=1)
    gen = generate_features_pv(masked, w1, b1, w2, b2)
    agg = tsa_aggregate(_pv_tokens(_lists(teacher)), t_stu).tolist()
    target = _pv_untokens(agg, h, w)
    return mse(gen, target)


def spatial_reconstruction(student, teacher, mask, w1, b1, w2, b2):
    t_stu = len(_lists(student))
    masked = mask_channels(student, mask, channel_axis=1)
    gen = generate_features_pv(masked, w1, b1, w2, b2)
    return mse(gen, _lists(teacher)[:t_stu])


def similarity(f, i, j):
    f = _lists(f)
    if i == j:
        raise ValueError("self-similarity is excluded")
    return matmul(f[i], _transpose(f[j]))


def trd(student, teacher, tau):
    s, t = _lists(student), _lists(teacher)
    if len(s) != len(t):
        raise ValueError("frame counts differ")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    nq = len(s[0])
    pair_losses = []
    for i in range(len(s)):
        for j in range(i + 1, len(s)):
            ss = similarity(s, i, j).tolist()
            st = similarity(t, i, j).tolist()
            total = 0.0
            for r in range(nq):
                p = _softmax_row([v / tau for v in ss[r]])
                q = _softmax_row([v / tau for v in st[r]])
                for a, b in zip(p, q):
                    total += a * math.log(a / b)
            pair_losses.append(total / (nq * nq))
    if not pair_losses:
        raise ValueError("need at least two frames")
    return sum(pair_losses) / len(pair_losses)


def dc(student_d, teacher_d):
    return mse(student_d, teacher_d)


def total(alphas, components):
    out = 0.0
    for a, c in zip(alphas, components):
        if a != 0.0:
            out += a * c
    return out


def task_loss(predictions, ground_truth):
    """Nearest-position assignment by exhaustive pair scan, then mean L1 over (x, y, vx, vy)."""
    pred, gt = _lists(predictions), _lists(ground_truth)
    total = 0.0
    for obj in gt:
        best, best_d = None, math.inf
        for q in pred:
            d = (obj[0] - q[0]) ** 2 + (obj[1] - q[1]) ** 2
            if d < best_d:
                best, best_d = q, d
        for a, b in zip(best, obj):
            total += abs(a - b)
    return total / (len(gt) * len(gt[0]))


OPS: Dict[str, Callable] = {
    "matmul": matmul,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "relu": relu,
    "conv1d_same3": conv1d,
    "conv2d_same3": conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "mask_channels": mask_channels,
    "reduce_mean": mean,
    "tsa_aggregate": tsa_aggregate,
    "tsa_aggregate_swapped": tsa_aggregate_swapped,
    "generate_features_bev": generate_features_bev,
    "generate_features_pv": generate_features_pv,
    "rc_bev_loss": rc_bev,
    "rc_pv_loss": rc_pv,
    "spatial_reconstruction_loss": spatial_reconstruction,
    "similarity": similarity,
    "trd_loss": trd,
    "dc_loss": dc,
    "total_distill_loss": total,
    "task_loss": task_loss,
}


def oracle_forward(op: str, *inputs, **kwargs):
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown oracle op {op!r}") from None
    return fn(*inputs, **kwargs)
