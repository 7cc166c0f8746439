"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the distillation losses, the toy encoder/decoder and
the task loss need are provided. Every op returns a new immutable
:class:`Tensor`; each tensor carries a global sequence number, so the
creation order doubles as a topological order for :func:`backward`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; ``requires_grad=True`` marks a parameter
    leaf. Interior nodes are produced by the functions in this module and
    remember their op name, parents and a closure mapping the output
    gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.seq = next(_counter)

    @classmethod
    def _node(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.parents = tuple(parents)
            out._backward = backward
        else:
            out.parents = ()
            out._backward = None
        out.seq = next(_counter)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _need_ndim(x: Tensor, ndim: int, op: str) -> None:
    if x.data.ndim != ndim:
        raise ShapeError(f"{op}: expected a {ndim}-d tensor, got shape {x.shape}")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _need_ndim(a, 2, "matmul")
    _need_ndim(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return Tensor._node(A @ B, "matmul", (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _need_ndim(x, 2, "softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._node(p, "softmax_rows", (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _need_ndim(x, 2, "log_softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor._node(out, "log_softmax_rows", (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    gate = (x.data > 0.0).astype(np.float64)

    def backward(g):
        return (g * gate,)

    return Tensor._node(x.data * gate, "relu", (x,), backward)


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return Tensor._node(np.abs(x.data), "abs", (x,), backward)


# -- convolutions -------------------------------------------------------------
#
# Both convolutions are "same" 3-tap (or 3x3) cross-correlations with zero
# padding of one. An optional leading batch axis is accepted so a generator
# can run over all frames in one node; every sample is independent.

def _im2col_1d(x: np.ndarray) -> np.ndarray:
    # x: [B, Cin, L] -> [B, Cin*3, L]
    b, cin, length = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    cols = np.stack([xp[:, :, k:k + length] for k in range(3)], axis=2)
    return cols.reshape(b, cin * 3, length)


def _col2im_1d(cols: np.ndarray, cin: int, length: int) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, cin, 3, length)
    xp = np.zeros((b, cin, length + 2))
    for k in range(3):
        xp[:, :, k:k + length] += cols[:, :, k]
    return xp[:, :, 1:-1]


def _conv1d_backward(g, cols, w2, cin, length, wshape):
    dw = np.einsum("bol,bkl->ok", g, cols).reshape(wshape)
    db = g.sum(axis=(0, 2))
    dcols = np.einsum("ok,bol->bkl", w2, g)
    return _col2im_1d(dcols, cin, length), dw, db


def conv1d_same3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Zero-padded 3-tap cross-correlation; x is [Cin, L] or [B, Cin, L]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    batched = x.data.ndim == 3
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"conv1d_same3: input must be [Cin, L] or [B, Cin, L], got {x.shape}")
    X = x.data if batched else x.data[None]
    _, cin, length = X.shape
    if w.data.ndim != 3 or w.shape[1] != cin or w.shape[2] != 3:
        raise ShapeError(f"conv1d_same3: weight {w.shape} incompatible with {cin} input channels")
    cout = w.shape[0]
    if b.shape != (cout,):
        raise ShapeError(f"conv1d_same3: bias shape {b.shape}, expected ({cout},)")
    cols = _im2col_1d(X)
    w2 = w.data.reshape(cout, cin * 3)
    out = np.einsum("ok,bkl->bol", w2, cols) + b.data[None, :, None]

    def backward(g):
        G = g if batched else g[None]
        dx, dw, db = _conv1d_backward(G, cols, w2, cin, length, w.shape)
        return (dx if batched else dx[0]), dw, db

    return Tensor._node(out if batched else out[0], "conv1d_same3", (x, w, b), backward)


def _im2col_2d(x: np.ndarray) -> np.ndarray:
    # x: [B, Cin, H, W] -> [B, Cin*9, H*W]
    bsz, cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = [xp[:, :, r:r + h, c:c + w] for r in range(3) for c in range(3)]
    cols = np.stack(patches, axis=2)
    return cols.reshape(bsz, cin * 9, h * w)


def _col2im_2d(cols: np.ndarray, cin: int, h: int, w: int) -> np.ndarray:
    bsz = cols.shape[0]
    cols = cols.reshape(bsz, cin, 9, h, w)
    xp = np.zeros((bsz, cin, h + 2, w + 2))
    for r in range(3):
        for c in range(3):
            xp[:, :, r:r + h, c:c + w] += cols[:, :, r * 3 + c]
    return xp[:, :, 1:-1, 1:-1]


def _conv2d_backward(g, cols, w2, cin, h, w, wshape):
    g2 = g.reshape(g.shape[0], g.shape[1], h * w)
    dw = np.einsum("bol,bkl->ok", g2, cols).reshape(wshape)
    db = g2.sum(axis=(0, 2))
    dcols = np.einsum("ok,bol->bkl", w2, g2)
    return _col2im_2d(dcols, cin, h, w), dw, db


def conv2d_same3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Zero-padded 3x3 cross-correlation; x is [Cin, H, W] or [B, Cin, H, W]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d_same3: input must be [Cin, H, W] or [B, Cin, H, W], got {x.shape}")
    batched = x.data.ndim == 4
    X = x.data if batched else x.data[None]
    bsz, cin, h, wd = X.shape
    if w.data.ndim != 4 or w.shape[1] != cin or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_same3: weight {w.shape} incompatible with {cin} input channels")
    cout = w.shape[0]
    if b.shape != (cout,):
        raise ShapeError(f"conv2d_same3: bias shape {b.shape}, expected ({cout},)")
    cols = _im2col_2d(X)
    w2 = w.data.reshape(cout, cin * 9)
    out = (np.einsum("ok,bkl->bol", w2, cols) + b.data[None, :, None]).reshape(bsz, cout, h, wd)

    def backward(g):
        G = g if batched else g[None]
        dx, dw, db = _conv2d_backward(G, cols, w2, cin, h, wd, w.shape)
        return (dx if batched else dx[0]), dw, db

    return Tensor._node(out if batched else out[0], "conv2d_same3", (x, w, b), backward)


# -- elementwise --------------------------------------------------------------

def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no general broadcasting)")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    return Tensor._node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    return Tensor._node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    A, B = a.data, b.data
    return Tensor._node(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return Tensor._node(a.data * s, "scale", (a,), lambda g: (g * s,))


def mask_channels(a: Tensor, mask: Tensor, channel_axis: int = -1) -> Tensor:
    """Multiply ``a`` by a mask that lacks exactly the channel axis.

    This is the only broadcast supported: a [T, Nq] mask over [T, Nq, C]
    features (``channel_axis=-1``) or a [T, H, W] mask over [T, C, H, W]
    maps (``channel_axis=1``).
    """
    a, mask = as_tensor(a), as_tensor(mask)
    axis = channel_axis % a.data.ndim
    expected = a.shape[:axis] + a.shape[axis + 1:]
    if mask.shape != expected:
        raise ShapeError(f"mask_channels: mask {mask.shape} does not match {a.shape} without axis {axis}")
    M = np.expand_dims(mask.data, axis)
    A = a.data

    def backward(g):
        return g * M, (g * A).sum(axis=axis)

    return Tensor._node(A * M, "mask_channels", (a, mask), backward)


def reduce_mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    if n == 0:
        raise ShapeError("reduce_mean: empty tensor")
    shape = x.shape

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return Tensor._node(np.array(x.data.mean()), "reduce_mean", (x,), backward)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return reduce_mean(mul(d, d))


# -- structural ---------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return Tensor._node(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        _need_ndim(x, 2, "transpose")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._node(np.transpose(x.data, axes), "transpose", (x,),
                        lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index: int) -> Tensor:
    """Select ``x[index]`` along the leading axis."""
    x = as_tensor(x)
    n = x.shape[0]
    if not 0 <= index < n:
        raise IndexError(f"take: index {index} out of range for leading extent {n}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return Tensor._node(x.data[index], "take", (x,), backward)


def take_range(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise IndexError(f"take_range: [{start}, {stop}) invalid for leading extent {x.shape[0]}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Tensor._node(x.data[start:stop], "take_range", (x,), backward)


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("stack: nothing to stack")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {x.shape} differ")

    def backward(g):
        return tuple(g[i] for i in range(len(xs)))

    return Tensor._node(np.stack([x.data for x in xs]), "stack", xs, backward)


def gather_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._node(x.data[idx], "gather_rows", (x,), backward)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


# -- backward -----------------------------------------------------------------

def graph_nodes(root: Tensor) -> list:
    """All nodes reachable from ``root``, in creation (topological) order."""
    seen = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack_.extend(node.parents)
    return sorted(seen.values(), key=lambda n: n.seq)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to parameter leaves.

    With ``params`` omitted, every reachable leaf with ``requires_grad`` is
    returned. Leaves the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    nodes = graph_nodes(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaf_grads: Dict[int, np.ndarray] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.is_leaf and node.requires_grad:
                leaf_grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is None:
        params = [n for n in nodes if n.is_leaf and n.requires_grad]
    out = {}
    for p in params:
        g = leaf_grads.get(id(p))
        out[p] = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


# -- random source ------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_TWO_POW_M53 = 2.0 ** -53


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RandomSource:
    """SplitMix64 stream; identical seeds replay identical draws anywhere."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def uniform(self) -> float:
        while True:
            d = ((self.next_u64() >> 11) + 1) * _TWO_POW_M53
            # only reachable when the top 53 bits are all ones
            if d < 1.0:
                return d

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` draws, bit-identical to calling :meth:`uniform` ``n`` times."""
        if n <= 0:
            return np.empty(0)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        d = ((z >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _TWO_POW_M53
        self.state = (self.state + n * _GAMMA) & _MASK64
        if np.any(d >= 1.0):
            # astronomically rare; fall back to the scalar path for exact replay
            self.state = (self.state - n * _GAMMA) & _MASK64
            return np.array([self.uniform() for _ in range(n)])
        return d


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (for per-sample / per-step streams)."""
    h = 0x6A09E667F3BCC909
    for p in parts:
        h = _mix64(((h ^ (int(p) & _MASK64)) + _GAMMA) & _MASK64)
    return h
