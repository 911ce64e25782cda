"""Dense tensors with reverse-mode differentiation over a per-step tape.

Every op below records a backward closure on its output when any input
requires a gradient and recording is enabled. ``backward`` walks the
recorded nodes in reverse creation order, which is always a valid
topological order, and then drops the graph.

Shapes must agree exactly. The single exception is a 1-D bias added along
the trailing dimension. Masks and rotary tables are constant attributes
and may broadcast; they never carry gradients.
"""
from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "GraphError", "NumericError",
    "tensor", "no_grad", "backward", "set_default_dtype", "get_default_dtype",
    "default_dtype", "set_debug",
    "matmul", "linear", "add", "sub", "mul", "scale", "sum", "mean",
    "softmax_lastdim", "log_softmax_lastdim", "layernorm", "rmsnorm",
    "silu", "sigmoid", "glu", "embedding_lookup", "concat", "slice", "transpose",
    "reshape", "depthwise_conv1d", "conv1d", "dropout", "rope", "pick_mean",
]


class ShapeError(ValueError):
    """Raised when an op receives shapes it cannot combine."""

    def __init__(self, kind, *shapes, detail=""):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{kind}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


_local = threading.local()
_seq = itertools.count()
_dtype = [np.dtype(np.float32)]
_debug = [os.environ.get("CTXASR_DEBUG", "0") not in ("", "0")]


def set_default_dtype(dtype):
    _dtype[0] = np.dtype(dtype)


def get_default_dtype():
    return _dtype[0]


@contextmanager
def default_dtype(dtype):
    old = _dtype[0]
    _dtype[0] = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype[0] = old


def set_debug(flag: bool):
    """In debug mode every op checks its inputs for NaN."""
    _debug[0] = bool(flag)


def _recording():
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    old = _recording()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else _dtype[0]
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = -1
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _const(x):
    return x.data if isinstance(x, Tensor) else x


def _check_finite(kind, *arrays):
    for a in arrays:
        if a.dtype.kind == "f" and np.isnan(a).any():
            raise NumericError(f"{kind}: NaN in input")


def _result(kind, data, parents, bw):
    if _debug[0]:
        _check_finite(kind, *(p.data for p in parents))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
        out._seq = next(_seq)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def backward(root: Tensor):
    """Accumulate d(root)/d(x) into ``x.grad`` for every ancestor that needs it."""
    if root._consumed:
        raise GraphError("graph already consumed by a previous backward call")
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._backward is None:
        raise GraphError("root was not produced by a recorded op")

    nodes = []
    seen = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n._backward is not None:
            nodes.append(n)
            stack.extend(p for p in n._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    pending = {id(root): np.ones_like(root.data)}
    for n in nodes:
        g = pending.pop(id(n), None)
        if g is not None:
            n.grad = g
            for p, pg in zip(n._parents, n._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p.grad = pg.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    pending[key] = pg if key not in pending else pending[key] + pg
        n._backward = None
        n._parents = ()
        n._consumed = True


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading dims; ``b`` may also be a plain 2-D matrix."""
    A, B = a.data, b.data
    ok = A.ndim >= 2 and B.ndim >= 2 and A.shape[-1] == B.shape[-2]
    if ok and B.ndim > 2:
        ok = A.shape[:-2] == B.shape[:-2]
    if not ok:
        raise ShapeError("matmul", A.shape, B.shape)

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _result("matmul", A @ B, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as [d_out, d_in]."""
    X, W = x.data, w.data
    if W.ndim != 2 or X.shape[-1] != W.shape[1] or (b is not None and b.shape != (W.shape[0],)):
        raise ShapeError("linear", X.shape, W.shape, *(() if b is None else (b.shape,)))
    out = X @ W.T
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ W if x.requires_grad else None
        gw = g2.T @ X.reshape(-1, X.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(0) if b.requires_grad else None)

    return _result("linear", out, parents, bw)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape == B.shape:
        return _result("add", A + B, (a, b), lambda g: (g, g))
    if B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        return _result("add", A + B, (a, b), lambda g: (g, g.reshape(-1, B.shape[0]).sum(0)))
    raise ShapeError("add", A.shape, B.shape, detail="only trailing-dimension bias may broadcast")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. ``b`` is a same-shape Tensor or a same-shape constant array."""
    A = a.data
    if not isinstance(b, Tensor):
        C = np.asarray(b, dtype=A.dtype)
        if C.shape != A.shape:
            raise ShapeError("mul", A.shape, C.shape)
        return _result("mul", A * C, (a,), lambda g: (g * C,))
    B = b.data
    if A.shape != B.shape:
        raise ShapeError("mul", A.shape, B.shape)
    return _result("mul", A * B, (a, b), lambda g: (g * B if a.requires_grad else None,
                                                    g * A if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    X = x.data
    return _result("sum", np.asarray(X.sum(), dtype=X.dtype).reshape(()), (x,),
                   lambda g: (np.full_like(X, g),))


def mean(x: Tensor) -> Tensor:
    X = x.data
    n = X.size
    return _result("mean", np.asarray(X.mean(), dtype=X.dtype).reshape(()), (x,),
                   lambda g: (np.full_like(X, g / n),))


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sig(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    X = x.data
    s = _sig(X)
    return _result("silu", X * s, (x,), lambda g: (g * (s * (1 + X * (1 - s))),))


def glu(x: Tensor) -> Tensor:
    """Split the last dim in halves (a, b) and return ``a * sigmoid(b)``."""
    X = x.data
    if X.shape[-1] % 2:
        raise ShapeError("glu", X.shape, detail="last dim must be even")
    h = X.shape[-1] // 2
    a, b = X[..., :h], X[..., h:]
    s = _sig(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return _result("glu", a * s, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- normalisation

def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (True = keep) is a constant that may broadcast."""
    X = x.data
    if mask is not None:
        X = np.where(mask, X, -np.inf)
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax_lastdim", y, (x,), bw)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    X = x.data
    m = X.max(axis=-1, keepdims=True)
    z = X - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax_lastdim", y, (x,), bw)


def layernorm(x: Tensor, w: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data
    d = X.shape[-1]
    if w.shape != (d,) or b.shape != (d,):
        raise ShapeError("layernorm", X.shape, w.shape, b.shape)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    W = w.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * W
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gw = (g * xhat).reshape(-1, d).sum(0) if w.requires_grad else None
        gb = g.reshape(-1, d).sum(0) if b.requires_grad else None
        return gx, gw, gb

    return _result("layernorm", xhat * W + b.data, (x, w, b), bw)


def rmsnorm(x: Tensor, w: Tensor, eps: float = 1e-6) -> Tensor:
    X = x.data
    d = X.shape[-1]
    if w.shape != (d,):
        raise ShapeError("rmsnorm", X.shape, w.shape)
    r = 1.0 / np.sqrt((X * X).mean(axis=-1, keepdims=True) + eps)
    xn = X * r
    W = w.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gn = g * W
            gx = r * (gn - xn * (gn * xn).mean(axis=-1, keepdims=True))
        gw = (g * xn).reshape(-1, d).sum(0) if w.requires_grad else None
        return gx, gw

    return _result("rmsnorm", xn * W, (x, w), bw)


# ---------------------------------------------------------------- indexing and layout

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a [V, d] table with an integer array of any shape."""
    T = table.data
    ids = np.asarray(ids, dtype=np.int64)
    if T.ndim != 2:
        raise ShapeError("embedding_lookup", T.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= T.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range [0, {T.shape[0]})")

    def bw(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, T.shape[1]))
        return (gt,)

    return _result("embedding_lookup", T[ids], (table,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    arrs = [t.data for t in tensors]
    nd = arrs[0].ndim
    ax = axis % nd
    for a in arrs[1:]:
        if a.ndim != nd or a.shape[:ax] + a.shape[ax + 1:] != arrs[0].shape[:ax] + arrs[0].shape[ax + 1:]:
            raise ShapeError("concat", *(a.shape for a in arrs))
    bounds = np.cumsum([0] + [a.shape[ax] for a in arrs])

    def bw(g):
        idx = [np.s_[:]] * nd
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx[ax] = np.s_[lo:hi]
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    return _result("concat", np.concatenate(arrs, axis=ax), tuple(tensors), bw)


def slice(x: Tensor, key) -> Tensor:  # noqa: A001
    """Basic (view-style) indexing with slices and integers."""
    X = x.data
    out = X[key]

    def bw(g):
        gx = np.zeros_like(X)
        gx[key] = g
        return (gx,)

    return _result("slice", np.ascontiguousarray(out), (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    X = x.data
    if axes is None:
        axes = tuple(reversed(range(X.ndim)))
    inv = np.argsort(axes)
    return _result("transpose", np.ascontiguousarray(X.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape) -> Tensor:
    X = x.data
    try:
        out = X.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", X.shape, tuple(shape)) from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(X.shape),))


# ---------------------------------------------------------------- convolutions

def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel convolution along time, same-length zero padding.

    x is [..., T, C]; w is [C, K] with K odd.
    """
    X, W = x.data, w.data
    C, K = W.shape
    if X.shape[-1] != C or K % 2 == 0:
        raise ShapeError("depthwise_conv1d", X.shape, W.shape, detail="kernel must be odd")
    T = X.shape[-2]
    p = K // 2
    pad = [(0, 0)] * (X.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(X, pad)
    out = xp[..., 0:T, :] * W[:, 0]
    for k in range(1, K):
        out += xp[..., k:k + T, :] * W[:, k]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + T, :] += g * W[:, k]
            gx = gxp[..., p:p + T, :]
        if w.requires_grad:
            g2 = g.reshape(-1, C)
            gw = np.stack([(xp[..., k:k + T, :].reshape(-1, C) * g2).sum(0) for k in range(K)], axis=1)
        if b is None:
            return gx, gw
        return gx, gw, (g.reshape(-1, C).sum(0) if b.requires_grad else None)

    return _result("depthwise_conv1d", out, parents, bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Dense 1-D convolution with padding K//2 on both sides.

    x is [..., T, C_in]; w is [C_out, C_in, K] with K odd. Output length is
    ``ceil(T / stride)``.
    """
    X, W = x.data, w.data
    Cout, Cin, K = W.shape
    if X.shape[-1] != Cin or K % 2 == 0:
        raise ShapeError("conv1d", X.shape, W.shape)
    T = X.shape[-2]
    p = K // 2
    Tout = (T + 2 * p - K) // stride + 1
    xp = np.pad(X, [(0, 0)] * (X.ndim - 2) + [(p, p), (0, 0)])
    span = stride * (Tout - 1) + 1
    cols = np.stack([xp[..., k:k + span:stride, :] for k in range(K)], axis=-2)
    cols = cols.reshape(X.shape[:-2] + (Tout, K * Cin))
    W2 = W.transpose(0, 2, 1).reshape(Cout, K * Cin)
    out = cols @ W2.T
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gcols = (g @ W2).reshape(X.shape[:-2] + (Tout, K, Cin))
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + span:stride, :] += gcols[..., k, :]
            gx = gxp[..., p:p + T, :]
        if w.requires_grad:
            gw2 = g.reshape(-1, Cout).T @ cols.reshape(-1, K * Cin)
            gw = gw2.reshape(Cout, K, Cin).transpose(0, 2, 1)
        if b is None:
            return gx, gw
        return gx, gw, (g.reshape(-1, Cout).sum(0) if b.requires_grad else None)

    return _result("conv1d", out, parents, bw)


# ---------------------------------------------------------------- attention helpers

def rope(x: Tensor, cos, sin) -> Tensor:
    """Rotate consecutive coordinate pairs (2i, 2i+1) by angles given as cos/sin tables.

    ``cos`` and ``sin`` are constants broadcastable to ``x.shape[:-1] + (dh/2,)``.
    """
    X = x.data
    if X.shape[-1] % 2:
        raise ShapeError("rope", X.shape, detail="head_dim must be even")
    x1, x2 = X[..., 0::2], X[..., 1::2]
    out = np.empty_like(X)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _result("rope", out, (x,), bw)


def pick_mean(logp: Tensor, targets, weights) -> Tensor:
    """Weighted mean of ``-logp[..., target]`` over positions with nonzero weight.

    Positions with zero weight are never read, so their targets are irrelevant.
    """
    L = logp.data
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=L.dtype)
    if targets.shape != L.shape[:-1] or weights.shape != targets.shape:
        raise ShapeError("pick_mean", L.shape, targets.shape, weights.shape)
    sel = np.nonzero(weights)
    if len(sel[0]) == 0:
        raise ValueError("pick_mean: no positions with nonzero weight")
    w = weights[sel]
    tot = w.sum()
    t = targets[sel]
    picked = L[sel + (t,)]
    val = -(w * picked).sum() / tot

    def bw(g):
        gl = np.zeros_like(L)
        gl[sel + (t,)] = -g * w / tot
        return (gl,)

    return _result("pick_mean", np.asarray(val, dtype=L.dtype).reshape(()), (logp,), bw)
