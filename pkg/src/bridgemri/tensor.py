"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 for training, float64 for
gradient checks) and records the operation that produced it as a link to
its parent tensors plus a vector-Jacobian product closure.  Node ids are
assigned in creation order, so the recorded graph doubles as the tape:
walking reachable nodes in decreasing id order is a valid reverse
topological order.  Tensors are treated as immutable once built; a
backward pass never mutates forward data.

The primitive set is deliberately small: elementwise add / subtract /
multiply, scalar scale, 2-D matmul, stride-1 "same" 2-D convolution,
2x2 average pooling, nearest-neighbour 2x upsampling, SiLU, group
normalization, channel concatenation, reshape, full mean reduction,
absolute value and square.  ``clamp01_ste`` is a straight-through
clamp used by the bridge losses; its backward is an identity by design
and is therefore excluded from finite-difference checking.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as _rng
from .errors import NumericsError, ShapeError

_ids = itertools.count()


class Tensor:
    """Multi-dimensional array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # Operator sugar; scalars go through scale() so dtype is preserved.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


def seeded_standard_normal(state: _rng.RngState, shape, dtype=np.float32) -> Tensor:
    """Standard-normal Tensor from a counter-based stream (not on the tape)."""
    return Tensor(_rng.standard_normal(state, shape, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes not broadcastable: {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise / linear primitives
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _broadcastable(a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _broadcastable(a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _broadcastable(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    def vjp(g):
        return (g * s,)

    return _result(a.data * s, (a,), vjp)


def shift(a: Tensor, s: float) -> Tensor:
    """Add a scalar constant."""
    def vjp(g):
        return (g,)

    return _result(a.data + np.asarray(s, dtype=a.dtype), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), vjp)


# --------------------------------------------------------------------------
# spatial primitives (NCHW layout)
# --------------------------------------------------------------------------

def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patches of the zero-padded input as rows: (B*H*W, C*kh*kw)."""
    b, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), ((kh - 1) // 2,) * 2, ((kw - 1) // 2,) * 2))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kh * kw)


def _conv_forward(xd: np.ndarray, wd: np.ndarray):
    b, c, h, w = xd.shape
    o = wd.shape[0]
    cols = _im2col(xd, wd.shape[2], wd.shape[3])
    out = cols @ wd.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(b, h, w, o).transpose(0, 3, 1, 2)), cols


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding, odd kernels.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw).  Bias, if any, is a
    separate broadcast add.
    """
    _same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernels must have odd extents, got {w.shape}")
    xd, wd = x.data, w.data
    out, cols = _conv_forward(xd, wd)
    b, _, h, wid = xd.shape
    o = wd.shape[0]

    def vjp(g):
        dx = dw = None
        if x.requires_grad:
            # transpose + 180-degree flip turns the adjoint into another
            # same-padded stride-1 convolution
            wt = np.ascontiguousarray(wd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            dx, _ = _conv_forward(np.ascontiguousarray(g), wt)
        if w.requires_grad:
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * h * wid, o)
            dw = (gm.T @ cols).reshape(wd.shape)
        return (dx, dw)

    return _result(out, (x, w), vjp)


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = _require_4d(x, "avg_pool2")
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {x.shape}")
    xv = x.data.reshape(b, c, h // 2, 2, w // 2, 2)
    out = xv.mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, x.dtype),)

    return _result(out, (x,), vjp)


def upsample_nearest2(x: Tensor) -> Tensor:
    b, c, h, w = _require_4d(x, "upsample_nearest2")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), vjp)


def _require_4d(x: Tensor, name: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{name} expects (B, C, H, W), got {x.shape}")
    return x.shape


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    _same_dtype(*tensors)
    for t in tensors:
        _require_4d(t, "concat_channels")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels mismatch: {ref} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=1)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, vjp)


# --------------------------------------------------------------------------
# nonlinearities and reductions
# --------------------------------------------------------------------------

def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def vjp(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _result(out, (x,), vjp)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 4,
               eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (channels/groups, H, W), then affine.

    gamma and beta have shape (C, 1, 1) so the affine step broadcasts.
    """
    b, c, h, w = _require_4d(x, "group_norm")
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by {groups} groups")
    if gamma.shape != (c, 1, 1) or beta.shape != (c, 1, 1):
        raise ShapeError(f"affine params must be ({c}, 1, 1), got {gamma.shape} and {beta.shape}")
    _same_dtype(x, gamma, beta)
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, x.dtype))
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(b, c, h, w)
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        dgamma = dbeta = dx = None
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3)).reshape(c, 1, 1)
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(c, 1, 1)
        if x.requires_grad:
            dh = (g * gd).reshape(b, groups, -1)
            m1 = dh.mean(axis=-1, keepdims=True)
            m2 = (dh * xhat_g).mean(axis=-1, keepdims=True)
            dx = (inv * (dh - m1 - xhat_g * m2)).reshape(b, c, h, w)
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), vjp)


def mean_reduce(x: Tensor) -> Tensor:
    """Mean over every element, producing a rank-0 tensor."""
    n = x.size
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape),)

    return _result(x.data.mean(), (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    xd = x.data

    def vjp(g):
        return (g * np.sign(xd),)

    return _result(np.abs(xd), (x,), vjp)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def vjp(g):
        return (g * (2.0 * xd),)

    return _result(xd * xd, (x,), vjp)


def clamp01_ste(x: Tensor) -> Tensor:
    """Clamp to [0, 1] with a straight-through (identity) backward."""
    def vjp(g):
        return (g,)

    return _result(np.clip(x.data, 0.0, 1.0), (x,), vjp)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "shift": shift,
    "matmul": matmul,
    "reshape": reshape,
    "conv2d": conv2d,
    "avg_pool2": avg_pool2,
    "upsample_nearest2": upsample_nearest2,
    "concat_channels": concat_channels,
    "silu": silu,
    "group_norm": group_norm,
    "mean_reduce": mean_reduce,
    "absolute": absolute,
    "square": square,
}


def forward_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch one primitive by name (handy for enumeration in tests)."""
    if op not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op!r}")
    if op == "concat_channels":
        return concat_channels(inputs)
    return PRIMITIVES[op](*inputs, **attrs)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from leaf tensors to their gradients and also stores
    the raw arrays on ``leaf.grad``.  Leaves passed explicitly but not
    reachable from the loss get a zero gradient.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a rank-0 loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {id(loss): loss}
    stack = [loss]
    while stack:
        for p in stack.pop()._parents:
            if p.requires_grad and id(p) not in nodes:
                nodes[id(p)] = p
                stack.append(p)
    order = sorted(nodes.values(), key=lambda t: t.node_id, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in order:
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    result: dict[Tensor, Tensor] = {}
    for node in order:
        if node._vjp is None and node.requires_grad:
            g = grads.get(id(node))
            if g is None:
                g = np.zeros(node.shape, dtype=node.dtype)
            g = np.ascontiguousarray(np.broadcast_to(g, node.shape)).astype(node.dtype, copy=False)
            node.grad = g
            result[node] = Tensor(g, dtype=node.dtype)
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                z = np.zeros(leaf.shape, dtype=leaf.dtype)
                leaf.grad = z
                result[leaf] = Tensor(z, dtype=leaf.dtype)
    return result


def gradient_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    ``f`` maps the parameter list to a scalar tensor and must be
    re-evaluable; parameters should be float64 for the differences to
    resolve.  Error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    maximized over every parameter entry.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = f(params)
    if out.shape != ():
        raise ShapeError(f"gradient_check target must be scalar, got {out.shape}")
    if not np.isfinite(out.data):
        raise NumericsError("objective evaluated to a non-finite value")
    grads = backward(out, leaves=params)
    worst = 0.0
    for p in params:
        analytic = grads[p].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = float(f(params).data)
            flat[i] = saved - eps
            lo = float(f(params).data)
            flat[i] = saved
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericsError("objective non-finite during finite differencing")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(float(analytic[i]) - numeric) / max(abs(float(analytic[i])),
                                                          abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
