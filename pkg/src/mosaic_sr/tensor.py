"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op here is a pure function of its inputs. When any input tracks
gradients, the result records its parents plus a closure mapping the output
gradient to one gradient per parent; :meth:`Tensor.backward` walks that graph
in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "DimensionError",
    "tensor",
    "zeros",
    "ones",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "hadamard",
    "neg",
    "scale",
    "sigmoid",
    "tanh_",
    "relu",
    "conv2d",
    "global_avg_pool",
    "pixel_shuffle",
    "pixel_unshuffle",
    "concat_channels",
    "slice_channels",
    "sum_all",
    "mean_all",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default element type (e.g. ``np.float64`` for gradchecks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Rank-4 (N, C, H, W) array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank-4 (N, C, H, W); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1x1x1 tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        The tape is released afterwards unless ``retain_graph`` is set.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar (1x1x1x1) loss, got {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss has no gradient-tracking lineage")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


class Parameter(Tensor):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name", "role")

    def __init__(self, data, name: str = "", role: str = "weight"):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.role = role

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, role={self.role})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if track:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=_DEFAULT_DTYPE)
    return Tensor(arr.reshape((1,) * (4 - arr.ndim) + arr.shape) if arr.ndim < 4 else arr)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with size-1 broadcasting (used for channel gating)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Strict elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return mul(a, b)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def tanh_(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k), zero padding.

    ``b`` is an optional bias of shape (1,O,1,1).
    """
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels but weight {w.shape} expects {ci}")
    if b is not None and b.shape != (1, o, 1, 1):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match weight {w.shape}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # im2col in (C, kh, kw, N, Ho, Wo) order: each tap copies whole rows
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    if b is not None:
        out += b.data.reshape(o, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx[:, :, pad:pad + h, pad:pad + wd] if pad else gx)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# ---------------------------------------------------------------- reductions & layout

def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                   lambda g: (np.broadcast_to(g * inv, x.shape).astype(g.dtype),))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W); out[n,c,r*h+q//r, r*w+q%r] = in[n,c*r*r+q,h,w]."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return _result(np.ascontiguousarray(y), (x,), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: spatial dims {(h, w)} not divisible by {r}")
    ho, wo = h // r, w // r
    y = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def backward(g):
        return (g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return _result(np.ascontiguousarray(y), (x,), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(f"concat_channels: {t.shape} does not match {xs[0].shape} in N/H/W")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(np.concatenate([t.data for t in xs], axis=1), xs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _result(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)
