"""Reverse-mode automatic differentiation over numpy arrays.

A define-by-run graph: every op returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to parent gradients.
:func:`backward` walks the graph once in reverse topological order and frees
it afterwards.

Elementwise binary ops broadcast only over *leading* dimensions: the smaller
operand's shape must equal the trailing dims of the larger one (or be a
scalar). Batched matmul broadcasts its leading batch dims numpy-style.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its documented contract."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _finite_guard(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return data


# -- graph traversal ------------------------------------------------------

def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# -- broadcasting helpers -------------------------------------------------

def _check_leading(a_shape, b_shape, op):
    if a_shape == b_shape or len(a_shape) == 0 or len(b_shape) == 0:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} differ beyond leading dims")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_leading(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_leading(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_leading(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_leading(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = _finite_guard(ad / bd, "div")

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


# -- reductions -----------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / n)


def mse(x, y) -> Tensor:
    """Mean squared error; the squared-L2 noise objective averaged per element."""
    x, y = _coerce(x, y)
    if x.shape != y.shape:
        raise DimensionError(f"mse: shapes {x.shape} and {y.shape} differ")
    diff = x.data - y.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=x.dtype)

    def bw(g):
        gx = (2.0 / n) * g * diff
        return gx.astype(x.dtype, copy=False), (-gx).astype(y.dtype, copy=False)

    return _make(out, (x, y), bw)


# -- shape ops ------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(g, axis, 0)
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, idx, gm)
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw)


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(x.ndim) if d != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs: Iterable, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading batch dims."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


# -- convolutional ops (channels-last) --------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, oh, ow, kh, kw, c), strides=(s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False
    )
    return view.reshape(n * oh * ow, kh * kw * c)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution on (N, H, W, Cin) with weight (kh, kw, Cin, Cout).

    Output is (N, H', W', Cout), H' = (H + 2*padding - kh) // stride + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    kh, kw, cin, cout = weight.shape
    n, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, oh, ow, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and kh == kw and 2 * padding == kh - 1:
            # 'same' stride-1 conv: input grad is the full correlation with the flipped kernel
            q = kh - 1 - padding
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (0, 0)))
            wflip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (_im2col(np.ascontiguousarray(gp), kh, kw, 1) @ wflip).reshape(n, h, w, cin)
        elif x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw)


def conv1d_frames(x, weight, bias=None) -> Tensor:
    """Temporal convolution along axis 0 of (F, ..., Cin) with weight (k, Cin, Cout).

    Zero padding keeps the frame count; k must be odd.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    k, cin, cout = weight.shape
    if k % 2 != 1 or x.shape[-1] != cin:
        raise DimensionError(f"conv1d_frames: input {x.shape} vs weight {weight.shape}")
    f = x.shape[0]
    pad = k // 2
    xd, wd = x.data, weight.data
    out = np.zeros(x.shape[:-1] + (cout,), dtype=x.dtype)
    for j in range(k):
        off = j - pad
        lo, hi = max(0, -off), min(f, f - off)
        if lo < hi:
            out[lo:hi] += xd[lo + off : hi + off] @ wd[j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for j in range(k):
            off = j - pad
            lo, hi = max(0, -off), min(f, f - off)
            if lo >= hi:
                continue
            gs = g[lo:hi].reshape(-1, cout)
            xs = xd[lo + off : hi + off].reshape(-1, cin)
            if gw is not None:
                gw[j] += xs.T @ gs
            if gx is not None:
                gx[lo + off : hi + off] += g[lo:hi] @ wd[j].T
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, cout).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, bw)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group norm on (N, ..., C): statistics over all non-batch positions per group."""
    x = as_tensor(x)
    n, c = x.shape[0], x.shape[-1]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible by {groups} groups")
    shape = x.shape
    xg = x.data.reshape(n, -1, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(shape)
    out = xhat
    parents = [x]
    if weight is not None:
        weight, bias = as_tensor(weight), as_tensor(bias)
        out = xhat * weight.data + bias.data
        parents += [weight, bias]
    m = xg.shape[1] * xg.shape[3]

    def bw(g):
        gw = gb = None
        if weight is not None:
            red = tuple(range(g.ndim - 1))
            gw = (g * xhat).sum(axis=red) if weight.requires_grad else None
            gb = g.sum(axis=red) if bias.requires_grad else None
            g = g * weight.data
        gh = g.reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        gx = inv * (gh - gh.sum(axis=(1, 3), keepdims=True) / m - xh * (gh * xh).sum(axis=(1, 3), keepdims=True) / m)
        gx = gx.reshape(shape).astype(x.dtype, copy=False)
        return (gx,) if weight is None else (gx, gw, gb)

    return _make(out.astype(x.dtype, copy=False), parents, bw)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of (N, H, W, C)."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))
