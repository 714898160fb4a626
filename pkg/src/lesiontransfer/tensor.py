"""Dense tensors with reverse-mode automatic differentiation.

Every backward rule is expressed with the same differentiable operations used
in the forward pass, so ``grad(..., create_graph=True)`` yields tensors that can
be differentiated again (required by the critic's gradient penalty).

Elementwise broadcasting is restricted to three rank-promotion rules:

* identical shapes;
* one operand is a scalar (0-d tensor or Python number);
* one operand's shape equals a trailing suffix of the other's shape
  (e.g. a ``(C,)`` bias added to an ``(N, H, W, C)`` map).

Anything else must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


_GRAD_ENABLED = True
_CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_check(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on forward outputs; returns the previous value."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, create_graph: bool = False) -> None:
        backward(self, create_graph=create_graph)


def _bad_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    if b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (use broadcast_to)")


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a gradient back down to a rank-promoted operand's shape."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return sum_(g)
    lead = g.ndim - len(shape)
    return sum_(g, axis=tuple(range(lead)))


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g, out: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g, out: (_reduce_to(g, sa), _reduce_to(neg(g), sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g, out: (_reduce_to(g * b, sa), _reduce_to(g * a, sb)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_binary(a, b, "div")
    sa, sb = a.shape, b.shape

    def bw(g, out):
        ga = g / b
        return _reduce_to(ga, sa), _reduce_to(neg(ga * out), sb)

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g, out: (neg(g),), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, c)


def exp(x: Tensor) -> Tensor:
    return _make(np.exp(x.data), (x,), lambda g, out: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g, out: (g / x,), "log")


def sqrt(x: Tensor) -> Tensor:
    return _make(np.sqrt(x.data), (x,), lambda g, out: (g * 0.5 / out,), "sqrt")


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at 0
    sign = Tensor(np.sign(x.data))
    return _make(np.abs(x.data), (x,), lambda g, out: (g * sign,), "abs")


def sigmoid(x: Tensor) -> Tensor:
    return _make(expit(x.data), (x,), lambda g, out: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    mask = Tensor(np.where(pos, 1.0, slope).astype(x.dtype))
    return _make(np.where(pos, x.data, slope * x.data), (x,),
                 lambda g, out: (g * mask,), "leaky_relu")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = Tensor((x.data > lo).astype(x.dtype))
    return _make(np.maximum(x.data, lo), (x,), lambda g, out: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    xs = x.shape

    def bw(g, out):
        return (broadcast_to(reshape(g, kept), xs),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return sum_(x, axes, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    xs = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g, out: (reshape(g, xs),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g, out: (transpose(g, inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    xs = x.shape
    lead = len(shape) - len(xs)
    if lead < 0:
        raise ShapeError(f"cannot broadcast {xs} to {shape}")
    expanded = tuple(i for i, n in enumerate(xs) if n == 1 and shape[lead + i] != 1)

    def bw(g, out):
        r = g
        if lead:
            r = sum_(r, axis=tuple(range(lead)))
        if expanded:
            r = sum_(r, axis=expanded, keepdims=True)
        return (r,)

    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {xs} to {shape}") from exc
    return _make(np.ascontiguousarray(data), (x,), bw, "broadcast_to")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, out):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * ndim
            key[axis] = slice(int(lo), int(hi))
            grads.append(index(g, tuple(key)))
        return tuple(grads)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(data, tuple(tensors), bw, "concatenate")


def index(x: Tensor, key) -> Tensor:
    xs = x.shape
    return _make(np.array(x.data[key]), (x,), lambda g, out: (_scatter(g, key, xs),), "index")


def _scatter(g: Tensor, key, shape) -> Tensor:
    buf = np.zeros(shape, dtype=g.dtype)
    np.add.at(buf, key, g.data)
    return _make(buf, (g,), lambda h, out: (index(h, key),), "scatter")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    src = x.dtype
    if dtype == src:
        return x
    return _make(x.data.astype(dtype), (x,), lambda g, out: (astype(g, src),), "astype")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree,
    or ``b`` may be a plain 2-D matrix shared across the batch."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    shared_b = b.ndim == 2 and a.ndim > 2

    def bw(g, out):
        ga = matmul(g, swap_last(b))
        if shared_b:
            gb = matmul(transpose(reshape(a, (-1, a.shape[-1]))), reshape(g, (-1, g.shape[-1])))
        else:
            gb = matmul(swap_last(a), g)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g, out):
        return (out * (g - broadcast_to(sum_(g * out, axis=axis, keepdims=True), g.shape)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def bw(g, out):
        return (g - exp(out) * broadcast_to(sum_(g, axis=axis, keepdims=True), g.shape),)

    return _make(z - lse, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# 2-D convolution (NHWC, kernels kh x kw x Cin x Cout)
# ---------------------------------------------------------------------------

class _ConvGeom:
    __slots__ = ("kh", "kw", "stride", "dilation", "pads", "out_hw", "padded_hw")

    def __init__(self, H, W, kh, kw, stride, dilation, padding):
        if stride < 1 or dilation < 1:
            raise ValueError(f"stride and dilation must be >= 1 (got {stride}, {dilation})")
        ekh = dilation * (kh - 1) + 1
        ekw = dilation * (kw - 1) + 1
        if padding == "valid":
            pads = (0, 0, 0, 0)
        elif padding == "same":
            oh, ow = -(-H // stride), -(-W // stride)
            ph = max((oh - 1) * stride + ekh - H, 0)
            pw = max((ow - 1) * stride + ekw - W, 0)
            pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
        else:
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        Hp, Wp = H + pads[0] + pads[1], W + pads[2] + pads[3]
        if ekh > Hp or ekw > Wp:
            raise ShapeError(f"dilated kernel {ekh}x{ekw} exceeds padded input {Hp}x{Wp}")
        self.kh, self.kw, self.stride, self.dilation = kh, kw, stride, dilation
        self.pads = pads
        self.padded_hw = (Hp, Wp)
        self.out_hw = ((Hp - ekh) // stride + 1, (Wp - ekw) // stride + 1)


def _windows(xp: np.ndarray, geom: _ConvGeom) -> np.ndarray:
    n, _, _, c = xp.shape
    ho, wo = geom.out_hw
    s0, s1, s2, s3 = xp.strides
    st, d = geom.stride, geom.dilation
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, geom.kh, geom.kw, c),
        strides=(s0, s1 * st, s2 * st, s1 * d, s2 * d, s3), writeable=False)


def _pad(x: np.ndarray, geom: _ConvGeom) -> np.ndarray:
    t, b, l, r = geom.pads
    if not any(geom.pads):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def _conv_fwd(x: np.ndarray, k: np.ndarray, geom: _ConvGeom) -> np.ndarray:
    n = x.shape[0]
    ho, wo = geom.out_hw
    cols = _windows(_pad(x, geom), geom).reshape(n * ho * wo, -1)
    return (cols @ k.reshape(-1, k.shape[-1])).reshape(n, ho, wo, k.shape[-1])


def _conv_input_adjoint(g: np.ndarray, k: np.ndarray, xshape, geom: _ConvGeom) -> np.ndarray:
    n, H, W, cin = xshape
    ho, wo = geom.out_hw
    cols = (g.reshape(-1, k.shape[-1]) @ k.reshape(-1, k.shape[-1]).T)
    cols = cols.reshape(n, ho, wo, geom.kh, geom.kw, cin)
    Hp, Wp = geom.padded_hw
    xp = np.zeros((n, Hp, Wp, cin), dtype=g.dtype)
    st, d = geom.stride, geom.dilation
    for i in range(geom.kh):
        for j in range(geom.kw):
            xp[:, i * d: i * d + st * (ho - 1) + 1: st,
               j * d: j * d + st * (wo - 1) + 1: st, :] += cols[:, :, :, i, j, :]
    t, _, l, _ = geom.pads
    return np.ascontiguousarray(xp[:, t:t + H, l:l + W, :])


def _conv_kernel_adjoint(x: np.ndarray, g: np.ndarray, kshape, geom: _ConvGeom) -> np.ndarray:
    cols = _windows(_pad(x, geom), geom).reshape(-1, kshape[0] * kshape[1] * kshape[2])
    return (cols.T @ g.reshape(-1, kshape[3])).reshape(kshape)


def _conv(x: Tensor, k: Tensor, geom: _ConvGeom) -> Tensor:
    def bw(g, out):
        return _conv_dx(g, k, x.shape, geom), _conv_dk(x, g, k.shape, geom)
    return _make(_conv_fwd(x.data, k.data, geom), (x, k), bw, "conv2d")


def _conv_dx(g: Tensor, k: Tensor, xshape, geom: _ConvGeom) -> Tensor:
    def bw(h, out):
        return _conv(h, k, geom), _conv_dk(h, g, k.shape, geom)
    return _make(_conv_input_adjoint(g.data, k.data, xshape, geom), (g, k), bw, "conv2d_dx")


def _conv_dk(x: Tensor, g: Tensor, kshape, geom: _ConvGeom) -> Tensor:
    def bw(h, out):
        return _conv_dx(g, h, x.shape, geom), _conv(x, h, geom)
    return _make(_conv_kernel_adjoint(x.data, g.data, kshape, geom), (x, g), bw, "conv2d_dk")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """Dilated cross-correlation of an ``H x W x Cin`` (or ``N x H x W x Cin``)
    input with a ``kh x kw x Cin x Cout`` kernel."""
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be kh x kw x Cin x Cout, got {kernel.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {kernel.shape[2]}")
    geom = _ConvGeom(x.shape[1], x.shape[2], kernel.shape[0], kernel.shape[1],
                     int(stride), int(dilation), padding)
    out = _conv(x, kernel, geom)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# spatial resampling
# ---------------------------------------------------------------------------

def interpolation_matrix(n_out: int, n_in: int, mode: str = "bilinear") -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` resampling matrix (half-pixel centres)."""
    a = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        if mode == "nearest":
            a[i, min(int(math.floor((i + 0.5) * ratio)), n_in - 1)] = 1.0
            continue
        if mode != "bilinear":
            raise ValueError(f"unknown resize mode {mode!r}")
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        a[i, i0] += 1.0 - w
        a[i, i1] += w
    return a


def _resample(x: Tensor, ah: np.ndarray, aw: np.ndarray) -> Tensor:
    data = np.einsum("ai,nijc->najc", ah, x.data, optimize=True)
    data = np.einsum("bj,najc->nabc", aw, data, optimize=True)
    return _make(data, (x,), lambda g, out: (_resample(g, ah.T, aw.T),), "resize")


def resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resize the spatial axes of an ``H x W x C`` / ``N x H x W x C`` tensor.

    Bilinear weights use half-pixel centres with edge clamping; ``mode="nearest"``
    picks the source pixel whose cell contains the output centre.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    h, w = x.shape[1], x.shape[2]
    if (h, w) == tuple(size):
        out = x
    else:
        ah = interpolation_matrix(size[0], h, mode).astype(x.dtype)
        aw = interpolation_matrix(size[1], w, mode).astype(x.dtype)
        out = _resample(x, ah, aw)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def resize_labels(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of integer masks shaped ``(..., H, W)``."""
    h, w = labels.shape[-2:]
    rows = np.minimum(np.floor((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from ``root`` with every parent before its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


_VISIT_LOG: list[int] | None = None


@contextlib.contextmanager
def record_visits():
    """Collect ids of nodes whose backward rule runs (graph-replay test hook)."""
    global _VISIT_LOG
    prev = _VISIT_LOG
    _VISIT_LOG = []
    try:
        yield _VISIT_LOG
    finally:
        _VISIT_LOG = prev


def _accumulate(grads: dict, key: int, g: Tensor) -> None:
    prev = grads.get(key)
    grads[key] = g if prev is None else add(prev, g)


def _propagate(root: Tensor, seed: Tensor, create_graph: bool, stop: set[int] | None = None):
    order = topological_order(root)
    grads: dict[int, Tensor] = {id(root): seed}
    results: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if stop is not None and id(node) in stop:
                results[id(node)] = g
                continue
            if node.is_leaf:
                results[id(node)] = g
                continue
            if _VISIT_LOG is not None:
                _VISIT_LOG.append(id(node))
            for parent, pg in zip(node._parents, node._backward(g, node)):
                if pg is not None and parent.requires_grad:
                    if pg.shape != parent.shape:
                        raise ShapeError(f"{node.op} backward produced {pg.shape} for {parent.shape}")
                    _accumulate(grads, id(parent), pg)
    return results


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    leaves = {id(n): n for n in topological_order(loss) if n.is_leaf}
    for key, g in _propagate(loss, seed, create_graph).items():
        leaf = leaves[key]
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs``; ``.grad`` is not touched."""
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    seed = Tensor(np.ones(output.shape, dtype=output.dtype))
    wanted = {id(t) for t in inputs}
    found = _propagate(output, seed, create_graph, stop=wanted) if output.requires_grad else {}
    return [found.get(id(t), Tensor(np.zeros(t.shape, dtype=t.dtype))) for t in inputs]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6,
                      f_ref: Callable[[Tensor], Tensor] | None = None, norm: str = "elementwise") -> float:
    """Relative error between the analytic gradient of ``f`` at ``x`` and
    central differences.

    ``norm="elementwise"`` reports the worst per-entry relative error;
    ``norm="global"`` reports ``|a - n|_2 / max(|a|_2, |n|_2)``, which stays
    meaningful when some entries of the gradient are (nearly) zero.

    When ``f_ref`` is given, the central differences are taken on ``f_ref`` at
    ``x`` cast to float64, which lets a float32 graph be checked against a
    float64 oracle.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if norm not in ("elementwise", "global"):
        raise ValueError(f"unknown norm {norm!r}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x)
    xt = Tensor(x0.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    analytic = np.zeros_like(x0, dtype=np.float64) if xt.grad is None else xt.grad.astype(np.float64)

    ref = f if f_ref is None else f_ref
    base = x0.astype(np.float64) if f_ref is not None else x0
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    # grad mode stays on: f may itself call grad() (gradient penalties)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(ref(Tensor(base.copy())).data.reshape(-1)[0])
        flat[i] = orig - eps
        lo = float(ref(Tensor(base.copy())).data.reshape(-1)[0])
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    if norm == "global":
        scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
        return float(np.linalg.norm(analytic - numeric)) / scale
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# .ten serialisation: "shape: d0 d1 ...\n" + little-endian float32 payload
# ---------------------------------------------------------------------------

def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    header = ("shape: " + " ".join(str(d) for d in arr.shape)).rstrip() + "\n"
    return header.encode("ascii") + arr.astype("<f4").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns ``(array, next_offset)``."""
    nl = buf.index(b"\n", offset)
    header = buf[offset:nl].decode("ascii")
    if not header.startswith("shape:"):
        raise ValueError(f"bad .ten header {header!r}")
    shape = tuple(int(d) for d in header[len("shape:"):].split())
    count = int(np.prod(shape)) if shape else 1
    start = nl + 1
    end = start + 4 * count
    if end > len(buf):
        raise ValueError("truncated .ten payload")
    arr = np.frombuffer(buf[start:end], dtype="<f4").reshape(shape).astype(np.float64)
    return arr, end


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
