"""Dense tensors with a define-by-run reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor` carrying a
:class:`Node` that remembers its inputs and a closure computing input
gradients from the output gradient. :func:`backward` walks the recorded
graph once in reverse topological order, accumulating into ``.grad`` on
every tensor that requires gradients. The graph is rebuilt on every
forward pass; nothing is retained between steps unless the caller holds
references.

Precision is a process-wide switch (:func:`set_precision`): new tensors
default to float32 or float64. Gradient checking runs the same code in
float64 by constructing float64 inputs explicitly.

A small whitelist of ops also has *symbolic* adjoints, which build the
input gradient as a new differentiable graph (see :func:`input_gradient`).
That is enough for gradient penalties on convolutional discriminators;
anything outside the whitelist raises :class:`CapabilityError`.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import (
    CapabilityError,
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
)

_DTYPE = np.float32
_GRAD_ENABLED = True

_PRECISION_NAMES = {"f32": np.float32, "f64": np.float64}


def set_precision(kind: str) -> None:
    """Select the default dtype ("f32" or "f64") for newly created tensors."""
    global _DTYPE
    if kind not in _PRECISION_NAMES:
        raise ConfigurationError(f"precision must be one of {sorted(_PRECISION_NAMES)}, got {kind!r}")
    _DTYPE = _PRECISION_NAMES[kind]


def precision() -> str:
    return "f32" if _DTYPE is np.float32 else "f64"


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy forward)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """One recorded operation: inputs plus a gradient closure.

    ``grad_fn(g)`` receives the output gradient as a numpy array and must
    return a tuple of arrays (or None) aligned with ``inputs``.
    """

    __slots__ = ("op", "inputs", "grad_fn", "ctx")

    def __init__(self, op: str, inputs: tuple, grad_fn, ctx: dict | None = None):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.ctx = ctx or {}


class Tensor:
    """A numpy array plus optional autograd bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not Tensors")
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> "Tape":
        return backward(self)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _make(op: str, out_data: np.ndarray, inputs: tuple, grad_fn, ctx: dict | None = None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, grad_fn, ctx)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def assert_finite(t: Tensor, where: str) -> None:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {where}")


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make("sub", out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad * bd

    def grad_fn(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _make("mul", out, (a, b), grad_fn)


def neg(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return _make("neg", -x.data, (x,), grad_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def grad_fn(g):
        return (g * s,)

    return _make("scale", out, (x,), grad_fn, ctx={"s": s})


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root. The gradient is undefined at 0; callers
    must keep inputs positive (see the stability floor in the perceptual
    loss)."""
    out = np.sqrt(x.data)

    def grad_fn(g):
        return (g * (0.5 / out),)

    return _make("sqrt", out, (x,), grad_fn)


def absval(x: Tensor) -> Tensor:
    """Elementwise absolute value with subgradient 0 at exact ties."""
    xd = x.data
    out = np.abs(xd)

    def grad_fn(g):
        return (g * np.sign(xd),)

    return _make("abs", out, (x,), grad_fn)


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False)

    def grad_fn(g):
        return (g * mask,)

    return _make("relu", out, (x,), grad_fn, ctx={"mask": mask})


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, alpha * x.data)

    def grad_fn(g):
        return (g * np.where(mask, 1.0, alpha).astype(g.dtype, copy=False),)

    return _make("leaky_relu", out, (x,), grad_fn, ctx={"mask": mask, "alpha": alpha})


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * d_inner
        return (g * d,)

    return _make("gelu", out, (x,), grad_fn)


_UNARY = {}


def unary(x: Tensor, kind: str, value: float | None = None) -> Tensor:
    """Dispatch a named elementwise op; `value` feeds scale/leaky_relu."""
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ConfigurationError(f"unknown unary kind {kind!r}; known: {sorted(_UNARY)}") from None
    if kind in ("scale", "leaky_relu"):
        return fn(x, value if value is not None else (0.2 if kind == "leaky_relu" else 1.0))
    return fn(x)


_UNARY.update({
    "sigmoid": sigmoid,
    "gelu": gelu,
    "relu": relu,
    "scale": scale,
    "neg": neg,
    "leaky_relu": leaky_relu,
    "sqrt": sqrt,
    "abs": absval,
})


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return (ga, gb)

    return _make("matmul", out, (a, b), grad_fn)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C, Hp, Wp = x.shape
    ho = (Hp - kh) // stride + 1
    wo = (Wp - kw) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(v.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, ho * wo)
    return cols, ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    cout = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    out = np.matmul(w.reshape(cout, -1)[None], cols).reshape(x.shape[0], cout, ho, wo)
    return out, cols, ho, wo


def _pad_or_crop(x: np.ndarray, p: int):
    """Pad (p >= 0) or crop (p < 0) the two spatial axes symmetrically."""
    if p > 0:
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if p < 0:
        return x[:, :, -p:p, -p:p]
    return x


def _conv_transpose_data(y: np.ndarray, w: np.ndarray, stride: int, padding: int,
                         out_hw: tuple) -> np.ndarray:
    """Adjoint of the convolution data path, as a stride-1 convolution.

    The output gradient is dilated by the stride, padded by k-1-p, and
    convolved with the spatially flipped, channel-swapped kernel. This is
    exact and keeps everything on the GEMM path.
    """
    B, cout, ho, wo = y.shape
    _, cin, kh, kw = w.shape
    hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    yd = np.zeros((B, cout, hd, wd), dtype=y.dtype)
    yd[:, :, ::stride, ::stride] = y
    yd = _pad_or_crop(yd, kh - 1 - padding)
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out, _, oh, ow = _conv_forward(yd, wf, 1, 0)
    H, W = out_hw
    if oh < H or ow < W:
        raise DimensionError(f"transposed conv produced {(oh, ow)}, needs at least {(H, W)}")
    return np.ascontiguousarray(out[:, :, :H, :W])


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv expects 4d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"bad conv geometry: stride={stride} padding={padding}")
    if b is not None and b.ndim != 1:
        raise DimensionError(f"conv bias must be 1d, got {b.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2d cross-correlation, NCHW layout, kernel (Cout, Cin, kh, kw).

    The output extent must divide exactly: (H + 2p - kh) % stride == 0,
    otherwise the call is a configuration error rather than silent
    truncation.
    """
    _check_conv_args(x, w, b, stride, padding)
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise DimensionError(f"conv channels differ: input {x.shape}, kernel {w.shape}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"kernel {w.shape[2:]} exceeds padded input {(H, W)} p={padding}")
    if (H + 2 * padding - kh) % stride or (W + 2 * padding - kw) % stride:
        raise ConfigurationError(
            f"conv geometry not exact: input {(H, W)} kernel {(kh, kw)} "
            f"stride {stride} padding {padding}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv bias shape {b.shape} != ({cout},)")

    xd, wd = x.data, w.data
    out, cols, ho, wo = _conv_forward(xd, wd, stride, padding)
    del cols  # recomputed lazily in backward; keeping it would pin B*C*k^2*HW floats per conv
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _conv_transpose_data(g, wd, stride, padding, (H, W))
        if w.requires_grad:
            cols2, _, _ = _im2col(xd, kh, kw, stride, padding)
            g2 = g.reshape(B, cout, ho * wo)
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    ctx = {"stride": stride, "padding": padding, "in_hw": (H, W)}
    return _make("conv2d", out, inputs, grad_fn, ctx)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, out_hw: tuple | None = None) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    Kernel layout matches conv2d, (Cout, Cin, kh, kw), applied here from
    Cout channels back to Cin. Output extent is (H-1)*stride + kh - 2p
    unless out_hw overrides it (needed to invert inexact geometries).
    """
    _check_conv_args(x, w, b, stride, padding)
    B, c, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if c != cout:
        raise DimensionError(f"transposed conv channels differ: input {x.shape}, kernel {w.shape}")
    if out_hw is None:
        out_hw = ((H - 1) * stride + kh - 2 * padding, (W - 1) * stride + kw - 2 * padding)
    if b is not None and b.shape != (cin,):
        raise DimensionError(f"transposed conv bias shape {b.shape} != ({cin},)")

    xd, wd = x.data, w.data
    out = _conv_transpose_data(xd, wd, stride, padding, out_hw)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx, _, _, _ = _conv_forward(g, wd, stride, padding)
        if w.requires_grad:
            cols_g, ho, wo = _im2col(g, kh, kw, stride, padding)
            x2 = xd.reshape(B, cout, ho * wo)
            gw = np.matmul(x2, cols_g.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    ctx = {"stride": stride, "padding": padding, "out_hw": out_hw}
    return _make("conv2d_transpose", out, inputs, grad_fn, ctx)


# ----------------------------------------------------------------------
# normalization and attention support
# ----------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (x,), grad_fn, ctx={"axis": axis})


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature affine."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {D}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = gg = gb = None
        dxhat = g * gamma.data
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        return (gx, gg, gb)

    return _make("layer_norm", out, (x, gamma, beta), grad_fn, ctx={"eps": eps})


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _make("sum", out, (x,), grad_fn, ctx={"axes": axes, "keepdims": keepdims})


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gk / n, x.shape).astype(x.data.dtype, copy=True),)

    return _make("mean", out, (x,), grad_fn, ctx={"axes": axes, "keepdims": keepdims, "n": n})


# ----------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), grad_fn, ctx={"shape": shape})


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for shape {x.shape}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", out, (x,), grad_fn, ctx={"axes": axes})


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis and other[i] != base[i] for i in range(len(base))):
            raise DimensionError(
                f"concat shapes disagree off axis {axis}: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _make("concat", out, tensors, grad_fn, ctx={"axis": axis, "sizes": sizes})


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    out = np.roll(x.data, shifts, axis=axes)

    def grad_fn(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _make("roll", out, (x,), grad_fn, ctx={"shifts": shifts, "axes": axes})


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2d table by a 1d integer index (with repeats)."""
    if table.ndim != 2 or index.ndim != 1:
        raise DimensionError(f"gather_rows wants 2d table and 1d index, got {table.shape}, {index.shape}")
    if index.min() < 0 or index.max() >= table.shape[0]:
        raise DimensionError(f"gather index out of range [0, {table.shape[0]})")
    idx = index.astype(np.int64)
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("gather_rows", out, (table,), grad_fn, ctx={"index": idx})


# ----------------------------------------------------------------------
# composites (gradients flow through the primitives)
# ----------------------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r^2, H, W) -> (B, C, H*r, W*r); a pure data permutation."""
    B, C, H, W = x.shape
    if C % (r * r):
        raise ConfigurationError(f"pixel_shuffle needs channels divisible by r^2={r*r}, got {C}")
    c = C // (r * r)
    t = reshape(x, (B, c, r, r, H, W))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (B, c, H * r, W * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """(B, C, H*r, W*r) -> (B, C*r^2, H, W); inverse of pixel_shuffle."""
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ConfigurationError(f"pixel_unshuffle needs spatial dims divisible by {r}, got {(Hr, Wr)}")
    H, W = Hr // r, Wr // r
    t = reshape(x, (B, C, H, r, W, r))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (B, C * r * r, H, W))


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C), mean over the spatial axes."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4d input, got {x.shape}")
    return mean(x, axis=(2, 3))


def pad2d(x: Tensor, pads: tuple) -> Tensor:
    """Zero-pad the spatial axes of (B, C, H, W) by (top, bottom, left, right).

    Built from concat with constant zeros, so odd-kernel stride-2 convs can
    meet the exact-geometry contract of conv2d via asymmetric padding.
    """
    if x.ndim != 4:
        raise DimensionError(f"pad2d expects 4d input, got {x.shape}")
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ConfigurationError(f"pad2d amounts must be non-negative, got {pads}")
    B, C, H, W = x.shape
    dt = x.data.dtype
    out = x
    if top or bottom:
        parts = []
        if top:
            parts.append(Tensor(np.zeros((B, C, top, W)), dtype=dt))
        parts.append(out)
        if bottom:
            parts.append(Tensor(np.zeros((B, C, bottom, W)), dtype=dt))
        out = concat(parts, axis=2)
    if left or right:
        Hp = H + top + bottom
        parts = []
        if left:
            parts.append(Tensor(np.zeros((B, C, Hp, left)), dtype=dt))
        parts.append(out)
        if right:
            parts.append(Tensor(np.zeros((B, C, Hp, right)), dtype=dt))
        out = concat(parts, axis=3)
    return out


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2, via unshuffle and a channel mean.

    Composed entirely of ops with symbolic adjoints so gradient penalties
    can differentiate through it.
    """
    B, C, H, W = x.shape
    t = pixel_unshuffle(x, 2)
    t = reshape(t, (B, C, 4, H // 2, W // 2))
    return mean(t, axis=2)


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------

class Tape:
    """Record of one backward walk, for inspection by tests and audits."""

    def __init__(self, order):
        self.order = order
        self.visited_ops: list[str] = []
        self.visited_ids: list[int] = []


def _toposort(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into .grad for every requiring tensor.

    Visits each recorded node exactly once in reverse topological order;
    fan-out is handled by summing into the producer's .grad before its
    node is expanded. Accumulates on top of existing .grad values, so
    training loops must clear leaf grads between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar, got shape {loss.shape}")
    if loss.node is None and not loss.requires_grad:
        raise ContractError("backward called on a tensor with no recorded graph")
    order = _toposort(loss)
    tape = Tape(order)
    seed = np.ones(loss.shape, dtype=loss.data.dtype)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for t in reversed(order):
        node = t.node
        if node is None or t.grad is None:
            continue
        tape.visited_ops.append(node.op)
        tape.visited_ids.append(id(t))
        grads = node.grad_fn(t.grad)
        if len(grads) != len(node.inputs):
            raise ContractError(f"op {node.op!r} returned {len(grads)} grads for {len(node.inputs)} inputs")
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(f"op {node.op!r} grad shape {gi.shape} != input shape {inp.shape}")
            inp.grad = gi if inp.grad is None else inp.grad + gi
    return tape


# ----------------------------------------------------------------------
# symbolic input gradients (second order through a whitelist)
# ----------------------------------------------------------------------

def _sym_unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] > 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


def _sym_expand(g: Tensor, node_ctx: dict, shape: tuple) -> Tensor:
    axes, keepdims = node_ctx["axes"], node_ctx["keepdims"]
    if not keepdims and axes:
        kshape = list(shape)
        for a in axes:
            kshape[a] = 1
        g = reshape(g, kshape)
    ones = Tensor(np.ones(shape, dtype=g.data.dtype))
    return mul(g, ones)


def _sym_add(node, g):
    a, b = node.inputs
    return (_sym_unbroadcast(g, a.shape), _sym_unbroadcast(g, b.shape))


def _sym_sub(node, g):
    a, b = node.inputs
    return (_sym_unbroadcast(g, a.shape), _sym_unbroadcast(neg(g), b.shape))


def _sym_mul(node, g):
    a, b = node.inputs
    return (_sym_unbroadcast(mul(g, b), a.shape), _sym_unbroadcast(mul(g, a), b.shape))


def _sym_matmul(node, g):
    a, b = node.inputs
    sw = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    swb = tuple(range(b.ndim - 2)) + (b.ndim - 1, b.ndim - 2)
    ga = _sym_unbroadcast(matmul(g, transpose(b, swb)), a.shape)
    gb = _sym_unbroadcast(matmul(transpose(a, sw), g), b.shape)
    return (ga, gb)


def _sym_conv2d(node, g):
    x = node.inputs[0]
    w = node.inputs[1]
    ctx = node.ctx
    gx = conv2d_transpose(g, w, stride=ctx["stride"], padding=ctx["padding"],
                          out_hw=ctx["in_hw"])
    rest = (None,) * (len(node.inputs) - 1)
    return (gx,) + rest


def _sym_relu(node, g):
    mask = Tensor(node.ctx["mask"].astype(g.data.dtype))
    return (mul(g, mask),)


def _sym_leaky(node, g):
    ctx = node.ctx
    m = np.where(ctx["mask"], 1.0, ctx["alpha"]).astype(g.data.dtype)
    return (mul(g, Tensor(m)),)


def _sym_scale(node, g):
    return (scale(g, node.ctx["s"]),)


def _sym_neg(node, g):
    return (neg(g),)


def _sym_reshape(node, g):
    return (reshape(g, node.inputs[0].shape),)


def _sym_transpose(node, g):
    inv = tuple(np.argsort(node.ctx["axes"]))
    return (transpose(g, inv),)


def _sym_sum(node, g):
    return (_sym_expand(g, node.ctx, node.inputs[0].shape),)


def _sym_mean(node, g):
    return (scale(_sym_expand(g, node.ctx, node.inputs[0].shape), 1.0 / node.ctx["n"]),)


def _sym_roll(node, g):
    shifts = tuple(-s for s in node.ctx["shifts"])
    return (roll(g, shifts, node.ctx["axes"]),)


_SYMBOLIC = {
    "add": _sym_add,
    "sub": _sym_sub,
    "mul": _sym_mul,
    "matmul": _sym_matmul,
    "conv2d": _sym_conv2d,
    "relu": _sym_relu,
    "leaky_relu": _sym_leaky,
    "scale": _sym_scale,
    "neg": _sym_neg,
    "reshape": _sym_reshape,
    "transpose": _sym_transpose,
    "sum": _sym_sum,
    "mean": _sym_mean,
    "roll": _sym_roll,
}


def input_gradient(output: Tensor, wrt: Tensor) -> Tensor:
    """Build d(output)/d(wrt) as a differentiable graph.

    Only ops with symbolic adjoints are supported on the path from wrt to
    output (enough for convolutional nets with relu family activations and
    linear heads). An op outside the whitelist raises CapabilityError: the
    numeric tape cannot differentiate through its own backward pass.
    """
    if output.size != 1:
        raise ContractError(f"input_gradient needs a scalar output, got {output.shape}")
    order = _toposort(output)
    dep = {id(wrt)}
    for t in order:
        if t.node is not None and any(id(i) in dep for i in t.node.inputs):
            dep.add(id(t))
    if id(output) not in dep:
        raise ContractError("output does not depend on the requested tensor")
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape, dtype=output.data.dtype))}
    for t in reversed(order):
        if id(t) not in dep or t.node is None or id(t) not in grads:
            continue
        rule = _SYMBOLIC.get(t.node.op)
        if rule is None:
            raise CapabilityError(
                f"op {t.node.op!r} has no symbolic adjoint; input_gradient supports only "
                f"{sorted(_SYMBOLIC)}")
        parts = rule(t.node, grads[id(t)])
        for inp, gi in zip(t.node.inputs, parts):
            if gi is None or id(inp) not in dep:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else add(grads[key], gi)
    return grads[id(wrt)]
