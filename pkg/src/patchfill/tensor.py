"""Dense float tensors with tape-based reverse-mode autodiff.

All model math runs through the ops defined here. Forward kernels are
vectorized numpy; every op that touches a grad-requiring input records a
node on an implicit tape (the ``_parents`` / ``_backward`` fields of the
output tensor). ``backward`` walks the tape once and frees it.

Default precision is float32. ``precision("float64")`` switches new
tensors to float64, which the gradient-check tests use for tight
finite-difference tolerances.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NumericFault(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


_DTYPE = np.float32
_CHECK_FINITE = True


def current_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def rng(seed):
    """Deterministic generator; all randomness in the package flows from these."""
    return np.random.Generator(np.random.PCG64(seed))


def _check_finite(arr, op):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-d array of reals with an optional gradient accumulator.

    ``data`` is never mutated after construction except by in-place
    gradient accumulation on ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

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

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def backward(self, params=None):
        return backward(self, params)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(out_data, op, parents, backward_fn):
    """Wrap an op result, taping it when any parent requires grad."""
    _check_finite(out_data, op)
    t = Tensor(out_data)
    t._op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _accum(parent, grad):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.array(grad, dtype=parent.data.dtype, copy=True)
    else:
        parent.grad += grad


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss, params=None):
    """Reverse pass from a scalar loss.

    Accumulates into ``.grad`` of every reachable tensor with
    ``requires_grad``, returns a map from tensor to gradient array, and
    frees the traversed graph. Tensors listed in ``params`` that the
    graph never reached get explicit zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grads = {}
    for node in order:
        if node.requires_grad and node.grad is not None:
            grads[node] = node.grad
        # free the tape so a training step leaves no graph behind
        node._parents = ()
        node._backward = None

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
                grads[p] = p.grad
    return grads


# ----------------------------------------------------------------------
# elementwise / arithmetic
# ----------------------------------------------------------------------

def add(a, b):
    out = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), back)


def sub(a, b):
    out = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, "sub", (a, b), back)


def mul(a, b):
    out = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, "mul", (a, b), back)


def neg(a):
    def back(g):
        _accum(a, -g)

    return _make(-a.data, "neg", (a,), back)


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def back(g):
        _accum(a, g / a.data)

    return _make(out, "log", (a,), back)


def absolute(a):
    out = np.abs(a.data)

    def back(g):
        _accum(a, g * np.sign(a.data))

    return _make(out, "abs", (a,), back)


def relu(a):
    out = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _make(out, "relu", (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximation GELU; smooth and cheap, gradient matches the formula."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t**2) * dinner
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _make(out, "gelu", (a,), back)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), back)


def stop_gradient(a):
    """Constant view of a tensor's value; no gradient flows through."""
    return Tensor(a.data, requires_grad=False)


def straight_through(soft, hard):
    """Value of ``hard``, gradient of ``soft`` (the quantizer bypass)."""
    return soft + stop_gradient(hard - stop_gradient(soft))


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    prev = a.shape

    def back(g):
        _accum(a, g.reshape(prev))

    return _make(out, "reshape", (a,), back)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _make(out, "transpose", (a,), back)


def concat(tensors, axis):
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(out, "concat", tuple(tensors), back)


def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, "reduce_sum", (a,), back)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / n)

    return _make(out, "reduce_mean", (a,), back)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(out, "matmul", (a, b), back)


def linear(x, w, b=None):
    """x @ w (+ b) over the last axis; w is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight rows {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        _accum(x, g @ w.data.T)
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        _accum(w, gw)
        if b is not None:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, "linear", parents, back)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, "softmax", (a,), back)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        dxhat = g * gamma.data
        gsum = dxhat.sum(axis=-1, keepdims=True)
        gdot = (dxhat * xhat).sum(axis=-1, keepdims=True)
        _accum(x, inv / d * (d * dxhat - gsum - xhat * gdot))
        flat = (-1, d)
        _accum(gamma, (g * xhat).reshape(flat).sum(axis=0))
        _accum(beta, g.reshape(flat).sum(axis=0))

    return _make(out, "layernorm", (x, gamma, beta), back)


def embed_lookup(table, indices):
    """Row gather from a (K, D) table; gradient scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embed_lookup index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _make(out, "embed_lookup", (table,), back)


def gather_last(x, indices):
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(indices)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last index shape {idx.shape} vs {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        _accum(x, gx)

    return _make(out, "gather_last", (x,), back)


# ----------------------------------------------------------------------
# spatial ops (NCHW layout)
# ----------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0):
    """2-d convolution via im2col; x is (N,C,H,W), w is (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants 4-d operands, got {x.shape} and {w.shape}")
    n, c, h, wdt = x.shape
    o, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c} vs kernel {cin}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdt + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} does not fit input {h}x{wdt} "
            f"with stride={stride}, pad={pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, OH, OW, kh, kw) -> (N, OH*OW, C*kh*kw)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    wf = w.data.reshape(o, c * kh * kw)
    out = (col @ wf.T).transpose(0, 2, 1).reshape(n, o, oh, ow)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, o)
        gw = gf.reshape(-1, o).T @ col.reshape(-1, c * kh * kw)
        _accum(w, gw.reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcol = gf @ wf  # (N, OH*OW, C*kh*kw)
            gcol = gcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, c, h + 2 * pad, wdt + 2 * pad), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gcol[
                        :, :, :, :, i, j
                    ]
            _accum(x, gxp[:, :, pad : pad + h, pad : pad + wdt] if pad else gxp)

    return _make(out, "conv2d", parents, back)


def upsample_nearest2x(x):
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x wants NCHW, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        _accum(x, g[:, :, 0::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 0::2] + g[:, :, 1::2, 1::2])

    return _make(out, "upsample_nearest2x", (x,), back)


def downsample_nearest2x(x):
    if x.ndim != 4:
        raise ShapeError(f"downsample_nearest2x wants NCHW, got {x.shape}")
    out = x.data[:, :, ::2, ::2]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::2, ::2] = g
        _accum(x, gx)

    return _make(out, "downsample_nearest2x", (x,), back)


# ----------------------------------------------------------------------
# generic dispatch
# ----------------------------------------------------------------------

OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "linear": linear,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "relu": relu,
    "add": add,
    "mul": mul,
    "sub": sub,
    "concat": concat,
    "embed_lookup": embed_lookup,
    "upsample_nearest2x": upsample_nearest2x,
    "downsample_nearest2x": downsample_nearest2x,
    "reshape": reshape,
    "transpose": transpose,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "log": log,
    "neg": neg,
    "abs": absolute,
    "sigmoid": sigmoid,
    "gather_last": gather_last,
}


def op_forward(kind, inputs, attrs=None):
    """Run one named op on a list of tensors; attrs carries keyword options."""
    if kind not in OPS:
        raise KeyError(f"unknown op kind '{kind}'")
    fn = OPS[kind]
    attrs = dict(attrs or {})
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
