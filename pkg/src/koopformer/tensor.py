"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and records the operations applied
to it; calling :meth:`Tensor.backward` on a scalar result propagates exact
analytic gradients back to every tensor created with
``requires_grad=True``. The operator set is deliberately closed: it
contains exactly what the models in this package need (affine maps, the
usual activations, normalization layers, softmax, batched matmul, n-D
convolution, nearest-neighbour upsampling and basic shape surgery), each
with a hand-derived backward rule.

Gradients are plain numpy arrays accumulated on ``Tensor.grad``. Graph
recording can be suspended with :func:`no_grad` for inference paths.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

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

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph plumbing ------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise DimensionError(f"backward: loss must be scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent._backward is not None or parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(value, dtype=dtype))


def _wire(out, parents, backward):
    """Attach graph edges to ``out`` when recording is active."""
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(g, b.shape))

    return _wire(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _wire(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _wire(out, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data / b.data)

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _wire(out, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = Tensor(a.data ** exponent)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _wire(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward(g):
        a._accumulate(g * out.data)

    return _wire(out, (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _wire(out, (a,), backward)


def leaky_relu(a, alpha=0.02):
    a = as_tensor(a)
    out = Tensor(np.where(a.data > 0, a.data, alpha * a.data))

    def backward(g):
        a._accumulate(g * np.where(a.data > 0, 1.0, alpha))

    return _wire(out, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Gaussian error linear unit, exact erf form."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(x.dtype, copy=False))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _wire(out, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward(g):
        a._accumulate(g * (1.0 - out.data * out.data))

    return _wire(out, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))

    def backward(g):
        a._accumulate(g * out.data * (1.0 - out.data))

    return _wire(out, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - inner))

    return _wire(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape surgery
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    return _wire(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.size / out.data.size

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g / count, a.shape))

    return _wire(out, (a,), backward)


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _wire(out, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _wire(out, (a,), backward)


def take(a, index):
    """Basic (slice/integer) indexing with scatter-add backward."""
    a = as_tensor(a)
    out = Tensor(a.data[index])

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        a._accumulate(buf)

    return _wire(out, (a,), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, parts):
            if t.requires_grad or t._backward is not None:
                t._accumulate(piece)

    return _wire(out, tuple(tensors), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._backward is not None:
                t._accumulate(piece)

    return _wire(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError.mismatch("matmul", a.shape, b.shape)
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        if a.requires_grad or a._backward is not None:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._backward is not None:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _wire(out, (a, b), backward)


def affine(x, weight, bias=None):
    """x @ weight + bias over the trailing axis."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# normalization layers
# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = x.shape[-1]

    def backward(g):
        if gain.requires_grad or gain._backward is not None:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad or bias._backward is not None:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad or x._backward is not None:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return _wire(out, (x, gain, bias), backward)


def batch_norm(x, gain, bias, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Batch normalization over all axes except the channel axis (axis 1).

    ``running_mean``/``running_var`` are plain numpy arrays updated in
    place in training mode and used directly in eval mode.
    """
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size / x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * count / max(count - 1.0, 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(view)) * inv.reshape(view)
    out = Tensor(xhat * gain.data.reshape(view) + bias.data.reshape(view))

    def backward(g):
        if gain.requires_grad or gain._backward is not None:
            gain._accumulate((g * xhat).sum(axis=axes))
        if bias.requires_grad or bias._backward is not None:
            bias._accumulate(g.sum(axis=axes))
        if x.requires_grad or x._backward is not None:
            gh = g * gain.data.reshape(view)
            if training:
                m = x.data.size / x.shape[1]
                mean_gh = gh.mean(axis=axes).reshape(view)
                mean_ghx = (gh * xhat).mean(axis=axes).reshape(view)
                x._accumulate((gh - mean_gh - xhat * mean_ghx) * inv.reshape(view))
            else:
                x._accumulate(gh * inv.reshape(view))

    return _wire(out, (x, gain, bias), backward)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity in eval mode or at rate 0."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    out = Tensor(x.data * mask)

    def backward(g):
        x._accumulate(g * mask)

    return _wire(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and upsampling
# ---------------------------------------------------------------------------

def _check_conv_args(x, kernel, stride, pad_mode):
    spatial = x.shape[2:]
    if len(spatial) != len(kernel):
        raise DimensionError.mismatch("conv", x.shape, kernel)
    if any(k % 2 == 0 for k in kernel):
        raise DimensionError(f"conv: kernel sizes must be odd, got {kernel}")
    if pad_mode not in ("zeros", "wrap"):
        raise ValueError(f"conv: unknown pad_mode {pad_mode!r}")
    return spatial


def conv_nd(x, weight, bias, kernel, stride=1, pad_mode="zeros"):
    """n-D convolution (cross-correlation) with odd kernels and same padding.

    ``x`` is [B, C_in, *spatial]; ``weight`` is a flat [C_in * prod(kernel),
    C_out] matrix whose row index is channel-major over kernel offsets
    (row = c * K + j with offsets in C order). Output spatial extent is
    ``ceil(n / stride)`` per axis. ``pad_mode`` is "zeros" or "wrap"
    (periodic).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kernel = tuple(kernel)
    spatial = _check_conv_args(x, kernel, stride, pad_mode)
    nd = len(kernel)
    pad = tuple(k // 2 for k in kernel)
    strides = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    out_spatial = tuple(-(-n // s) for n, s in zip(spatial, strides))
    c_in = x.shape[1]
    c_out = weight.shape[1]
    k_total = int(np.prod(kernel))
    if weight.shape[0] != c_in * k_total:
        raise DimensionError.mismatch("conv weight", weight.shape, (c_in * k_total, c_out))

    offsets = list(np.ndindex(*kernel))
    sp_axes = tuple(range(2, 2 + nd))
    w3 = weight.data.reshape(c_in, k_total, c_out)

    if pad_mode == "zeros":
        padded = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    else:
        padded = None

    def shifted(j):
        d = offsets[j]
        if pad_mode == "zeros":
            slc = tuple(slice(dk, dk + s * m, s) for dk, s, m in zip(d, strides, out_spatial))
            return padded[(slice(None), slice(None)) + slc]
        roll = tuple(p - dk for p, dk in zip(pad, d))
        slc = tuple(slice(None, None, s) for s in strides)
        return np.roll(x.data, roll, axis=sp_axes)[(slice(None), slice(None)) + slc]

    acc = np.zeros((x.shape[0],) + out_spatial + (c_out,), dtype=x.data.dtype)
    for j in range(k_total):
        acc += np.tensordot(shifted(j), w3[:, j, :], axes=([1], [0]))
    out_data = np.moveaxis(acc, -1, 1)
    if bias is not None:
        out_data = out_data + bias.data.reshape((1, c_out) + (1,) * nd)
    out = Tensor(np.ascontiguousarray(out_data))

    def backward(g):
        g_last = np.moveaxis(g, 1, -1)  # [B, *out_spatial, C_out]
        if bias is not None and (bias.requires_grad or bias._backward is not None):
            bias._accumulate(g_last.reshape(-1, c_out).sum(axis=0))
        need_w = weight.requires_grad or weight._backward is not None
        need_x = x.requires_grad or x._backward is not None
        gw = np.zeros((c_in, k_total, c_out), dtype=weight.data.dtype) if need_w else None
        if need_x:
            gx_padded = (np.zeros_like(padded) if pad_mode == "zeros" else None)
            gx = np.zeros_like(x.data) if pad_mode == "wrap" else None
        sum_axes = (0,) + tuple(range(1, 1 + nd))
        for j in range(k_total):
            d = offsets[j]
            if need_w:
                sh = shifted(j)  # [B, C_in, *out_spatial]
                gw[:, j, :] = np.tensordot(sh, g_last, axes=(sum_axes[:1] + sp_axes, sum_axes))
            if need_x:
                contrib = np.tensordot(g_last, w3[:, j, :], axes=([-1], [1]))  # [B,*out,C_in]
                contrib = np.moveaxis(contrib, -1, 1)
                if pad_mode == "zeros":
                    slc = tuple(slice(dk, dk + s * m, s) for dk, s, m in zip(d, strides, out_spatial))
                    gx_padded[(slice(None), slice(None)) + slc] += contrib
                else:
                    buf = np.zeros_like(x.data)
                    slc = tuple(slice(None, None, s) for s in strides)
                    buf[(slice(None), slice(None)) + slc] = contrib
                    roll = tuple(dk - p for p, dk in zip(pad, d))
                    gx += np.roll(buf, roll, axis=sp_axes)
        if need_w:
            weight._accumulate(gw.reshape(c_in * k_total, c_out))
        if need_x:
            if pad_mode == "zeros":
                core = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, spatial))
                x._accumulate(gx_padded[core])
            else:
                x._accumulate(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _wire(out, parents, backward)


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling of every spatial axis by ``factor``."""
    x = as_tensor(x)
    nd = x.ndim - 2
    data = x.data
    for axis in range(2, 2 + nd):
        data = np.repeat(data, factor, axis=axis)
    out = Tensor(data)

    def backward(g):
        shape = []
        for i, n in enumerate(x.shape):
            if i < 2:
                shape.append(n)
            else:
                shape.extend((n, factor))
        sum_axes = tuple(3 + 2 * i for i in range(nd))
        a = g.reshape(shape).sum(axis=sum_axes)
        x._accumulate(a)

    return _wire(out, (x,), backward)


# ---------------------------------------------------------------------------
# structured parameter assembly
# ---------------------------------------------------------------------------

def banded_symmetric(diag, bands):
    """Assemble a symmetric banded matrix from its free parameters.

    ``diag`` has length e; ``bands[i]`` has length e-1-i and fills both
    off-diagonals at offset i+1 (a single parameter vector is shared by
    the symmetric pair). Gradients gather the corresponding diagonals.
    """
    diag = as_tensor(diag)
    bands = [as_tensor(b) for b in bands]
    e = diag.shape[0]
    K = np.zeros((e, e), dtype=diag.data.dtype)
    idx = np.arange(e)
    K[idx, idx] = diag.data
    for i, band in enumerate(bands):
        o = i + 1
        if band.shape[0] != e - o:
            raise DimensionError.mismatch("banded_symmetric", band.shape, (e - o,))
        r = np.arange(e - o)
        K[r, r + o] = band.data
        K[r + o, r] = band.data
    out = Tensor(K)

    def backward(g):
        if diag.requires_grad or diag._backward is not None:
            diag._accumulate(g[idx, idx])
        for i, band in enumerate(bands):
            if band.requires_grad or band._backward is not None:
                o = i + 1
                r = np.arange(e - o)
                band._accumulate(g[r, r + o] + g[r + o, r])

    return _wire(out, (diag, *bands), backward)


def mse(pred, target):
    """Mean squared error over all elements; ``target`` is a constant."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise DimensionError.mismatch("mse", pred.shape, target.shape)
    diff = pred.data - target
    out = Tensor(np.array((diff * diff).mean(), dtype=pred.data.dtype))
    scale = 2.0 / pred.data.size

    def backward(g):
        pred._accumulate((g * scale) * diff)

    return _wire(out, (pred,), backward)
