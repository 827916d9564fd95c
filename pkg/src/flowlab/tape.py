"""Minimal reverse-mode autodiff over numpy arrays.

A `Tensor` wraps an ndarray plus a VJP closure; `backward()` walks the tape
in reverse topological order. Complex arrays are supported with the usual
convention that the cotangent of a complex node is dL/dRe + i dL/dIm, so the
adjoint of any complex-linear op is its conjugate transpose and the adjoint
of the real->complex embedding is `.real`.

Everything is single-threaded numpy, so runs are deterministic given inputs.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf as _erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return self.data.item()

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def zero_grad(self):
        self.grad = None

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _make(data, parents, vjp):
    parents = tuple(astensor(p) for p in parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g, ref: Tensor):
    """Adjoint of numpy broadcasting (and of the real->complex embedding)."""
    shape = ref.data.shape
    if np.iscomplexobj(g) and not np.iscomplexobj(ref.data):
        g = g.real
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.dtype != ref.data.dtype:
        g = g.astype(ref.data.dtype)
    return g


# -- arithmetic -----------------------------------------------------------
#
# Python scalars take a fast path: they stay weak in numpy's promotion rules
# (wrapping them in a 0-d array would drag float32 graphs up to float64) and
# they don't become graph nodes.


def _pyscalar(x):
    if isinstance(x, (bool, np.bool_)):
        return None
    if isinstance(x, complex):
        return complex(x)
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def add(a, b):
    for x, y in ((a, b), (b, a)):
        s = _pyscalar(y) if not isinstance(y, Tensor) else None
        if s is not None:
            x = astensor(x)
            return _make(x.data + s, (x,), lambda g: (_unbroadcast(g, x),))
    a, b = astensor(a), astensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b):
    sb = _pyscalar(b) if not isinstance(b, Tensor) else None
    if sb is not None:
        a = astensor(a)
        return _make(a.data - sb, (a,), lambda g: (_unbroadcast(g, a),))
    sa = _pyscalar(a) if not isinstance(a, Tensor) else None
    if sa is not None:
        b = astensor(b)
        return _make(sa - b.data, (b,), lambda g: (_unbroadcast(-g, b),))
    a, b = astensor(a), astensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b):
    for x, y in ((a, b), (b, a)):
        s = _pyscalar(y) if not isinstance(y, Tensor) else None
        if s is not None:
            x = astensor(x)
            return _make(x.data * s, (x,), lambda g: (_unbroadcast(g * np.conj(s), x),))
    a, b = astensor(a), astensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * np.conj(b.data), a), _unbroadcast(g * np.conj(a.data), b)),
    )


def div(a, b):
    sb = _pyscalar(b) if not isinstance(b, Tensor) else None
    if sb is not None:
        return mul(a, 1.0 / sb)
    a, b = astensor(a), astensor(b)
    out = a.data / b.data

    def vjp(g):
        cb = np.conj(b.data)
        return (_unbroadcast(g / cb, a), _unbroadcast(-g * np.conj(out) / cb, b))

    return _make(out, (a, b), vjp)


def pow_const(x, p: float):
    x = astensor(x)
    out = x.data**p
    return _make(out, (x,), lambda g: (_unbroadcast(g * p * x.data ** (p - 1), x),))


def exp(x):
    x = astensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (_unbroadcast(g * out, x),))


def log(x):
    x = astensor(x)
    return _make(np.log(x.data), (x,), lambda g: (_unbroadcast(g / x.data, x),))


def sqrt(x):
    x = astensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (_unbroadcast(g * 0.5 / out, x),))


def sin(x):
    x = astensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (_unbroadcast(g * np.cos(x.data), x),))


def cos(x):
    x = astensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (_unbroadcast(-g * np.sin(x.data), x),))


def tanh(x):
    x = astensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (_unbroadcast(g * (1.0 - out * out), x),))


def sigmoid(x):
    x = astensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (_unbroadcast(g * out * (1.0 - out), x),))


def relu(x):
    x = astensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (_unbroadcast(g * mask, x),))


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x):
    x = astensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data / _SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (_unbroadcast(g * (cdf + x.data * pdf), x),)

    return _make(out, (x,), vjp)


def silu(x):
    x = astensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(x.data * s, (x,), lambda g: (_unbroadcast(g * (s + x.data * s * (1.0 - s)), x),))


# -- shape ops -------------------------------------------------------------


def reshape(x, shape):
    x = astensor(x)
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = astensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x):
    x = astensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors, axis=-1):
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(_unbroadcast(piece, t) for piece, t in zip(np.split(g, splits, axis=axis), tensors))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def tslice(x, key):
    """Basic slicing; adjoint scatters the cotangent back into zeros."""
    x = astensor(x)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(x.data[key], (x,), vjp)


def take_rows(x, idx):
    """Gather along axis -2: y[..., i, k, :] = x[..., idx[i, k], :].

    idx is an integer array (P, K); x has shape (..., P, d) and the result
    has shape (..., P, K, d).
    """
    x = astensor(x)
    idx = np.asarray(idx)
    out = x.data[..., idx, :]

    def vjp(g):
        # gx must be C-contiguous: zeros_like would inherit the layout of a
        # transposed view and the reshape below would silently copy, making
        # np.add.at mutate a throwaway buffer
        gx = np.zeros(x.data.shape, dtype=x.data.dtype)
        flat = gx.reshape(-1, *gx.shape[-2:])
        gf = np.ascontiguousarray(g).reshape(-1, *g.shape[-3:])
        b = np.arange(flat.shape[0])[:, None, None]
        np.add.at(flat, (b, idx[None, :, :]), gf)
        return (gx,)

    return _make(out, (x,), vjp)


def scatter_rows(w, idx, n):
    """Dense map from per-row sparse weights: out[..., i, idx[i, k]] += w[..., i, k].

    Entries outside the index pattern are exactly zero. Adjoint is the gather.
    """
    w = astensor(w)
    idx = np.asarray(idx)
    p, k = idx.shape
    lead = w.data.shape[:-2]
    out = np.zeros(lead + (p, n), dtype=w.data.dtype)
    flat = out.reshape(-1, p, n)
    wf = w.data.reshape(-1, p, k)
    b = np.arange(flat.shape[0])[:, None, None]
    rows = np.arange(p)[None, :, None]
    np.add.at(flat, (b, rows, idx[None, :, :]), wf)

    def vjp(g):
        gf = g.reshape(-1, p, n)
        gw = gf[b, rows, idx[None, :, :]]
        return (gw.reshape(w.data.shape),)

    return _make(out.reshape(lead + (p, n)), (w,), vjp)


def gather_modes(z, rows, cols):
    """Crop axes (-3, -2) to given index lists: y = z[..., rows, :, :][..., :, cols, :]."""
    z = astensor(z)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = z.data[..., rows[:, None], cols[None, :], :]
    h, w = z.data.shape[-3], z.data.shape[-2]

    def vjp(g):
        gz = np.zeros_like(z.data)
        gz[..., rows[:, None], cols[None, :], :] = g
        return (gz,)

    return _make(out, (z,), vjp)


def scatter_modes(y, rows, cols, h, w):
    """Zero-pad cropped modes back onto an (..., h, w, d) grid."""
    y = astensor(y)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    lead = y.data.shape[:-3]
    d = y.data.shape[-1]
    out = np.zeros(lead + (h, w, d), dtype=y.data.dtype)
    out[..., rows[:, None], cols[None, :], :] = y.data
    return _make(out, (y,), lambda g: (g[..., rows[:, None], cols[None, :], :],))


# -- reductions -------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = astensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)

    return _make(out, (x,), vjp)


def tmean(x, axis=None, keepdims=False):
    x = astensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _adjoint(x):
    """Conjugate transpose of the last two axes; plain transpose view for
    real arrays (conj would materialize a copy for nothing)."""
    xt = np.swapaxes(x, -1, -2)
    return np.conj(xt) if np.iscomplexobj(xt) else xt


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _adjoint(b.data), a)
        if b.requires_grad:
            gb = _unbroadcast(_adjoint(a.data) @ g, b)
        return (ga, gb)

    return _make(out, (a, b), vjp)


def softmax(x, axis=-1):
    x = astensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        gy = g * out
        return (gy - out * gy.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def layer_norm(x, eps=1e-6):
    """Normalize the last axis to zero mean, unit variance."""
    x = astensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        n = x.data.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return ((g - gm - out * gy) * inv,)

    return _make(out, (x,), vjp)


# -- complex support ---------------------------------------------------------


def to_complex(re, im=None):
    re = astensor(re)
    if im is None:
        out = re.data.astype(np.complex128 if re.data.dtype == np.float64 else np.complex64)
        return _make(out, (re,), lambda g: (g.real.astype(re.data.dtype),))
    im = astensor(im)
    out = re.data + 1j * im.data
    return _make(out, (re, im), lambda g: (_unbroadcast(g, re), _unbroadcast(-1j * g, im)))


def creal(z):
    z = astensor(z)
    return _make(z.data.real.copy(), (z,), lambda g: (g.astype(z.data.dtype),))


def cimag(z):
    z = astensor(z)
    return _make(z.data.imag.copy(), (z,), lambda g: ((1j * g).astype(z.data.dtype),))


def fft2(z, axes=(-3, -2)):
    """Unnormalized forward 2D DFT; adjoint is n1*n2 * ifft2.

    numpy's FFT always computes in double; single-precision inputs are cast
    back so mixed-precision models stay single throughout.
    """
    z = astensor(z)
    n = z.data.shape[axes[0]] * z.data.shape[axes[1]]
    out = np.fft.fft2(z.data, axes=axes)
    if z.data.dtype == np.complex64:
        out = out.astype(np.complex64)
    return _make(out, (z,),
                 lambda g: (_unbroadcast(np.fft.ifft2(g, axes=axes) * n, z),))


def ifft2(z, axes=(-3, -2)):
    """1/(n1 n2)-normalized inverse 2D DFT; adjoint is fft2 / (n1*n2)."""
    z = astensor(z)
    n = z.data.shape[axes[0]] * z.data.shape[axes[1]]
    out = np.fft.ifft2(z.data, axes=axes)
    if z.data.dtype == np.complex64:
        out = out.astype(np.complex64)
    return _make(out, (z,),
                 lambda g: (_unbroadcast(np.fft.fft2(g, axes=axes) / n, z),))


# -- conveniences used across the model code ---------------------------------


def mse(a, b):
    d = sub(a, b)
    return tmean(mul(d, d))


def stop_gradient(x):
    return astensor(x).detach()
