"""A small reverse-mode autograd over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients. Calling
``loss.backward()`` walks the graph in reverse topological order and
accumulates into ``.grad`` of every leaf that requires a gradient.
Tensors are never mutated in place once they are part of a graph.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into the ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)

        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(as_tensor(o, self)))

    def __rsub__(self, o):
        return add(as_tensor(o, self), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

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


class Parameter(Tensor):
    """A learnable leaf tensor; ``decay`` marks weight-decay eligibility."""

    __slots__ = ("name", "decay")

    def __init__(self, data, name="", decay=True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def reciprocal(a):
    r = 1.0 / a.data
    return _result(r, (a,), lambda g: (-g * r * r,))


def exp(a):
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a):
    d = a.data
    return _result(np.log(d), (a,), lambda g: (g / d,))


def clip(a, lo, hi):
    d = a.data
    inside = (d >= lo) & (d <= hi)
    return _result(np.clip(d, lo, hi), (a,), lambda g: (g * inside,))


def sigmoid(a):
    s = expit(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a):
    d = a.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return _result(out, (a,), lambda g: (g * expit(d),))


def silu(a):
    d = a.data
    s = expit(d)
    return _result(d * s, (a,), lambda g: (g * s * (1 + d * (1 - s)),))


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / n)


mean_pool = mean


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer))
               for i in items)


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def concat(xs, axis=0):
    if not xs:
        raise ValueError("concat of an empty sequence")
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis=0):
    xs = [x.reshape(x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
          for x in xs]
    return concat(xs, axis)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias``.

    ``weight`` has shape (d_out, d_in).
    """
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight dim {weight.shape[-1]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [(g2 @ wd).reshape(xd.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, backward)


# -- normalization and probability ------------------------------------------

def layer_norm(x, gain, offset, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x = as_tensor(x)
    gain, offset = as_tensor(gain, x), as_tensor(offset, x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + offset.data
    lead = tuple(range(d.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, offset), backward)


def softmax(x, axis=-1):
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -- convolution ----------------------------------------------------------------

def _dwconv_nhwc(xd, kd):
    k = kd.shape[-1]
    r = k // 2
    _, h, w, _ = xd.shape
    xp = np.pad(xd, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.zeros_like(xd)
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + h, j:j + w, :] * kd[:, i, j]
    return out, xp


def depthwise_conv2d(x, kernels, bias=None, channels_last=False):
    """Per-channel 2D cross-correlation with zero 'same' padding.

    ``x`` is (B, C, H, W), or (B, H, W, C) with ``channels_last``;
    ``kernels`` is (C, k, k) with odd k.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels, x)
    if bias is not None:
        bias = as_tensor(bias, x)
    k = kernels.shape[-1]
    if k % 2 == 0 or kernels.shape[-2] != k:
        raise ValueError("depthwise kernels must be square with odd size")
    if not channels_last:
        out = depthwise_conv2d(transpose(x, (0, 2, 3, 1)), kernels, bias, channels_last=True)
        return transpose(out, (0, 3, 1, 2))
    if x.ndim != 4 or x.shape[-1] != kernels.shape[0]:
        raise ValueError(f"depthwise_conv2d: {x.shape} does not match kernels {kernels.shape}")
    xd, kd = x.data, kernels.data
    out, xp = _dwconv_nhwc(xd, kd)
    if bias is not None:
        out = out + bias.data
    r = k // 2
    _, h, w, _ = xd.shape
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for i in range(k):
            for j in range(k):
                gp[:, i:i + h, j:j + w, :] += g * kd[:, i, j]
                gk[:, i, j] = np.einsum("bhwc,bhwc->c", xp[:, i:i + h, j:j + w, :], g)
        grads = [gp[:, r:r + h, r:r + w, :], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return _result(out, parents, backward)
