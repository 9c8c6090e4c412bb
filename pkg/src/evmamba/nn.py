"""Module containers, layers, SGD and the parameter checkpoint format."""

from __future__ import annotations

import math
import struct

import numpy as np

from .tensor import Parameter, layer_norm, linear


class Module:
    """Base class that discovers parameters held in attributes.

    Attributes that are a :class:`Parameter`, a :class:`Module`, or a
    list of modules are walked in attribute-definition order.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        self.weight = Parameter(uniform_fan_in(rng, (d_out, d_in), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype), decay=False) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype), decay=False)
        self.offset = Parameter(np.zeros(dim, dtype), decay=False)
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.offset, self.eps)


def name_parameters(module):
    """Stamp each parameter's ``name`` with its dotted path."""
    for name, p in module.named_parameters():
        p.name = name
    return module


# -- optimization ---------------------------------------------------------------

def sgd_step(params, lr, weight_decay=0.0):
    """Plain SGD with L2 weight decay on decay-eligible parameters."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {getattr(p, 'name', '')!r} has no gradient")
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        p.data = p.data - lr * g


class SGD:
    """SGD with optional heavy-ball momentum and global gradient-norm
    clipping (both off by default)."""

    def __init__(self, params, lr=0.001, weight_decay=0.0001, momentum=0.0, clip_norm=0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [None] * len(self.params)

    def clip_gradients(self):
        """Rescale all gradients so their joint norm is at most ``clip_norm``."""
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
        norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params))
        if norm > self.clip_norm:
            scale = self.clip_norm / norm
            for p in self.params:
                p.grad = p.grad * scale
        return norm

    def step(self):
        if self.clip_norm:
            self.clip_gradients()
        if not self.momentum:
            sgd_step(self.params, self.lr, self.weight_decay)
            return
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.data
            v = self._velocity[i]
            v = g if v is None else self.momentum * v + g
            self._velocity[i] = v
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- checkpoint file --------------------------------------------------------------
#
# b"ckpt1", u32 count, then per tensor:
#   u16 name length, name (utf-8), u8 rank, rank x u32 extents,
#   u8 dtype tag (0 = float32, 1 = float64), little-endian payload.

CKPT_MAGIC = b"ckpt1"
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def dump_checkpoint(tensors):
    out = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def load_checkpoint(data):
    if data[:5] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 5
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            (tag,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dtype = _TAG_DTYPES[tag].newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise CheckpointError(f"{name}: truncated payload")
            tensors[name] = np.frombuffer(data, dtype, int(np.prod(shape, dtype=np.int64)),
                                          pos).reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors
