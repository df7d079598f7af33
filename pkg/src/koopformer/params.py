"""Named parameter storage and deterministic initialization.

All trainable state in the package lives in a :class:`ParamStore`: an
ordered mapping from unique names to tensors, each flagged trainable or
frozen. Frozen entries cover things like batch-norm running statistics
that must be checkpointed but never receive gradient updates.

Random initialization goes through :func:`seeded_init`, which uses the
splittable 64-bit PCG64 generator so every tensor is a pure function of
(shape, scheme, seed).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor

RNG_NAME = "pcg64"

INIT_SCHEMES = ("uniform-fan-in", "normal", "zeros", "identity-like")


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def seeded_init(shape, scheme, seed, sigma=0.02, dtype=np.float32):
    """Deterministically initialize a tensor of the given shape.

    Schemes: ``uniform-fan-in`` draws U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    with fan_in the product of all but the last axis; ``normal`` draws
    N(0, sigma^2); ``zeros``; ``identity-like`` gives the identity for
    square matrices, ones for vectors (the diagonal of an identity) and
    a rectangular identity otherwise.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "identity-like":
        if len(shape) == 1:
            return np.ones(shape, dtype=dtype)
        if len(shape) == 2:
            return np.eye(shape[0], shape[1], dtype=dtype)
        raise ConfigError(f"identity-like init needs a vector or matrix, got shape {shape}")
    rng = make_rng(seed)
    if scheme == "uniform-fan-in":
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if scheme == "normal":
        return (sigma * rng.standard_normal(size=shape)).astype(dtype)
    raise ConfigError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


class ParamStore:
    """Ordered, uniquely named tensors with trainable/frozen flags.

    Shapes are immutable after creation; iteration follows insertion
    order, which checkpointing relies on.
    """

    def __init__(self):
        self._entries = {}

    def add(self, name, data, trainable=True):
        if name in self._entries:
            raise ConfigError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(data), requires_grad=trainable)
        self._entries[name] = t
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self):
        return self._entries.values()

    def trainable(self):
        return {k: t for k, t in self._entries.items() if t.requires_grad}

    def set_data(self, name, data):
        t = self._entries[name]
        data = np.asarray(data, dtype=t.data.dtype)
        if data.shape != t.data.shape:
            raise DimensionError.mismatch(f"param {name}", t.data.shape, data.shape)
        t.data = data

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def n_parameters(self, trainable_only=True):
        return sum(t.size for t in self._entries.values()
                   if t.requires_grad or not trainable_only)

    def astype(self, dtype):
        """Return a copy of this store with every tensor cast to ``dtype``."""
        out = ParamStore()
        for name, t in self._entries.items():
            out.add(name, t.data.astype(dtype), trainable=t.requires_grad)
        return out


def gradient_of(loss, store):
    """Exact reverse-mode gradients of a scalar loss for every trainable
    parameter in ``store``; parameters the loss never touched get zeros."""
    if loss.size != 1:
        raise DimensionError(f"gradient_of: loss must be scalar, got shape {loss.shape}")
    store.zero_grad()
    loss.backward()
    grads = {}
    for name, t in store.items():
        if not t.requires_grad:
            continue
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads
