"""Named learnable tensors, ADAM state, and seeded initialization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from msbdn.tensor import Tensor

ADAM_EPS = 1e-8


def make_rng(seed, *stream):
    """PCG64 generator keyed by ``seed`` and an optional sub-stream path.

    ``make_rng(s, step)`` gives the per-step stream used by training, which is
    what makes resumed runs bit-identical to uninterrupted ones.
    """
    return np.random.Generator(np.random.PCG64([int(seed), *map(int, stream)]))


@dataclass
class Param:
    name: str
    value: Tensor
    adam_m: np.ndarray
    adam_v: np.ndarray

    @property
    def grad(self):
        g = self.value.grad
        return np.zeros_like(self.value.data) if g is None else g

    @property
    def shape(self):
        return self.value.shape


class ParameterStore:
    """Insertion-ordered collection of parameters with gradient and ADAM buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Param] = {}

    def add(self, name, shape):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        data = np.zeros(shape, dtype=self.dtype)
        self._entries[name] = Param(
            name,
            Tensor(data, requires_grad=True),
            np.zeros(shape, dtype=self.dtype),
            np.zeros(shape, dtype=self.dtype),
        )
        return self._entries[name].value

    def __getitem__(self, name) -> Tensor:
        try:
            return self._entries[name].value
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def entry(self, name) -> Param:
        return self._entries[name]

    def scope(self, prefix):
        return Scope(self, prefix)

    def num_scalars(self):
        return sum(int(p.value.data.size) for p in self)

    def zero_grad(self):
        for p in self:
            p.value.grad = None

    def zero_(self):
        """Set every parameter (and ADAM moment) to zero."""
        for p in self:
            p.value.data[...] = 0
            p.adam_m[...] = 0
            p.adam_v[...] = 0

    def copy(self, dtype=None):
        out = ParameterStore(self.dtype if dtype is None else dtype)
        for p in self:
            out.add(p.name, p.shape)
            q = out.entry(p.name)
            q.value.data[...] = p.value.data
            q.adam_m[...] = p.adam_m
            q.adam_v[...] = p.adam_v
        return out

    def state_arrays(self):
        return {p.name: p.value.data for p in self}

    def grad_norms(self):
        return {p.name: float(np.linalg.norm(p.grad)) for p in self}


class Scope:
    """Prefix view onto a store: ``scope["conv1.weight"]`` -> ``store[prefix + ".conv1.weight"]``."""

    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix

    def _key(self, name):
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name):
        return self.store[self._key(name)]

    def __contains__(self, name):
        return self._key(name) in self.store

    def scope(self, name):
        return Scope(self.store, self._key(name))

    def add(self, name, shape):
        return self.store.add(self._key(name), shape)


def init_weights(store, rng):
    """He fan-in normal init for 4-D kernels, zeros for biases.

    Fan-in is ``shape[1] * k * k``; for deconv weights stored (C_in, C_out, k, k)
    that is the fan-in of the adjoint convolution, which keeps the same scale.
    """
    for p in store:
        data = p.value.data
        if data.ndim == 4:
            fan_in = data.shape[1] * data.shape[2] * data.shape[3]
            data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=data.shape)
        else:
            data[...] = 0
        p.adam_m[...] = 0
        p.adam_v[...] = 0


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=ADAM_EPS, t=1):
    """One bias-corrected ADAM update, in place. Gradients are left as they are."""
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in store:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / bc1
        v_hat = p.adam_v / bc2
        p.value.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
