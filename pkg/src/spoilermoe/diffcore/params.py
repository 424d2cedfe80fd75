"""Trainable-parameter registry with seeded initialization."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


def glorot_limit(shape):
    if len(shape) >= 2:
        fan_in, fan_out = shape[0], shape[-1]
    else:
        fan_in, fan_out = shape[0], 1
    return np.sqrt(6.0 / (fan_in + fan_out))


class ParamRegistry:
    """Ordered param_id -> Tensor map; iteration order is insertion order."""

    def __init__(self, rng_seed, dtype=np.float32):
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self.dtype = dtype
        self._params: dict[str, Tensor] = {}

    def param(self, param_id, shape, init="glorot"):
        if param_id in self._params:
            raise ConfigError(f"duplicate param_id: {param_id!r}")
        shape = tuple(int(s) for s in shape)
        if init == "glorot":
            lim = glorot_limit(shape)
            data = self.rng.uniform(-lim, lim, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init scheme: {init!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, param_id=param_id)
        self._params[param_id] = t
        return t

    def __getitem__(self, param_id):
        return self._params[param_id]

    def __contains__(self, param_id):
        return param_id in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def ids(self):
        return list(self._params.keys())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self):
        """Materialize zero grads for params a sparse forward never touched
        (e.g. experts that received no rows), so the optimizer contract holds."""
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def state_dict(self):
        return {pid: t.data.copy() for pid, t in self._params.items()}

    def load_state_dict(self, state):
        for pid, t in self._params.items():
            if pid not in state:
                raise ConfigError(f"state dict is missing parameter {pid!r}")
            arr = np.asarray(state[pid])
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"parameter {pid!r}: stored shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype, copy=True)

    def num_scalars(self):
        return sum(t.data.size for t in self._params.values())
