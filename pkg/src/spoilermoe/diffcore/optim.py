"""AdamW with decoupled weight decay, plus the exponential LR step."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ContractError


class AdamW:
    """Decoupled-weight-decay Adam over a ParamRegistry.

    Grads are read but left intact; callers zero them explicitly once
    per step (registry.zero_grads()).
    """

    def __init__(self, registry, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.registry = registry
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {p.param_id: np.zeros_like(p.data) for p in registry}
        self._v = {p.param_id: np.zeros_like(p.data) for p in registry}

    def step(self):
        for p in self.registry:
            if p.grad is None:
                raise ContractError(f"adamw_step: parameter {p.param_id!r} has no gradient")
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.registry:
            g = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self._m[p.param_id]
            v = self._v[p.param_id]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_exponential_step(lr, gamma):
    """One per-epoch decay step: lr * gamma."""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"lr gamma must be in (0, 1], got {gamma}")
    return lr * gamma
