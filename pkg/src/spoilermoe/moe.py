"""Sparsely-gated mixture of experts with noisy top-k routing.

Gate logits are x @ W_g plus, in training, standard-normal noise scaled
by softplus(x @ W_noise). The top k logits per row survive, the rest are
masked to -inf before the softmax, so each row has exactly min(k, n)
nonzero weights summing to 1. Gradients flow through the retained
logits only, never through the selection itself. Experts are 2-layer
MLPs evaluated sparsely: an expert only sees the rows that route to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .errors import ConfigError
from .nn import MLP2


@dataclass
class MoEConfig:
    n_experts: int = 2
    k: int = 1
    d_in: int = 256
    d_hidden: int = 1024
    d_out: int = 256
    noisy: bool = True

    def __post_init__(self):
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"moe: need 1 <= k <= n_experts, got k={self.k}, n={self.n_experts}")


@dataclass
class GateOutput:
    weights: T.Tensor  # (B, n_experts), <= k nonzeros per row
    load: T.Tensor  # (n_experts,) column sums of weights

    def weights_np(self):
        return self.weights.data

    def load_np(self):
        return self.load.data


def top_k_mask(logits, k):
    """Boolean keep-mask of the k largest entries per row; ties keep the lower index."""
    b, n = logits.shape
    if k >= n:
        return np.ones((b, n), dtype=bool)
    order = np.argsort(-logits, axis=1, kind="stable")
    mask = np.zeros((b, n), dtype=bool)
    rows = np.repeat(np.arange(b), k)
    mask[rows, order[:, :k].reshape(-1)] = True
    return mask


class MoELayer:
    def __init__(self, registry, name, config):
        self.config = config
        c = config
        self.w_gate = registry.param(f"{name}.w_gate", (c.d_in, c.n_experts))
        self.w_noise = registry.param(f"{name}.w_noise", (c.d_in, c.n_experts))
        self.experts = [
            MLP2(registry, f"{name}.expert{j}", c.d_in, c.d_hidden, c.d_out)
            for j in range(c.n_experts)
        ]

    def gate(self, x, training=False, rng=None):
        """Noisy top-k softmax gate; noise only in training."""
        c = self.config
        h = T.matmul(x, self.w_gate)
        if training and c.noisy:
            if rng is None:
                raise ConfigError("noisy gating in training mode requires an rng stream")
            noise = rng.standard_normal(h.shape).astype(x.dtype)
            h = T.add(h, T.mul(T.Tensor(noise), T.softplus(T.matmul(x, self.w_noise))))
        keep = top_k_mask(h.data, c.k)
        if c.k < c.n_experts:
            blocked = np.where(keep, 0.0, -np.inf).astype(h.dtype)
            h = T.add(h, T.Tensor(blocked))
        weights = T.softmax(h, axis=1)
        load = T.tsum(weights, axis=0)
        return GateOutput(weights=weights, load=load)

    def forward(self, x, training=False, rng=None):
        """z_i = sum_j weights[i, j] * E_j(x_i); experts see only their rows."""
        gate_out = self.gate(x, training=training, rng=rng)
        b = x.shape[0]
        z = T.Tensor(np.zeros((b, self.config.d_out), dtype=x.dtype))
        for j, expert in enumerate(self.experts):
            rows = np.nonzero(gate_out.weights.data[:, j] > 0)[0]
            if rows.size == 0:
                continue
            xj = T.gather_rows(x, rows)
            wj = T.gather_rows(T.slice_axis(gate_out.weights, 1, j, j + 1), rows)
            contrib = T.scatter_rows(T.mul(expert(xj), wj), rows, b)
            z = T.add(z, contrib)
        return z, gate_out

    __call__ = forward


def balancing_loss(load):
    """Squared coefficient of variation of the per-expert load.

    Population standard deviation; defined as 0 when the mean load is 0.
    """
    if float(np.mean(load.data)) == 0.0:
        return T.Tensor(np.zeros((), dtype=load.dtype))
    mu = T.tmean(load)
    var = T.tmean(T.square(T.add(load, T.mul(mu, T.Tensor(np.array(-1.0, dtype=load.dtype))))))
    return T.div(var, T.square(mu))
