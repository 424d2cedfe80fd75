"""Shared neural building blocks on top of the diffcore tape.

Transformer blocks are pre-norm with residual connections and a final
layer norm; attention masks are additive key masks (0 keep, -inf drop)
so fully padded positions never influence valid ones.
"""

from __future__ import annotations

import numpy as np

from .diffcore import tensor as T
from .errors import ConfigError

NEG_INF = np.float32(-1e30)


class Linear:
    def __init__(self, registry, name, d_in, d_out, bias=True):
        self.w = registry.param(f"{name}.w", (d_in, d_out))
        self.b = registry.param(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class MLP2:
    """Two linear layers with a ReLU between (no trailing activation)."""

    def __init__(self, registry, name, d_in, d_hidden, d_out):
        self.fc1 = Linear(registry, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(registry, f"{name}.fc2", d_hidden, d_out)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm:
    def __init__(self, registry, name, dim):
        self.gain = registry.param(f"{name}.gain", (dim,), init="ones")
        self.bias = registry.param(f"{name}.bias", (dim,), init="zeros")

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadSelfAttention:
    def __init__(self, registry, name, d_model, n_heads):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_model // n_heads
        self.wq = Linear(registry, f"{name}.wq", d_model, d_model)
        self.wk = Linear(registry, f"{name}.wk", d_model, d_model)
        self.wv = Linear(registry, f"{name}.wv", d_model, d_model)
        self.wo = Linear(registry, f"{name}.wo", d_model, d_model)

    def __call__(self, x, key_mask=None, capture=None):
        """x: (B, L, d); key_mask: (B, L) bool, True = attend to this key."""
        b, length, _ = x.shape

        def heads(t):
            t = T.reshape(t, (b, length, self.n_heads, self.d_head))
            return T.transpose(t, (0, 2, 1, 3))  # (B, H, L, dh)

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        mask = None
        if key_mask is not None:
            add = np.where(key_mask, 0.0, NEG_INF).astype(np.float32)
            mask = add[:, None, None, :]  # broadcast over heads and queries
        out, attn = T.scaled_dot_product_attention(q, k, v, mask=mask, return_weights=True)
        if capture is not None:
            capture.append(attn.data.copy())  # (B, H, L, L)
        out = T.transpose(out, (0, 2, 1, 3))
        out = T.reshape(out, (b, length, self.d_model))
        return self.wo(out)


class TransformerEncoderLayer:
    def __init__(self, registry, name, d_model, n_heads, d_ff, dropout=0.1):
        self.attn = MultiHeadSelfAttention(registry, f"{name}.attn", d_model, n_heads)
        self.ln1 = LayerNorm(registry, f"{name}.ln1", d_model)
        self.ln2 = LayerNorm(registry, f"{name}.ln2", d_model)
        self.ff1 = Linear(registry, f"{name}.ff1", d_model, d_ff)
        self.ff2 = Linear(registry, f"{name}.ff2", d_ff, d_model)
        self.dropout = dropout

    def __call__(self, x, key_mask=None, training=False, rng=None, capture=None):
        a = self.attn(self.ln1(x), key_mask=key_mask, capture=capture)
        x = T.add(x, T.dropout(a, self.dropout, training, rng))
        f = self.ff2(T.relu(self.ff1(self.ln2(x))))
        return T.add(x, T.dropout(f, self.dropout, training, rng))


class TransformerEncoder:
    """Pre-norm encoder stack with learned positional embeddings."""

    def __init__(self, registry, name, d_model, n_heads, d_ff, n_layers, max_len, dropout=0.1):
        self.pos = registry.param(f"{name}.pos", (max_len, d_model), init="zeros")
        self.layers = [
            TransformerEncoderLayer(registry, f"{name}.layer{i}", d_model, n_heads, d_ff, dropout)
            for i in range(n_layers)
        ]
        self.ln_out = LayerNorm(registry, f"{name}.ln_out", d_model)
        self.max_len = max_len

    def __call__(self, x, key_mask=None, training=False, rng=None, capture=None):
        b, length, _ = x.shape
        if length > self.max_len:
            raise ConfigError(f"sequence length {length} exceeds max_len {self.max_len}")
        pos = T.slice_axis(self.pos, 0, 0, length)
        x = T.add(x, T.reshape(pos, (1, length, x.shape[2])))
        for layer in self.layers:
            x = layer(x, key_mask=key_mask, training=training, rng=rng, capture=capture)
        return self.ln_out(x)
