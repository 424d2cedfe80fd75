"""Expert fusion: transformer over the 3-token modality sequence.

Token order is [meta, text, graph]. A learned 3-slot positional
embedding (inside the encoder) breaks permutation equivariance so the
modalities keep distinct roles. The encoded sequence is flattened and
classified by a linear head. Pooling baselines for the ablations:
concatenate, mean_pool, max_pool, each with their own linear head.
"""

from __future__ import annotations

import numpy as np

from .diffcore import tensor as T
from .errors import ConfigError
from .nn import Linear, TransformerEncoder

FUSE_MODES = ("transformer", "concatenate", "mean_pool", "max_pool")
# token position of each modality in the fused sequence
TOKEN_ORDER = ("meta", "text", "graph")


class FusionLayer:
    def __init__(self, registry, name, d_model, n_heads, d_ff, n_layers, dropout=0.2,
                 mode="transformer"):
        if mode not in FUSE_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSE_MODES}")
        self.mode = mode
        self.d_model = d_model
        if mode == "transformer":
            self.encoder = TransformerEncoder(
                registry, f"{name}.trm", d_model, n_heads, d_ff, n_layers, max_len=3,
                dropout=dropout,
            )
            self.head = Linear(registry, f"{name}.head", 3 * d_model, 2)
        elif mode == "concatenate":
            self.head = Linear(registry, f"{name}.head", 3 * d_model, 2)
        else:
            self.head = Linear(registry, f"{name}.head", d_model, 2)

    def __call__(self, z_meta, z_text, z_graph, training=False, rng=None,
                 capture_attention=False):
        """Returns (logits (B, 2), attention list per layer of (B, H, 3, 3) or None)."""
        if self.mode == "transformer":
            b = z_meta.shape[0]
            tokens = T.concat(
                [T.reshape(z, (b, 1, self.d_model)) for z in (z_meta, z_text, z_graph)], axis=1
            )
            capture = [] if capture_attention else None
            v = self.encoder(tokens, training=training, rng=rng, capture=capture)
            logits = self.head(T.flatten(v))
            return logits, capture
        if self.mode == "concatenate":
            return self.head(T.concat([z_meta, z_text, z_graph], axis=1)), None
        if self.mode == "mean_pool":
            third = T.Tensor(np.array(1.0 / 3.0, dtype=z_meta.dtype))
            pooled = T.mul(T.add(T.add(z_meta, z_text), z_graph), third)
            return self.head(pooled), None
        pooled = T.maximum(T.maximum(z_meta, z_text), z_graph)
        return self.head(pooled), None


def average_fusion_attention(per_batch_captures):
    """Average captured attention over layers, heads, then samples.

    ``per_batch_captures`` is a list (one entry per batch) of per-layer
    lists of (B, H, 3, 3) arrays. Returns the 3x3 matrix reordered to
    (graph, text, meta) on both axes, matching the reporting convention.
    """
    total = np.zeros((3, 3), dtype=np.float64)
    count = 0
    for layers in per_batch_captures:
        if not layers:
            continue
        # (L, B, H, 3, 3) -> layer/head means, then accumulate per sample
        stacked = np.stack(layers)
        per_sample = stacked.mean(axis=(0, 2))  # (B, 3, 3)
        total += per_sample.sum(axis=0)
        count += per_sample.shape[0]
    if count == 0:
        return None
    avg = total / count
    perm = [TOKEN_ORDER.index(m) for m in ("graph", "text", "meta")]
    return avg[np.ix_(perm, perm)]
