"""User profile extraction via a pretext-trained sequence encoder.

Each user's sequence is [description slot, review_1 ... review_n] of raw
text embeddings in chronological order, truncated to the most recent
max_len - 1 reviews and zero-padded (with attention masking) to a fixed
length. Users without a description get a learnable first token. A
transformer encoder is pretrained with a per-review spoiler
classification head (loss only over train-split reviews) and the output
at position 0 becomes the user's frozen profile embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import EmbeddingMatrix
from .diffcore import AdamW, ParamRegistry, lr_exponential_step
from .diffcore import tensor as T
from .errors import ConfigError
from .nn import Linear, TransformerEncoder


@dataclass
class UserSequence:
    user_idx: int
    tokens: np.ndarray  # (max_len, d) float32; position 0 is the profile slot
    mask: np.ndarray  # (max_len,) bool; padded positions False
    has_desc: bool
    # (position, review_idx, in_train_split)
    review_positions: list[tuple[int, int, bool]] = field(default_factory=list)


def assemble_sequence(user_idx, review_indices, in_train, review_embeds, desc_embed, max_len):
    """Build one padded sequence; keeps the most recent max_len-1 reviews."""
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    d = review_embeds.shape[1]
    tokens = np.zeros((max_len, d), dtype=np.float32)
    mask = np.zeros(max_len, dtype=bool)
    mask[0] = True
    has_desc = desc_embed is not None
    if has_desc:
        tokens[0] = desc_embed
    keep = review_indices[-(max_len - 1) :]
    kept_train = in_train[-(max_len - 1) :]
    positions = []
    for j, (ridx, tr) in enumerate(zip(keep, kept_train)):
        pos = 1 + j
        tokens[pos] = review_embeds[ridx]
        mask[pos] = True
        positions.append((pos, int(ridx), bool(tr)))
    return UserSequence(user_idx, tokens, mask, has_desc, positions)


def build_user_sequences(dataset, max_len):
    """One UserSequence per user, in user order."""
    review_embeds = dataset.review_text.data
    seqs = []
    for ui, user in enumerate(dataset.users):
        ridx = [dataset.review_index[rid] for rid in user.review_ids]
        in_train = [dataset.reviews[i].split == "train" for i in ridx]
        desc = None
        if ui in dataset.user_desc_row and dataset.user_desc is not None:
            desc = dataset.user_desc.data[dataset.user_desc_row[ui]]
        seqs.append(
            assemble_sequence(ui, ridx, in_train, review_embeds, desc, max_len)
        )
    return seqs


class ProfileEncoder:
    """Pretext transformer; owns its ParamRegistry (separate from backbone)."""

    def __init__(self, d_model, n_heads, d_ff, n_layers, max_len, dropout=0.1, seed=0):
        self.d_model = d_model
        self.max_len = max_len
        self.dropout = dropout
        self.registry = ParamRegistry(seed)
        self.first_token = self.registry.param("profile.first_token", (d_model,))
        self.encoder = TransformerEncoder(
            self.registry, "profile.trm", d_model, n_heads, d_ff, n_layers, max_len, dropout
        )
        self.head = Linear(self.registry, "profile.head", d_model, 2)
        self.no_train_batches = 0  # warning counter

    def _embed(self, tokens, has_desc):
        """Substitute the learnable first token where no description exists."""
        base = T.Tensor(tokens)
        b, length, d = tokens.shape
        slot = np.zeros((1, length, 1), dtype=np.float32)
        slot[0, 0, 0] = 1.0
        replace = (~has_desc).astype(np.float32)[:, None, None] * slot  # (B, L, 1)
        keep = T.mul(base, T.Tensor(1.0 - replace))
        learned = T.mul(T.reshape(self.first_token, (1, 1, d)), T.Tensor(replace))
        return T.add(keep, learned)

    def encode(self, tokens, mask, has_desc, training=False, rng=None):
        x = self._embed(tokens, has_desc)
        return self.encoder(x, key_mask=mask, training=training, rng=rng)

    def pretext_loss(self, seqs, labels_by_review, training=True, rng=None):
        """Summed cross-entropy over train-split review positions.

        Returns (loss, n_positions); a batch with no train-split
        positions yields a constant zero loss and increments the
        warning counter (callers skip the optimizer step).
        """
        tokens = np.stack([s.tokens for s in seqs])
        mask = np.stack([s.mask for s in seqs])
        has_desc = np.array([s.has_desc for s in seqs], dtype=bool)
        flat_idx, labels = [], []
        length = tokens.shape[1]
        for i, s in enumerate(seqs):
            for pos, ridx, in_train in s.review_positions:
                if in_train:
                    flat_idx.append(i * length + pos)
                    labels.append(labels_by_review[ridx])
        if not flat_idx:
            self.no_train_batches += 1
            return T.Tensor(np.zeros((), dtype=np.float32)), 0
        out = self.encode(tokens, mask, has_desc, training=training, rng=rng)
        flat = T.reshape(out, (tokens.shape[0] * length, self.d_model))
        sel = T.gather_rows(flat, np.array(flat_idx, dtype=np.int64))
        losses = T.cross_entropy(self.head(sel), np.array(labels, dtype=np.int64))
        return T.tsum(losses), len(flat_idx)

    def extract(self, seqs, batch_size=64):
        """Profile embedding = encoder output at position 0, dropout off."""
        rows = np.zeros((len(seqs), self.d_model), dtype=np.float32)
        length = self.max_len
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            tokens = np.stack([s.tokens for s in chunk])
            mask = np.stack([s.mask for s in chunk])
            has_desc = np.array([s.has_desc for s in chunk], dtype=bool)
            out = self.encode(tokens, mask, has_desc, training=False)
            flat = T.reshape(out, (len(chunk) * length, self.d_model))
            first = T.gather_rows(flat, np.arange(len(chunk), dtype=np.int64) * length)
            rows[start : start + len(chunk)] = first.data
        return EmbeddingMatrix("user_profile", len(seqs), self.d_model, rows)


def train_pretext(encoder, seqs, labels_by_review, epochs=20, lr=1e-5, gamma=0.9,
                  weight_decay=1e-5, batch_size=32, seed=0):
    """AdamW pretext loop with per-epoch exponential LR decay."""
    opt = AdamW(encoder.registry, lr=lr, weight_decay=weight_decay)
    order_rng = np.random.default_rng([seed, 11])
    losses = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(seqs))
        drop_rng = np.random.default_rng([seed, 12, epoch])
        total, total_n = 0.0, 0
        for start in range(0, len(seqs), batch_size):
            batch = [seqs[i] for i in order[start : start + batch_size]]
            loss, n = encoder.pretext_loss(batch, labels_by_review, training=True, rng=drop_rng)
            if n == 0:
                continue
            encoder.registry.zero_grads()
            T.backward(loss)
            encoder.registry.fill_missing_grads()
            opt.step()
            total += loss.item()
            total_n += n
        losses.append(total / max(total_n, 1))
        opt.lr = lr_exponential_step(opt.lr, gamma)
    return losses
