"""Synthetic planted-signal dataset generator.

Labels are generated from three recoverable factors: a per-user spoiler
propensity (bimodal, most users sit near one of the two extremes), a
per-genre bias, and a per-review metadata latent that is written into
the review's content length. Review text embeddings are genre
prototypes plus a label-dependent offset plus noise, so each modality
can carry signal independently; zeroing a factor's weight removes its
signal entirely, which is what the ablation and robustness acceptance
runs rely on.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, MovieRecord, ReviewRecord, UserRecord, EmbeddingMatrix, split_dataset
from .errors import ConfigError


@dataclass
class SynthSpec:
    n_users: int = 300
    n_movies: int = 100
    n_reviews: int = 2000
    text_dim: int = 64
    n_genres: int = 4
    # label logit = a_user * logit(p_u) + b_genre * genre_bias + c_meta * s_meta + eps
    a_user: float = 4.0
    b_genre: float = 0.0
    c_meta: float = 0.0
    noise_std: float = 0.5
    # text embedding = genre prototype + text_label_scale * (2y-1) * dir + noise
    text_label_scale: float = 1.0
    text_noise_std: float = 0.5
    # badge_count = user_meta_signal * (2 p_u - 1) + small noise
    user_meta_signal: float = 0.0
    # None -> bimodal Beta mixture; (low, high) -> exact two-point propensities
    propensity_levels: tuple[float, float] | None = None
    desc_rate: float = 0.0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if min(self.n_users, self.n_movies, self.n_reviews) <= 0:
            raise ConfigError("synth: entity counts must be positive")
        if self.text_dim <= 0 or self.n_genres <= 0:
            raise ConfigError("synth: text_dim and n_genres must be positive")

    @classmethod
    def from_json(cls, path):
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if "propensity_levels" in raw and raw["propensity_levels"] is not None:
            raw["propensity_levels"] = tuple(raw["propensity_levels"])
        if "ratios" in raw:
            raw["ratios"] = tuple(raw["ratios"])
        return cls(**raw)

    def to_dict(self):
        return asdict(self)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def synth_generate(spec, seed):
    """Generate a fully split Dataset; bitwise deterministic for a seed."""
    rng = np.random.default_rng(seed)
    n_u, n_m, n_r = spec.n_users, spec.n_movies, spec.n_reviews

    prototypes = rng.standard_normal((spec.n_genres, spec.text_dim))
    label_dir = rng.standard_normal(spec.text_dim)
    label_dir /= np.linalg.norm(label_dir)
    genre_bias = np.linspace(-1.0, 1.0, spec.n_genres)

    # users
    if spec.propensity_levels is not None:
        lo, hi = spec.propensity_levels
        p_u = np.where(rng.random(n_u) < 0.5, lo, hi)
    else:
        low = rng.beta(2.0, 10.0, size=n_u)
        high = rng.beta(10.0, 2.0, size=n_u)
        p_u = np.where(rng.random(n_u) < 0.5, low, high)
    badge = spec.user_meta_signal * (2.0 * p_u - 1.0) + 0.1 * rng.standard_normal(n_u)
    has_desc = rng.random(n_u) < spec.desc_rate
    desc_embeds = rng.standard_normal((int(has_desc.sum()), spec.text_dim)) * 0.5

    # movies
    genres = rng.integers(0, spec.n_genres, size=n_m)
    years = rng.integers(1950, 2021, size=n_m).astype(float)
    runtimes = rng.normal(110.0, 20.0, size=n_m)
    ratings = rng.normal(6.5, 1.0, size=n_m)
    votes = np.abs(rng.normal(1000.0, 500.0, size=n_m))
    is_adult = (rng.random(n_m) < 0.05).astype(float)
    movie_text = (prototypes[genres] + 0.3 * rng.standard_normal((n_m, spec.text_dim))).astype(
        np.float32
    )

    # reviews
    r_user = rng.integers(0, n_u, size=n_r)
    r_movie = rng.integers(0, n_m, size=n_r)
    s_meta = rng.standard_normal(n_r)
    eps = spec.noise_std * rng.standard_normal(n_r) if spec.noise_std > 0 else np.zeros(n_r)
    p_clip = np.clip(p_u[r_user], 1e-3, 1.0 - 1e-3)
    logits = (
        spec.a_user * np.log(p_clip / (1.0 - p_clip))
        + spec.b_genre * genre_bias[genres[r_movie]]
        + spec.c_meta * s_meta
        + eps
    )
    labels = (rng.random(n_r) < _sigmoid(logits)).astype(int)
    review_text = (
        prototypes[genres[r_movie]]
        + spec.text_label_scale * (2.0 * labels[:, None] - 1.0) * label_dir
        + spec.text_noise_std * rng.standard_normal((n_r, spec.text_dim))
    ).astype(np.float32)
    helpful = np.abs(rng.normal(5.0, 3.0, size=n_r))
    total = helpful + np.abs(rng.normal(5.0, 3.0, size=n_r))
    points = rng.integers(1, 11, size=n_r).astype(float)
    content_len = 250.0 + 100.0 * s_meta

    reviews = []
    per_user_reviews = [[] for _ in range(n_u)]
    for i in range(n_r):
        rid = f"r{i}"
        reviews.append(
            ReviewRecord(
                review_id=rid,
                user_id=f"u{r_user[i]}",
                movie_id=f"m{r_movie[i]}",
                metadata={
                    "time": float(i),
                    "helpful_vote_count": float(helpful[i]),
                    "total_vote_count": float(total[i]),
                    "point": float(points[i]),
                    "content_length": float(content_len[i]),
                },
                text="",
                label=int(labels[i]),
            )
        )
        per_user_reviews[r_user[i]].append(rid)

    users = []
    for i in range(n_u):
        desc = f"long time reviewer number {i}" if has_desc[i] else None
        users.append(
            UserRecord(
                user_id=f"u{i}",
                metadata={
                    "badge_count": float(badge[i]),
                    "review_count": float(len(per_user_reviews[i])),
                    "description_length": float(len(desc) if desc else 0.0),
                },
                description_text=desc,
                review_ids=per_user_reviews[i],
            )
        )

    movies = [
        MovieRecord(
            movie_id=f"m{i}",
            metadata={
                "year": float(years[i]),
                "is_adult": float(is_adult[i]),
                "runtime": float(runtimes[i]),
                "rating": float(ratings[i]),
                "vote_count": float(votes[i]),
                "synopsis_length": 0.0,
            },
            synopsis_text="",
            genre=int(genres[i]),
        )
        for i in range(n_m)
    ]

    ds = Dataset(
        users,
        movies,
        reviews,
        review_text=EmbeddingMatrix("review_text", n_r, spec.text_dim, review_text),
        movie_text=EmbeddingMatrix("movie_text", n_m, spec.text_dim, movie_text),
        user_desc=(
            EmbeddingMatrix("user_desc", int(has_desc.sum()), spec.text_dim, desc_embeds.astype(np.float32))
            if has_desc.any()
            else None
        ),
    )
    split_dataset(ds, spec.ratios, seed)
    # ground truth factors, kept out of the record tables; tests and the
    # profile probe read them from here
    ds.truth = {"p_u": p_u, "genres": genres, "s_meta": s_meta}
    return ds
