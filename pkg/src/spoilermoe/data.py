"""Dataset records, JSONL ingestion, metadata vectorization, embeddings.

On-disk layout of a dataset directory::

    users.jsonl    one UserRecord per line
    movies.jsonl   one MovieRecord per line
    reviews.jsonl  one ReviewRecord per line
    review_text.f32 / review_text.json   per-review text embeddings
    movie_text.f32  / movie_text.json    per-movie synopsis embeddings
    user_desc.f32   / user_desc.json     optional; one row per user that
                                         HAS a description, in user order

Embedding payloads are raw little-endian float32, row-major, with a JSON
sidecar ``{"rows": R, "dim": D, "kind": "..."}``. When embedding files
are absent, text fields are hash-featurized on load.

Metadata field order is fixed per node type (see ``*_META_FIELDS``);
vectors are z-scored per column first and then right-padded with -1 up
to ``meta_dim``, so the pad sentinel is never distorted by statistics.
Review statistics come from the training split only; user and movie
statistics come from all entities (those node types are never split).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ReferentialIntegrityError, ShapeError

USER_META_FIELDS = ("badge_count", "review_count", "description_length")
MOVIE_META_FIELDS = ("year", "is_adult", "runtime", "rating", "vote_count", "synopsis_length")
REVIEW_META_FIELDS = ("time", "helpful_vote_count", "total_vote_count", "point", "content_length")

SPLITS = ("train", "val", "test")

STD_FLOOR = 1e-6


@dataclass
class UserRecord:
    user_id: str
    metadata: dict[str, float]
    description_text: str | None = None
    review_ids: list[str] = field(default_factory=list)


@dataclass
class MovieRecord:
    movie_id: str
    metadata: dict[str, float]
    synopsis_text: str = ""
    genre: int | None = None


@dataclass
class ReviewRecord:
    review_id: str
    user_id: str
    movie_id: str
    metadata: dict[str, float]
    text: str = ""
    label: int = 0
    split: str = "train"


@dataclass
class EmbeddingMatrix:
    kind: str
    rows: int
    dim: int
    data: np.ndarray  # (rows, dim) float32

    def __post_init__(self):
        if self.data.shape != (self.rows, self.dim):
            raise ShapeError(
                f"embedding {self.kind!r}: payload shape {self.data.shape} != ({self.rows}, {self.dim})"
            )


@dataclass
class MetaTable:
    meta_dim: int
    user: np.ndarray
    movie: np.ndarray
    review: np.ndarray
    stats: dict[str, dict[str, list[float]]]


class Dataset:
    """Cross-referenced record tables plus embedding matrices."""

    def __init__(self, users, movies, reviews, review_text=None, movie_text=None, user_desc=None):
        self.users: list[UserRecord] = users
        self.movies: list[MovieRecord] = movies
        self.reviews: list[ReviewRecord] = reviews
        self.user_index = {u.user_id: i for i, u in enumerate(users)}
        self.movie_index = {m.movie_id: i for i, m in enumerate(movies)}
        self.review_index = {r.review_id: i for i, r in enumerate(reviews)}
        self.review_text = review_text
        self.movie_text = movie_text
        self.user_desc = user_desc
        # row in user_desc for each user that has a description
        self.user_desc_row = {}
        row = 0
        for i, u in enumerate(users):
            if u.description_text:
                self.user_desc_row[i] = row
                row += 1
        self._validate()

    def _validate(self):
        for r in self.reviews:
            if r.user_id not in self.user_index:
                raise ReferentialIntegrityError(
                    f"review {r.review_id!r} references unknown user {r.user_id!r}"
                )
            if r.movie_id not in self.movie_index:
                raise ReferentialIntegrityError(
                    f"review {r.review_id!r} references unknown movie {r.movie_id!r}"
                )
            if r.label not in (0, 1):
                raise DataFormatError(f"review {r.review_id!r}: label must be 0 or 1")
            if r.split not in SPLITS:
                raise DataFormatError(f"review {r.review_id!r}: unknown split {r.split!r}")
        for u in self.users:
            for rid in u.review_ids:
                if rid not in self.review_index:
                    raise ReferentialIntegrityError(
                        f"user {u.user_id!r} references unknown review {rid!r}"
                    )
        if self.review_text is not None and self.review_text.rows != len(self.reviews):
            raise ShapeError(
                f"review_text rows {self.review_text.rows} != review count {len(self.reviews)}"
            )
        if self.movie_text is not None and self.movie_text.rows != len(self.movies):
            raise ShapeError(
                f"movie_text rows {self.movie_text.rows} != movie count {len(self.movies)}"
            )
        n_desc = sum(1 for u in self.users if u.description_text)
        if self.user_desc is not None and self.user_desc.rows != n_desc:
            raise ShapeError(
                f"user_desc rows {self.user_desc.rows} != users with descriptions {n_desc}"
            )

    def counts(self):
        return len(self.users), len(self.movies), len(self.reviews)

    def split_ids(self, split):
        return [i for i, r in enumerate(self.reviews) if r.split == split]

    def labels(self):
        return np.array([r.label for r in self.reviews], dtype=np.int64)


# ---------------------------------------------------------------------------
# JSONL + embedding IO
# ---------------------------------------------------------------------------


def _read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return records


def _write_jsonl(path, dicts):
    with open(path, "w", encoding="utf-8") as fh:
        for d in dicts:
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def load_embeddings(path, expected_rows=None, dim=None, kind=None):
    """Raw little-endian float32 payload + JSON sidecar {rows, dim}."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise DataFormatError(f"embedding sidecar missing: {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    rows, d = int(meta["rows"]), int(meta["dim"])
    payload = path.read_bytes()
    if len(payload) != rows * d * 4:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {rows * d * 4} ({rows}x{d} float32)"
        )
    if expected_rows is not None and rows != expected_rows:
        raise ShapeError(f"{path}: rows {rows} != expected {expected_rows}")
    if dim is not None and d != dim:
        raise ShapeError(f"{path}: dim {d} != expected {dim}")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, d).copy()
    return EmbeddingMatrix(kind=kind or meta.get("kind", path.stem), rows=rows, dim=d, data=data)


def save_embeddings(path, matrix):
    path = Path(path)
    arr = np.ascontiguousarray(matrix.data, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"rows": matrix.rows, "dim": matrix.dim, "kind": matrix.kind}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(dir_path, text_dim=None):
    """Load a dataset directory; hash-featurize text when embeddings are absent.

    ``text_dim`` is only required for the hash fallback.
    """
    d = Path(dir_path)
    users = [
        UserRecord(
            user_id=r["user_id"],
            metadata={k: float(v) for k, v in r.get("metadata", {}).items()},
            description_text=r.get("description_text") or None,
            review_ids=list(r.get("review_ids", [])),
        )
        for r in _read_jsonl(d / "users.jsonl")
    ]
    movies = [
        MovieRecord(
            movie_id=r["movie_id"],
            metadata={k: float(v) for k, v in r.get("metadata", {}).items()},
            synopsis_text=r.get("synopsis_text", ""),
            genre=r.get("genre"),
        )
        for r in _read_jsonl(d / "movies.jsonl")
    ]
    reviews = [
        ReviewRecord(
            review_id=r["review_id"],
            user_id=r["user_id"],
            movie_id=r["movie_id"],
            metadata={k: float(v) for k, v in r.get("metadata", {}).items()},
            text=r.get("text", ""),
            label=int(r["label"]),
            split=r.get("split", "train"),
        )
        for r in _read_jsonl(d / "reviews.jsonl")
    ]

    def _load_or_hash(name, rows, texts, kind):
        path = d / f"{name}.f32"
        if path.exists():
            return load_embeddings(path, expected_rows=rows, kind=kind)
        if text_dim is None:
            raise ConfigError(
                f"{path} is missing and no text_dim given for the hash featurizer fallback"
            )
        data = np.stack([hash_featurize(t, text_dim) for t in texts]) if rows else np.zeros(
            (0, text_dim), dtype=np.float32
        )
        return EmbeddingMatrix(kind=kind, rows=rows, dim=text_dim, data=data)

    review_text = _load_or_hash("review_text", len(reviews), [r.text for r in reviews], "review_text")
    movie_text = _load_or_hash("movie_text", len(movies), [m.synopsis_text for m in movies], "movie_text")

    user_desc = None
    desc_path = d / "user_desc.f32"
    have_desc = [u for u in users if u.description_text]
    if desc_path.exists():
        user_desc = load_embeddings(desc_path, expected_rows=len(have_desc), kind="user_desc")
    elif have_desc:
        if text_dim is None:
            raise ConfigError("users have descriptions but no user_desc.f32 and no text_dim given")
        data = np.stack([hash_featurize(u.description_text, text_dim) for u in have_desc])
        user_desc = EmbeddingMatrix(kind="user_desc", rows=len(have_desc), dim=text_dim, data=data)

    return Dataset(users, movies, reviews, review_text, movie_text, user_desc)


def save_dataset(dir_path, dataset):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    _write_jsonl(
        d / "users.jsonl",
        [
            {
                "user_id": u.user_id,
                "metadata": u.metadata,
                "description_text": u.description_text,
                "review_ids": u.review_ids,
            }
            for u in dataset.users
        ],
    )
    _write_jsonl(
        d / "movies.jsonl",
        [
            {
                "movie_id": m.movie_id,
                "metadata": m.metadata,
                "synopsis_text": m.synopsis_text,
                "genre": m.genre,
            }
            for m in dataset.movies
        ],
    )
    _write_jsonl(
        d / "reviews.jsonl",
        [
            {
                "review_id": r.review_id,
                "user_id": r.user_id,
                "movie_id": r.movie_id,
                "metadata": r.metadata,
                "text": r.text,
                "label": r.label,
                "split": r.split,
            }
            for r in dataset.reviews
        ],
    )
    if dataset.review_text is not None:
        save_embeddings(d / "review_text.f32", dataset.review_text)
    if dataset.movie_text is not None:
        save_embeddings(d / "movie_text.f32", dataset.movie_text)
    if dataset.user_desc is not None:
        save_embeddings(d / "user_desc.f32", dataset.user_desc)


# ---------------------------------------------------------------------------
# metadata vectorization
# ---------------------------------------------------------------------------


def _field_order(records, canonical):
    """Fields actually present, canonical order first, extras sorted after."""
    if not records:
        return []
    present = set(records[0].metadata.keys())
    for r in records[1:]:
        if set(r.metadata.keys()) != present:
            raise DataFormatError(
                f"inconsistent metadata fields: {sorted(set(r.metadata) ^ present)}"
            )
    ordered = [f for f in canonical if f in present]
    ordered += sorted(present - set(canonical))
    return ordered


def _vectorize(records, fields, mean, std, meta_dim):
    out = np.full((len(records), meta_dim), -1.0, dtype=np.float32)
    if not fields:
        return out
    raw = np.array([[r.metadata[f] for f in fields] for r in records], dtype=np.float64)
    normed = (raw - mean) / np.maximum(std, STD_FLOOR)
    out[:, : len(fields)] = normed.astype(np.float32)
    return out


def build_meta_vectors(dataset, meta_dim):
    """Fixed-order, z-scored, -1-padded metadata matrix per node type."""
    u_fields = _field_order(dataset.users, USER_META_FIELDS)
    m_fields = _field_order(dataset.movies, MOVIE_META_FIELDS)
    r_fields = _field_order(dataset.reviews, REVIEW_META_FIELDS)
    widest = max((len(f) for f in (u_fields, m_fields, r_fields)), default=0)
    if meta_dim < widest:
        raise ConfigError(f"meta_dim={meta_dim} is smaller than the widest field set ({widest})")

    def stats_over(records, fields):
        if not records or not fields:
            return np.zeros(0), np.ones(0)
        raw = np.array([[r.metadata[f] for f in fields] for r in records], dtype=np.float64)
        return raw.mean(axis=0), raw.std(axis=0)

    train = [r for r in dataset.reviews if r.split == "train"]
    u_mean, u_std = stats_over(dataset.users, u_fields)
    m_mean, m_std = stats_over(dataset.movies, m_fields)
    r_mean, r_std = stats_over(train, r_fields)

    return MetaTable(
        meta_dim=meta_dim,
        user=_vectorize(dataset.users, u_fields, u_mean, u_std, meta_dim),
        movie=_vectorize(dataset.movies, m_fields, m_mean, m_std, meta_dim),
        review=_vectorize(dataset.reviews, r_fields, r_mean, r_std, meta_dim),
        stats={
            "user": {"fields": u_fields, "mean": u_mean.tolist(), "std": u_std.tolist()},
            "movie": {"fields": m_fields, "mean": m_mean.tolist(), "std": m_std.tolist()},
            "review": {"fields": r_fields, "mean": r_mean.tolist(), "std": r_std.tolist()},
        },
    )


# ---------------------------------------------------------------------------
# hashed bag-of-words featurizer (deterministic PLM stand-in)
# ---------------------------------------------------------------------------


def _token_hash(token):
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def hash_featurize(text, dim):
    """L2-normalized signed hashed bag of words; empty text -> zero vector."""
    if dim <= 0:
        raise ConfigError(f"hash_featurize: dim must be positive, got {dim}")
    vec = np.zeros(dim, dtype=np.float32)
    if text:
        for token in text.lower().split():
            h = _token_hash(token)
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            vec[h % dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
    return vec


# ---------------------------------------------------------------------------
# split assignment
# ---------------------------------------------------------------------------


def split_dataset(dataset, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign reviews to train/val/test by a seeded shuffle (in place).

    Users and movies are not split; they live in the shared graph.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    n = len(dataset.reviews)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(ratios[0] * n)
    n_val = int(ratios[1] * n)
    for pos, idx in enumerate(order):
        if pos < n_train:
            dataset.reviews[idx].split = "train"
        elif pos < n_train + n_val:
            dataset.reviews[idx].split = "val"
        else:
            dataset.reviews[idx].split = "test"
    return dataset
