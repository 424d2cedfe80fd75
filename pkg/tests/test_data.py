"""Ingestion, metadata vectorization, embeddings IO, featurizer, splits."""

import json

import numpy as np
import pytest

from spoilermoe.data import (
    Dataset,
    EmbeddingMatrix,
    MovieRecord,
    ReviewRecord,
    UserRecord,
    build_meta_vectors,
    hash_featurize,
    load_dataset,
    load_embeddings,
    save_dataset,
    save_embeddings,
    split_dataset,
)
from spoilermoe.errors import (
    ConfigError,
    DataFormatError,
    ReferentialIntegrityError,
    ShapeError,
)


def tiny_dataset(n_reviews=1):
    users = [
        UserRecord("u0", {"badge_count": 1.0, "review_count": float(n_reviews),
                          "description_length": 0.0},
                   review_ids=[f"r{i}" for i in range(n_reviews)])
    ]
    movies = [
        MovieRecord("m0", {"year": 2000.0, "is_adult": 0.0, "runtime": 100.0,
                           "rating": 7.0, "vote_count": 10.0, "synopsis_length": 5.0})
    ]
    reviews = [
        ReviewRecord(f"r{i}", "u0", "m0",
                     {"time": float(i), "helpful_vote_count": 1.0,
                      "total_vote_count": 2.0, "point": 5.0, "content_length": 100.0},
                     label=i % 2)
        for i in range(n_reviews)
    ]
    text = EmbeddingMatrix("review_text", n_reviews, 4,
                           np.arange(n_reviews * 4, dtype=np.float32).reshape(n_reviews, 4))
    syn = EmbeddingMatrix("movie_text", 1, 4, np.ones((1, 4), dtype=np.float32))
    return Dataset(users, movies, reviews, text, syn)


def test_minimal_dataset_counts():
    ds = tiny_dataset()
    assert ds.counts() == (1, 1, 1)


def test_dangling_movie_reference_rejected():
    users = [UserRecord("u0", {}, review_ids=["r0"])]
    movies = [MovieRecord("m0", {})]
    reviews = [ReviewRecord("r0", "u0", "NOPE", {})]
    with pytest.raises(ReferentialIntegrityError):
        Dataset(users, movies, reviews)


def test_empty_reviews_ok():
    ds = Dataset([UserRecord("u0", {})], [MovieRecord("m0", {})], [])
    assert ds.counts() == (1, 1, 0)


def test_roundtrip_byte_identical(tmp_path):
    ds = tiny_dataset(n_reviews=3)
    save_dataset(tmp_path / "a", ds)
    ds2 = load_dataset(tmp_path / "a")
    save_dataset(tmp_path / "b", ds2)
    for name in ("users.jsonl", "movies.jsonl", "reviews.jsonl",
                 "review_text.f32", "review_text.json", "movie_text.f32"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_jsonl_reports_line(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "users.jsonl").write_text('{"user_id": "u0", "metadata": {}}\n{oops\n')
    (d / "movies.jsonl").write_text("")
    (d / "reviews.jsonl").write_text("")
    with pytest.raises(DataFormatError) as exc:
        load_dataset(d, text_dim=4)
    assert "users.jsonl:2" in str(exc.value)


# --- embeddings --------------------------------------------------------------


def test_embedding_roundtrip(tmp_path):
    m = EmbeddingMatrix("review_text", 2, 3, np.arange(6, dtype=np.float32).reshape(2, 3))
    save_embeddings(tmp_path / "e.f32", m)
    back = load_embeddings(tmp_path / "e.f32", expected_rows=2, dim=3)
    assert (back.data == m.data).all()


def test_embedding_truncated_payload(tmp_path):
    m = EmbeddingMatrix("x", 2, 3, np.zeros((2, 3), dtype=np.float32))
    save_embeddings(tmp_path / "e.f32", m)
    raw = (tmp_path / "e.f32").read_bytes()
    (tmp_path / "e.f32").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError):
        load_embeddings(tmp_path / "e.f32")


def test_embedding_row_mismatch(tmp_path):
    m = EmbeddingMatrix("x", 2, 3, np.zeros((2, 3), dtype=np.float32))
    save_embeddings(tmp_path / "e.f32", m)
    with pytest.raises(ShapeError):
        load_embeddings(tmp_path / "e.f32", expected_rows=5)


# --- metadata ----------------------------------------------------------------


def test_meta_vectors_pad_with_minus_one():
    ds = tiny_dataset()
    table = build_meta_vectors(ds, meta_dim=6)
    # movie has 6 fields: no padding
    assert (table.movie != -1.0).all() or table.movie.shape[1] == 6
    # user has 3 fields: last 3 entries are the pad sentinel
    assert (table.user[:, 3:] == -1.0).all()
    assert table.user.shape == (1, 6)
    assert table.review[:, 5:].shape[1] == 1 and (table.review[:, 5:] == -1.0).all()


def test_meta_dim_too_small():
    ds = tiny_dataset()
    with pytest.raises(ConfigError):
        build_meta_vectors(ds, meta_dim=4)


def test_zero_variance_column_normalizes_to_zero():
    ds = tiny_dataset(n_reviews=3)
    table = build_meta_vectors(ds, meta_dim=6)
    # helpful_vote_count is constant 1.0 across train reviews -> column of zeros
    col = table.stats["review"]["fields"].index("helpful_vote_count")
    assert (table.review[:, col] == 0.0).all()


def test_normalization_uses_train_split_only():
    ds = tiny_dataset(n_reviews=10)
    for i, r in enumerate(ds.reviews):
        r.split = "train" if i < 5 else "val"
    t1 = build_meta_vectors(ds, meta_dim=6)
    # moving reviews between val and test must not change statistics
    for i, r in enumerate(ds.reviews):
        if i >= 5:
            r.split = "test"
    t2 = build_meta_vectors(ds, meta_dim=6)
    assert t1.stats == t2.stats
    assert (t1.review == t2.review).all()
    # but rewriting the train split does
    for i, r in enumerate(ds.reviews):
        r.split = "train" if i >= 5 else "val"
    t3 = build_meta_vectors(ds, meta_dim=6)
    assert t3.stats != t1.stats


# --- hash featurizer ----------------------------------------------------------


def test_hash_featurize_deterministic():
    a = hash_featurize("The Plot Twist was WILD", 32)
    b = hash_featurize("The Plot Twist was WILD", 32)
    assert (a == b).all()


def test_hash_featurize_empty_is_zero():
    assert (hash_featurize("", 16) == 0).all()


def test_hash_featurize_unit_norm():
    v = hash_featurize("some words in a review", 64)
    assert abs(np.linalg.norm(v) - 1.0) < 1e-6


def test_hash_featurize_decorrelates_random_sentences():
    rng = np.random.default_rng(0)
    vocab = [f"w{i}" for i in range(500)]
    sents = [" ".join(rng.choice(vocab, size=12)) for _ in range(100)]
    vecs = np.stack([hash_featurize(s, 256) for s in sents])
    sims = vecs @ vecs.T
    n = len(sents)
    off_diag = sims[np.triu_indices(n, k=1)]
    assert (off_diag < 0.9).mean() >= 0.95


# --- splits -------------------------------------------------------------------


def test_split_all_train():
    ds = tiny_dataset(n_reviews=5)
    split_dataset(ds, (1.0, 0.0, 0.0), seed=0)
    assert all(r.split == "train" for r in ds.reviews)


def test_split_exact_counts_and_determinism():
    ds = tiny_dataset(n_reviews=1000)
    split_dataset(ds, (0.8, 0.1, 0.1), seed=42)
    first = [r.split for r in ds.reviews]
    counts = {s: first.count(s) for s in ("train", "val", "test")}
    assert counts == {"train": 800, "val": 100, "test": 100}
    split_dataset(ds, (0.8, 0.1, 0.1), seed=42)
    assert [r.split for r in ds.reviews] == first


def test_split_bad_ratios():
    ds = tiny_dataset()
    with pytest.raises(ConfigError):
        split_dataset(ds, (0.5, 0.2, 0.2), seed=0)


def test_user_desc_rows_only_for_described_users(tmp_path):
    users = [
        UserRecord("u0", {"badge_count": 0.0, "review_count": 0.0, "description_length": 0.0}),
        UserRecord("u1", {"badge_count": 0.0, "review_count": 0.0, "description_length": 5.0},
                   description_text="hello"),
    ]
    ds = Dataset(users, [MovieRecord("m0", {"year": 0.0, "is_adult": 0.0, "runtime": 0.0,
                                            "rating": 0.0, "vote_count": 0.0,
                                            "synopsis_length": 0.0})], [],
                 review_text=EmbeddingMatrix("review_text", 0, 4, np.zeros((0, 4), np.float32)),
                 movie_text=EmbeddingMatrix("movie_text", 1, 4, np.zeros((1, 4), np.float32)),
                 user_desc=EmbeddingMatrix("user_desc", 1, 4, np.ones((1, 4), np.float32)))
    assert ds.user_desc_row == {1: 0}
    save_dataset(tmp_path / "d", ds)
    back = load_dataset(tmp_path / "d")
    assert back.user_desc.rows == 1
