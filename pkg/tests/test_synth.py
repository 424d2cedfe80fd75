"""Planted-signal generator: determinism, label statistics, recoverable factors."""

import numpy as np
import pytest

from spoilermoe.data import save_dataset
from spoilermoe.errors import ConfigError
from spoilermoe.synth import SynthSpec, synth_generate


def test_no_signal_no_noise_gives_unbiased_labels():
    spec = SynthSpec(n_users=200, n_movies=50, n_reviews=10000, a_user=0.0,
                     b_genre=0.0, c_meta=0.0, noise_std=0.0)
    ds = synth_generate(spec, 3)
    assert abs(ds.labels().mean() - 0.5) < 0.05


def test_user_signal_correlates_with_propensity():
    spec = SynthSpec(n_users=150, n_movies=40, n_reviews=6000, a_user=4.0,
                     b_genre=0.0, c_meta=0.0)
    ds = synth_generate(spec, 5)
    labels = ds.labels()
    rates, props = [], []
    for ui, user in enumerate(ds.users):
        idx = [ds.review_index[r] for r in user.review_ids]
        if len(idx) < 5:
            continue
        rates.append(labels[idx].mean())
        props.append(ds.truth["p_u"][ui])
    r = np.corrcoef(rates, props)[0, 1]
    assert r > 0.7


def test_same_seed_bitwise_identical_files(tmp_path):
    spec = SynthSpec(n_users=30, n_movies=10, n_reviews=200)
    save_dataset(tmp_path / "a", synth_generate(spec, 9))
    save_dataset(tmp_path / "b", synth_generate(spec, 9))
    for name in ("users.jsonl", "movies.jsonl", "reviews.jsonl",
                 "review_text.f32", "movie_text.f32"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_nonpositive_counts_rejected():
    with pytest.raises(ConfigError):
        SynthSpec(n_users=0)


def test_review_ids_are_chronological():
    ds = synth_generate(SynthSpec(n_users=20, n_movies=10, n_reviews=300), 1)
    for user in ds.users:
        times = [ds.reviews[ds.review_index[r]].metadata["time"] for r in user.review_ids]
        assert times == sorted(times)


def test_two_point_propensities():
    spec = SynthSpec(n_users=100, n_movies=20, n_reviews=500,
                     propensity_levels=(0.05, 0.95))
    ds = synth_generate(spec, 2)
    assert set(np.round(ds.truth["p_u"], 2)) <= {0.05, 0.95}


def test_meta_latent_written_into_content_length():
    ds = synth_generate(SynthSpec(n_users=30, n_movies=10, n_reviews=400, c_meta=2.0), 4)
    lengths = np.array([r.metadata["content_length"] for r in ds.reviews])
    np.testing.assert_allclose(lengths, 250.0 + 100.0 * ds.truth["s_meta"], rtol=1e-6)


def test_user_meta_signal_encodes_propensity():
    ds = synth_generate(
        SynthSpec(n_users=200, n_movies=20, n_reviews=400, user_meta_signal=1.0), 6
    )
    badges = np.array([u.metadata["badge_count"] for u in ds.users])
    r = np.corrcoef(badges, ds.truth["p_u"])[0, 1]
    assert r > 0.9


def test_spec_json_roundtrip(tmp_path):
    import json

    spec = SynthSpec(n_users=10, n_movies=5, n_reviews=20, propensity_levels=(0.1, 0.9))
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    again = SynthSpec.from_json(path)
    assert again == spec
