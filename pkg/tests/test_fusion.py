"""Fusion transformer, pooling baselines, attention averaging."""

import numpy as np
import pytest

from spoilermoe.diffcore import ParamRegistry
from spoilermoe.diffcore import tensor as T
from spoilermoe.errors import ConfigError
from spoilermoe.fusion import FusionLayer, average_fusion_attention


def _layer(mode="transformer", d=16, seed=0, dtype=np.float32, layers=2, heads=4):
    reg = ParamRegistry(seed, dtype=dtype)
    return FusionLayer(reg, "fusion", d, heads, 2 * d, layers, dropout=0.1, mode=mode), reg


def _triple(b=4, d=16, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return tuple(T.Tensor(rng.standard_normal((b, d)).astype(dtype)) for _ in range(3))


def test_unknown_mode_rejected():
    with pytest.raises(ConfigError):
        _layer(mode="bilinear")


def test_paper_scale_flatten_dims():
    layer, _ = _layer(d=256, layers=4, heads=4)
    zm, zt, zg = _triple(b=2, d=256)
    logits, _ = layer(zm, zt, zg)
    assert logits.shape == (2, 2)
    assert layer.head.w.shape == (768, 2)


def test_attention_rows_stochastic():
    layer, _ = _layer()
    zm, zt, zg = _triple()
    _, caps = layer(zm, zt, zg, capture_attention=True)
    assert len(caps) == 2  # one per layer
    for a in caps:
        assert a.shape[-2:] == (3, 3)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_token_permutation_changes_logits():
    layer, _ = _layer(seed=3)
    zm, zt, zg = _triple(seed=4)
    a, _ = layer(zm, zt, zg)
    b, _ = layer(zg, zt, zm)
    assert np.abs(a.data - b.data).max() > 1e-4


def test_mean_pool_of_identical_vectors_is_head_of_vector():
    layer, _ = _layer(mode="mean_pool", dtype=np.float64)
    v = T.Tensor(np.random.default_rng(0).standard_normal((3, 16)))
    logits, _ = layer(v, v, v)
    want = v.data @ layer.head.w.data + layer.head.b.data
    np.testing.assert_allclose(logits.data, want, atol=1e-9)


def test_max_pool_dominance():
    layer, _ = _layer(mode="max_pool", dtype=np.float64)
    rng = np.random.default_rng(1)
    zm = T.Tensor(np.abs(rng.standard_normal((3, 16))) + 5.0)
    zt = T.Tensor(rng.standard_normal((3, 16)))
    zg = T.Tensor(rng.standard_normal((3, 16)))
    logits, _ = layer(zm, zt, zg)
    want = zm.data @ layer.head.w.data + layer.head.b.data
    np.testing.assert_allclose(logits.data, want, atol=1e-9)


def test_concat_head_input_dim():
    layer, _ = _layer(mode="concatenate", d=16)
    assert layer.head.w.shape == (48, 2)
    zm, zt, zg = _triple()
    logits, _ = layer(zm, zt, zg)
    assert logits.shape == (4, 2)


def test_output_sensitive_to_every_token():
    layer, _ = _layer(seed=5, dtype=np.float64)
    zm, zt, zg = _triple(b=2, seed=6, dtype=np.float64)
    base, _ = layer(zm, zt, zg)
    bump = np.random.default_rng(9).standard_normal(16)  # non-constant: layer
    for k in range(3):  # norm is blind to uniform shifts
        zs = [T.Tensor(z.data.copy()) for z in (zm, zt, zg)]
        zs[k] = T.Tensor(zs[k].data + bump)
        alt, _ = layer(*zs)
        assert np.abs(alt.data - base.data).max() > 1e-8


def test_head_gradient_matches_finite_differences():
    layer, reg = _layer(seed=7, dtype=np.float64, layers=1, heads=2, d=8)
    zm, zt, zg = _triple(b=3, d=8, seed=8, dtype=np.float64)
    labels = np.array([0, 1, 1])

    def loss_value():
        logits, _ = layer(zm, zt, zg)
        return T.tsum(T.cross_entropy(logits, labels))

    loss = loss_value()
    reg.zero_grads()
    T.backward(loss)
    w = reg["fusion.head.w"]
    h = 1e-6
    flat = w.data.reshape(-1)
    for i in (0, 5, 17, 30):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_value().item()
        flat[i] = orig - h
        fm = loss_value().item()
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        assert abs(w.grad.reshape(-1)[i] - num) <= 1e-4 * max(1.0, abs(num))


def test_average_fusion_attention_row_stochastic_and_reordered():
    rng = np.random.default_rng(0)

    def random_stochastic(b):
        a = rng.random((b, 2, 3, 3))
        return a / a.sum(axis=-1, keepdims=True)

    caps = [[random_stochastic(4), random_stochastic(4)], [random_stochastic(2)] * 2]
    avg = average_fusion_attention(caps)
    assert avg.shape == (3, 3)
    np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-5)


def test_average_fusion_attention_empty():
    assert average_fusion_attention([]) is None
