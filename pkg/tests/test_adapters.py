import numpy as np
import pytest

from dancelab.adapters import (
    AdapterError,
    LoraPair,
    init_adapters,
    linear,
    lora_apply,
    lora_init,
    multi_head_attention,
    window_mask,
    zica_forward,
    zica_init,
)
from dancelab.numerics import grad_check, make_rng, precision, sum_, tanh


def rand(seed, *shape):
    return make_rng(seed).standard_normal(shape)


def test_zica_is_identity_at_init():
    w = zica_init(8, 5, 2, make_rng(0))
    v, a = rand(1, 3, 6, 8), rand(2, 3, 4, 5)
    np.testing.assert_array_equal(zica_forward(v, a, w).data, v.astype(np.float32))


def test_zica_output_projection_starts_at_zero():
    w = zica_init(8, 5, 2, make_rng(0))
    assert not w.wo.any()
    assert w.wq.std() > 0 and w.wk.std() > 0


def test_zica_nonzero_output_depends_on_audio():
    w = zica_init(8, 5, 2, make_rng(0))
    w.wo = rand(3, 8, 8)
    v = rand(1, 6, 8)
    out1 = zica_forward(v, rand(2, 4, 5), w).data
    out2 = zica_forward(v, rand(4, 4, 5), w).data
    assert np.abs(out1 - out2).max() > 1e-3


def test_zica_gate_switches_audio_per_example():
    w = zica_init(8, 5, 2, make_rng(0))
    w.wo = rand(3, 8, 8)
    v, a = rand(1, 2, 6, 8), rand(2, 2, 4, 5)
    out = zica_forward(v, a, w, gate=np.array([0.0, 1.0]).reshape(2, 1, 1)).data
    np.testing.assert_allclose(out[0], v[0], atol=1e-6)
    assert np.abs(out[1] - v[1]).max() > 1e-3


def test_zica_gradients_match_finite_differences():
    w = zica_init(4, 3, 2, make_rng(5))
    v, a = rand(6, 3, 4), rand(7, 2, 3)
    params = {"wq": rand(9, 4, 4), "wk": rand(10, 4, 3), "wv": rand(11, 4, 3), "wo": rand(8, 4, 4)}
    report = grad_check(lambda p: sum_(tanh(zica_forward(v, a, w, params=p))), params)
    assert report.passed, report.failures()[:2]


def test_zica_rejects_bad_shapes():
    with pytest.raises(AdapterError):
        zica_init(6, 4, 4, make_rng(0))
    w = zica_init(8, 5, 2, make_rng(0))
    with pytest.raises(AdapterError):
        zica_forward(rand(1, 6, 8), rand(2, 4, 3), w)
    with pytest.raises(AdapterError):
        zica_forward(rand(1, 6, 8), np.zeros((0, 5)), w)


def test_window_mask_limits_reach():
    m = window_mask(8, 8, 1)
    allowed = m == 0
    assert allowed.sum(axis=1).tolist() == [2, 3, 3, 3, 3, 3, 3, 2]
    assert (m[~allowed] < -1e8).all()


def test_windowed_attention_ignores_far_tokens():
    q, k, v = rand(1, 6, 4), rand(2, 6, 4), rand(3, 6, 4)
    mask = window_mask(6, 6, 0)
    v2 = v.copy()
    v2[5] += 10.0
    with precision(64):
        out1 = multi_head_attention(q, k, v, 2, mask).data
        out2 = multi_head_attention(q, k, v2, 2, mask).data
    np.testing.assert_allclose(out1[:5], out2[:5], atol=1e-12)
    # with a zero-radius window each frame copies its own value row
    np.testing.assert_allclose(out1, v, atol=1e-9)


def test_attention_matches_direct_single_head():
    q, k, v = rand(1, 3, 4), rand(2, 5, 4), rand(3, 5, 4)
    s = q @ k.T / 2.0
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    with precision(64):
        np.testing.assert_allclose(multi_head_attention(q, k, v, 1).data, p @ v, rtol=1e-10)


def test_lora_is_identity_at_init():
    pair = lora_init(6, 5, 2, 2.0, make_rng(0))
    w, x = rand(1, 5, 6), rand(2, 4, 6)
    np.testing.assert_array_equal(lora_apply(w, pair, x).data, linear(x, w).data)
    assert not pair.delta().any()


def test_lora_adds_scaled_low_rank_delta():
    pair = LoraPair(rand(3, 2, 6), rand(4, 5, 2), alpha=4.0)
    w, x = rand(1, 5, 6), rand(2, 4, 6)
    expected = x @ (w + 2.0 * pair.up @ pair.down).T
    with precision(64):
        np.testing.assert_allclose(lora_apply(w, pair, x).data, expected, rtol=1e-10)
    assert np.linalg.matrix_rank(pair.delta()) == 2


def test_lora_rank_bounds():
    with pytest.raises(AdapterError):
        lora_init(4, 3, 4, 4.0, make_rng(0))
    with pytest.raises(AdapterError):
        lora_init(4, 3, 0, 4.0, make_rng(0))
    with pytest.raises(AdapterError):
        LoraPair(np.ones((2, 4)), np.ones((3, 2)), alpha=0.0)


def test_lora_rejects_mismatched_weight():
    pair = lora_init(6, 5, 2, 2.0, make_rng(0))
    with pytest.raises(AdapterError):
        lora_apply(rand(1, 5, 7), pair, rand(2, 4, 7))


def test_adapter_set_layout():
    s = init_adapters(16, 4, 4, [5, 1, 1], 6, 4, None, make_rng(0))
    assert s.layers == (1, 5)
    assert len(s.lora) == 6 * 4
    assert all(p.alpha == 4.0 and p.scale == 1.0 for p in s.lora.values())
    names = s.arrays()
    assert "zica.5.wo" in names and "lora.0.q.up" in names
    clone = s.with_arrays({k: v * 2 for k, v in names.items()})
    np.testing.assert_array_equal(clone.arrays()["zica.1.wq"], 2 * names["zica.1.wq"])


def test_adapter_set_rejects_bad_layers_and_kind():
    with pytest.raises(AdapterError):
        init_adapters(16, 4, 4, [6], 6, 4, None, make_rng(0))
    with pytest.raises(AdapterError):
        init_adapters(16, 4, 4, [0], 6, 4, None, make_rng(0), kind="film")


def test_feature_addition_starts_at_zero():
    s = init_adapters(16, 4, 4, [0, 2], 4, 0, None, make_rng(0), kind="feature_addition")
    assert s.layers == (0, 2)
    assert not s.lora and not s.zica
    assert all(not w.any() for w in s.additive.values())


def test_duplicate_audio_tokens_split_attention_evenly():
    w = zica_init(8, 5, 2, make_rng(0))
    w.wo = rand(3, 8, 8)
    v, tok = rand(1, 6, 8), rand(2, 1, 5)
    once = zica_forward(v, tok, w).data
    twice = zica_forward(v, np.concatenate([tok, tok]), w).data
    np.testing.assert_allclose(twice, once, rtol=1e-5, atol=1e-6)


def test_permuting_duplicate_tokens_keeps_output():
    w = zica_init(8, 5, 2, make_rng(0))
    w.wo = rand(3, 8, 8)
    v, t = rand(1, 6, 8), rand(2, 2, 5)
    a = np.stack([t[0], t[1], t[0]])
    b = np.stack([t[0], t[0], t[1]])
    np.testing.assert_allclose(zica_forward(v, a, w).data, zica_forward(v, b, w).data, rtol=1e-5, atol=1e-6)
