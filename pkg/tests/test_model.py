import math

import numpy as np
import pytest

from resetox.model import (
    BOS,
    LengthError,
    ModelConfig,
    VocabularyError,
    decode_step,
    encode,
    forward_logits,
    init_params,
    self_attention,
)
from resetox.tensor import ContractError, DimensionError, Tensor


def test_config_invariants():
    cfg = ModelConfig()
    assert cfg.d_model == cfg.n_heads * cfg.d_k
    with pytest.raises(ContractError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ContractError):
        ModelConfig(max_len=99)
    with pytest.raises(ContractError):
        ModelConfig(n_layers_dec=0)


class TestSelfAttention:
    def test_single_position_returns_its_value(self):
        rng = np.random.default_rng(0)
        q, k, v = rng.standard_normal((4, 3)), rng.standard_normal((4, 1)), rng.standard_normal((5, 1))
        out = self_attention(Tensor(q), Tensor(k), Tensor(v), 4).data
        np.testing.assert_array_equal(out, np.repeat(v, 3, axis=1))

    def test_identical_keys_split_evenly(self):
        rng = np.random.default_rng(1)
        key = rng.standard_normal((4, 1))
        k = np.hstack([key, key])
        v = np.array([[1.0, 3.0]])
        for _ in range(5):
            q = rng.standard_normal((4, 1)) * 10
            out = self_attention(Tensor(q), Tensor(k), Tensor(v), 4).data
            assert out[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_scaling_by_sqrt_dk(self):
        rng = np.random.default_rng(2)
        q, k = rng.standard_normal((4, 1)), rng.standard_normal((4, 3))
        v = np.eye(3)  # output column equals the attention weights
        for d_k in (4, 8):
            s = (k.T @ q)[:, 0] / math.sqrt(d_k)
            w = np.exp(s - s.max())
            w /= w.sum()
            out = self_attention(Tensor(q), Tensor(k), Tensor(v), d_k).data[:, 0]
            np.testing.assert_allclose(out, w, atol=1e-14)

    def test_causal_mask_hides_future_keys(self):
        rng = np.random.default_rng(3)
        q, k = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        v = np.eye(3)
        w = self_attention(Tensor(q), Tensor(k), Tensor(v), 2, causal_mask=True).data
        assert w[1, 0] == 0 and w[2, 0] == 0 and w[2, 1] == 0
        np.testing.assert_allclose(w.sum(axis=0), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            self_attention(Tensor(np.ones((4, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones((5, 2))), 4)


class TestEncode:
    def test_deterministic(self, tiny_params):
        _, a = encode([4, 5, 6], tiny_params)
        _, b = encode([4, 5, 6], tiny_params)
        for (ka, va), (kb, vb) in zip(a.cross_kv, b.cross_kv):
            np.testing.assert_array_equal(ka, kb)
            np.testing.assert_array_equal(va, vb)

    def test_single_token_extent(self, tiny_params):
        _, ctx = encode([7], tiny_params)
        assert ctx.source_length == 1
        assert ctx.length == 0

    def test_positional_encoding_matters(self, tiny_params):
        enc_a, _ = encode([4, 9, 6], tiny_params)
        enc_b, _ = encode([9, 4, 6], tiny_params)
        assert not np.allclose(enc_a[0], enc_b[1])

    def test_errors(self, tiny_params):
        with pytest.raises(VocabularyError):
            encode([1, 99], tiny_params)
        with pytest.raises(ContractError):
            encode([], tiny_params)


class TestDecodeStep:
    def test_distribution_sums_to_one(self, tiny_params):
        _, ctx = encode([4, 5], tiny_params)
        d, ctx2 = decode_step(BOS, ctx, tiny_params)
        assert d.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(d.probs >= 0)
        assert ctx2.length == 1 and ctx.length == 0

    def test_cache_consistency_with_full_forward(self, tiny_params):
        rng = np.random.default_rng(0)
        src = list(rng.integers(4, 24, size=6))
        prefix = list(rng.integers(4, 24, size=12))
        full = forward_logits(src, [BOS] + prefix, tiny_params)
        _, ctx = encode(src, tiny_params)
        for i, tok in enumerate([BOS] + prefix):
            d, ctx = decode_step(tok, ctx, tiny_params)
            assert np.max(np.abs(d.logits - full[i])) < 1e-9

    def test_copies_evolve_independently(self, tiny_params):
        _, ctx = encode([4, 5, 6], tiny_params)
        _, ctx = decode_step(BOS, ctx, tiny_params)
        a, b = ctx.copy(), ctx.copy()
        snapshot = [k.copy() for k, _ in ctx.self_kv]
        da, a2 = decode_step(7, a, tiny_params)
        db, b2 = decode_step(8, b, tiny_params)
        assert not np.allclose(da.probs, db.probs)
        assert a2.length == b2.length == 2
        for (k, _), s in zip(ctx.self_kv, snapshot):
            np.testing.assert_array_equal(k, s)

    def test_tape_path_matches_fast_path(self, tiny_params):
        _, ctx = encode([4, 5, 6], tiny_params)
        _, ctx = decode_step(BOS, ctx, tiny_params)
        fast, _ = decode_step(9, ctx, tiny_params)
        tracked, leaves = ctx.leaves("both")
        taped, _ = decode_step(9, tracked, tiny_params)
        assert leaves and taped.probs_tensor is not None
        np.testing.assert_allclose(fast.logits, taped.logits, atol=1e-12)

    def test_length_limit(self, tiny_params):
        _, ctx = encode([4], tiny_params)
        for _ in range(tiny_params.config.max_len):
            _, ctx = decode_step(5, ctx, tiny_params)
        with pytest.raises(LengthError):
            decode_step(5, ctx, tiny_params)

    def test_invalid_token(self, tiny_params):
        _, ctx = encode([4], tiny_params)
        with pytest.raises(VocabularyError):
            decode_step(tiny_params.config.vocab_size, ctx, tiny_params)


def test_selected_caches_follow_target(tiny_params):
    _, ctx = encode([4, 5], tiny_params)
    _, ctx = decode_step(BOS, ctx, tiny_params)
    n_layers = tiny_params.config.n_layers_dec
    assert len(ctx.selected_arrays("self")) == 2 * n_layers
    assert len(ctx.selected_arrays("cross")) == 2 * n_layers
    assert len(ctx.selected_arrays("both")) == 4 * n_layers
    moved = [a + 1.0 for a in ctx.selected_arrays("self")]
    new = ctx.with_selected("self", moved)
    for (k0, v0), (k1, v1) in zip(ctx.cross_kv, new.cross_kv):
        np.testing.assert_array_equal(k0, k1)
        np.testing.assert_array_equal(v0, v1)
    np.testing.assert_array_equal(new.self_kv[0][0], ctx.self_kv[0][0] + 1.0)


def test_init_is_seeded(tiny_cfg):
    a, b = init_params(tiny_cfg, 5), init_params(tiny_cfg, 5)
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
