import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvrunahead import (
    CausalMask,
    KVCacheSegment,
    ModelConfig,
    causal_attention,
    forward_serial,
    init_weights,
    qkv_project,
)
from kvrunahead.exceptions import (
    CacheAlignmentError,
    ConfigurationError,
    DimensionError,
    InputError,
)
from kvrunahead.model import layer_forward
from kvrunahead.oracle import naive_causal_forward

from conftest import make_context, rel_dev


def _same_weights(a, b):
    return all(
        np.array_equal(getattr(x, n), getattr(y, n))
        for x, y in zip(a.layers, b.layers)
        for n in ("wq", "wk", "wv", "wo", "w1", "w2")
    )


class TestConfigAndWeights:
    def test_deterministic(self):
        cfg = ModelConfig(d_model=8, n_heads=2, seed=7)
        assert _same_weights(init_weights(cfg), init_weights(cfg))

    def test_seed_sensitivity(self):
        a = init_weights(ModelConfig(d_model=8, n_heads=2, seed=7))
        b = init_weights(ModelConfig(d_model=8, n_heads=2, seed=8))
        assert not _same_weights(a, b)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(d_model=8, n_heads=4, n_kv_heads=3),
            dict(d_model=10, n_heads=4),
            dict(d_model=8, n_heads=0),
            dict(d_model=8, n_heads=2, precision="f16"),
            dict(d_model=8, n_heads=2, seed=-1),
        ],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            ModelConfig(**kwargs)

    def test_shapes_and_scale(self):
        cfg = ModelConfig(d_model=16, n_heads=4, n_kv_heads=1, n_layers=3)
        w = init_weights(cfg)
        assert len(w) == 3
        assert w[0].wq.shape == (16, 16)
        assert w[0].wk.shape == (16, 4)
        assert w[0].w1.shape == (16, 64)
        assert np.max(np.abs(w[0].wq)) <= 1 / np.sqrt(16)
        # symmetric draw
        assert abs(float(np.mean(w[0].w1))) < 0.02

    def test_f32_is_rounded_f64(self):
        w64 = init_weights(ModelConfig(d_model=8, n_heads=2, seed=1))
        w32 = init_weights(ModelConfig(d_model=8, n_heads=2, seed=1, precision="f32"))
        assert w32[0].wq.dtype == np.float32
        np.testing.assert_array_equal(w32[0].wq, w64[0].wq.astype(np.float32))


class TestQKV:
    def test_row_preservation(self, gqa):
        Q, K, V = qkv_project(make_context(3, 16), gqa, 0)
        assert Q.shape == (3, 16) and K.shape == (3, 8) and V.shape == (3, 8)

    def test_zero_input(self, gqa):
        Q, K, V = qkv_project(np.zeros((4, 16)), gqa, 1)
        assert not Q.any() and not K.any() and not V.any()

    def test_k_matches_naive_matmul(self, gqa):
        h = make_context(5, 16, seed=11)
        _, K, _ = qkv_project(h, gqa, 0)
        wk = gqa[0].wk
        expected = [
            [sum(h[i, k] * wk[k, j] for k in range(16)) for j in range(wk.shape[1])]
            for i in range(5)
        ]
        np.testing.assert_allclose(K, expected, rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self, gqa):
        with pytest.raises(DimensionError):
            qkv_project(np.zeros((3, 15)), gqa, 0)


class TestCausalAttention:
    def test_single_query_returns_first_value_row(self):
        rng = np.random.default_rng(0)
        Q, K, V = rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        A = causal_attention(Q, K, V, CausalMask(0, 1), n_heads=2)
        np.testing.assert_array_equal(A, V)

    def test_query0_ignores_key1(self):
        rng = np.random.default_rng(1)
        Q, K, V = (rng.standard_normal((3, 4)) for _ in range(3))
        _, weights = causal_attention(Q, K, V, CausalMask(0, 3), n_heads=1, return_weights=True)
        assert weights[0, 0, 1] == 0.0

    def test_shape_follows_q_with_cached_prefix(self):
        rng = np.random.default_rng(2)
        Q = rng.standard_normal((3, 8))
        K = rng.standard_normal((7, 4))
        V = rng.standard_normal((7, 4))
        A = causal_attention(Q, K, V, CausalMask(4, 3), n_heads=2, n_kv_heads=1)
        assert A.shape == Q.shape

    def test_kv_head_sharing_equals_replicated_mha(self):
        rng = np.random.default_rng(3)
        Q = rng.standard_normal((5, 8))
        K = rng.standard_normal((5, 4))
        V = rng.standard_normal((5, 4))
        shared = causal_attention(Q, K, V, CausalMask(0, 5), n_heads=4, n_kv_heads=2)
        # expand each KV head across its two query heads, then plain MHA
        Kx = np.concatenate([K[:, 0:2], K[:, 0:2], K[:, 2:4], K[:, 2:4]], axis=1)
        Vx = np.concatenate([V[:, 0:2], V[:, 0:2], V[:, 2:4], V[:, 2:4]], axis=1)
        full = causal_attention(Q, Kx, Vx, CausalMask(0, 5), n_heads=4)
        np.testing.assert_allclose(shared, full, rtol=0, atol=1e-15)

    def test_too_few_keys_is_alignment_error(self):
        z = np.zeros((3, 4))
        with pytest.raises(CacheAlignmentError):
            causal_attention(z, np.zeros((4, 4)), np.zeros((4, 4)), CausalMask(2, 3), n_heads=1)

    def test_mask_row_mismatch(self):
        z = np.zeros((3, 4))
        with pytest.raises(CacheAlignmentError):
            causal_attention(z, z, z, CausalMask(0, 2), n_heads=1)

    @settings(max_examples=40, deadline=None)
    @given(
        offset=st.integers(0, 6),
        rows=st.integers(1, 6),
        extra=st.integers(0, 3),
        seed=st.integers(0, 2**32 - 1),
        precision=st.sampled_from(["f32", "f64"]),
    )
    def test_causality_and_normalisation(self, offset, rows, extra, seed, precision):
        dtype = np.float32 if precision == "f32" else np.float64
        rng = np.random.default_rng(seed)
        n_keys = offset + rows + extra
        Q = rng.standard_normal((rows, 8)).astype(dtype) * 3
        K = rng.standard_normal((n_keys, 4)).astype(dtype) * 3
        V = rng.standard_normal((n_keys, 4)).astype(dtype)
        A, w = causal_attention(Q, K, V, CausalMask(offset, rows), n_heads=2, n_kv_heads=1,
                                return_weights=True)
        assert A.shape == Q.shape
        allowed = CausalMask(offset, rows).allowed(n_keys)
        assert np.all(w[:, ~allowed] == 0.0)
        tol = 1e-6 if precision == "f32" else 1e-12
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=tol)


class TestForwardSerial:
    def test_single_token(self, mha):
        h, cache = forward_serial(make_context(1, 8), mha)
        assert h.shape == (1, 8)
        assert [seg.rows for seg in cache] == [1, 1]

    def test_bit_identical_repeat(self, gqa):
        ctx = make_context(12, 16)
        h1, c1 = forward_serial(ctx, gqa)
        h2, c2 = forward_serial(ctx, gqa)
        assert np.array_equal(h1, h2)
        assert all(np.array_equal(a.K, b.K) and np.array_equal(a.V, b.V) for a, b in zip(c1, c2))

    def test_cache_completeness(self, gqa):
        _, cache = forward_serial(make_context(10, 16), gqa)
        assert [(s.layer, s.start_pos, s.end_pos) for s in cache] == [(0, 0, 10), (1, 0, 10)]
        assert all(s.K.shape == (10, 8) for s in cache)

    @pytest.mark.parametrize("rms_norm", [False, True])
    def test_matches_naive_oracle(self, rms_norm):
        w = init_weights(ModelConfig(d_model=8, n_heads=2, n_kv_heads=1, n_layers=2, seed=5,
                                     rms_norm=rms_norm))
        ctx = make_context(16, 8, seed=9)
        h, _ = forward_serial(ctx, w)
        assert rel_dev(h, naive_causal_forward(ctx, w)) <= 1e-12

    def test_empty_context(self, mha):
        with pytest.raises(InputError):
            forward_serial(np.zeros((0, 8)), mha)

    def test_cached_prefix_equals_full_run(self, gqa):
        # the KV-cache interface: prefix then suffix gives the serial rows
        ctx = make_context(9, 16, seed=4)
        full, _ = layer_forward(ctx, gqa, 0)
        _, prefix = layer_forward(ctx[:5], gqa, 0)
        tail, cache = layer_forward(ctx[5:], gqa, 0, cache=prefix)
        np.testing.assert_allclose(tail, full[5:], rtol=0, atol=1e-14)
        assert (cache.start_pos, cache.end_pos) == (0, 9)


class TestKVCacheSegment:
    def test_gap_rejected(self):
        a = KVCacheSegment(0, 0, 2, np.zeros((2, 4)), np.zeros((2, 4)))
        b = KVCacheSegment(0, 3, 4, np.zeros((1, 4)), np.zeros((1, 4)))
        with pytest.raises(CacheAlignmentError):
            a.extend(b)

    def test_shape_checks(self):
        with pytest.raises(CacheAlignmentError):
            KVCacheSegment(0, 0, 2, np.zeros((3, 4)), np.zeros((3, 4)))
        with pytest.raises(CacheAlignmentError):
            KVCacheSegment(0, 2, 2, np.zeros((0, 4)), np.zeros((0, 4)))
