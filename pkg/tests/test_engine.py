import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvrunahead import (
    ContextPartition,
    ModelConfig,
    Strategy,
    dot_product_counts,
    even_partition,
    forward_serial,
    init_weights,
    run,
    traffic_pairs,
)
from kvrunahead.engine import FAULTS, assemble_output
from kvrunahead.exceptions import AssemblyError, InputError, ProtocolError

from conftest import make_context, rel_dev

NINE = ContextPartition.from_sizes([4, 3, 2])


class TestWorkedExample:
    def test_kvr_counts(self, gqa):
        m = run("kvr", make_context(9, 16), NINE, gqa).metrics
        assert m.dot_products_per_layer == [16, 21, 18]
        assert m.max_dot_products == 21
        assert m.kv_rows_per_layer == 22
        assert m.kv_pairs_per_layer == 11
        assert m.barrier_count == 0

    def test_tsp_counts(self, gqa):
        m = run("tsp", make_context(9, 16), even_partition(9, 3), gqa).metrics
        assert m.dot_products_per_layer == [27, 27, 27]
        assert m.kv_rows_per_layer == 36
        assert m.rows_received_per_layer == [12, 12, 12]
        assert m.barrier_count == gqa.config.n_layers

    def test_kvr_rows_received(self, gqa):
        m = run("kvr", make_context(9, 16), NINE, gqa).metrics
        assert m.rows_received_per_layer == [0, 8, 14]


class TestAnalyticCounts:
    @settings(max_examples=30, deadline=None)
    @given(sizes=st.lists(st.integers(1, 6), min_size=1, max_size=5), strategy=st.sampled_from(["kvr", "tsp"]))
    def test_instrumented_equals_formula(self, sizes, strategy):
        w = init_weights(ModelConfig(d_model=4, n_heads=1, n_layers=1))
        part = ContextPartition.from_sizes(sizes)
        m = run(strategy, make_context(part.context_length, 4), part, w).metrics
        assert m.dot_products_per_layer == dot_product_counts(strategy, part)
        assert m.kv_pairs_per_layer == traffic_pairs(strategy, part)

    def test_traffic_closed_forms(self, mha):
        part = even_partition(12, 3)
        assert run("tsp", make_context(12, 8), part, mha).metrics.kv_pairs_per_layer == 24
        assert run("kvr", make_context(12, 8), part, mha).metrics.kv_pairs_per_layer == 12

    @pytest.mark.parametrize("C,p", [(8, 2), (12, 4), (24, 3), (32, 8)])
    def test_kvr_halves_tsp_traffic(self, C, p):
        part = even_partition(C, p)
        assert 2 * traffic_pairs("kvr", part) == traffic_pairs("tsp", part) == (p - 1) * C

    def test_serial_has_no_traffic(self):
        assert traffic_pairs("serial", even_partition(10, 1)) == 0


class TestEquivalence:
    @pytest.mark.parametrize("strategy", ["kvr", "tsp"])
    @pytest.mark.parametrize("sizes", [[4, 3, 2], [1, 1, 7], [9], [2, 2, 2, 2, 1]])
    def test_matches_serial(self, gqa, strategy, sizes):
        part = ContextPartition.from_sizes(sizes)
        ctx = make_context(part.context_length, 16, seed=2)
        ref, ref_cache = forward_serial(ctx, gqa)
        res = run(strategy, ctx, part, gqa)
        assert rel_dev(res.hidden_out, ref) <= 1e-12
        for seg, ref_seg in zip(res.cache, ref_cache):
            assert (seg.start_pos, seg.end_pos) == (0, part.context_length)
            np.testing.assert_allclose(seg.K, ref_seg.K, rtol=0, atol=1e-13)

    def test_kvr_32_tokens_four_ranks(self):
        w = init_weights(ModelConfig(d_model=16, n_heads=4, n_layers=3, seed=11))
        ctx = make_context(32, 16, seed=5)
        ref, _ = forward_serial(ctx, w)
        out = run("kvr", ctx, even_partition(32, 4), w)
        assert rel_dev(out.hidden_out, ref) <= 1e-12
        np.testing.assert_allclose(out.first_token_hidden, ref[-1], rtol=0, atol=1e-12)

    def test_f32_within_tolerance(self, gqa32):
        ctx = make_context(33, 16, dtype=np.float32)
        ref, _ = forward_serial(ctx, gqa32)
        out = run("kvr", ctx, ContextPartition.from_sizes([12, 11, 10]), gqa32).hidden_out
        assert out.dtype == np.float32
        assert rel_dev(out, ref) <= 1e-4

    @pytest.mark.parametrize("schedule", ["forward", "reverse", 0, 1, 2, 17])
    @pytest.mark.parametrize("strategy", ["kvr", "tsp"])
    def test_schedule_independent(self, gqa, schedule, strategy):
        ctx = make_context(10, 16, seed=8)
        part = ContextPartition.from_sizes([3, 4, 3])
        base = run(strategy, ctx, part, gqa)
        other = run(strategy, ctx, part, gqa, schedule=schedule)
        assert np.array_equal(base.hidden_out, other.hidden_out)
        assert other.metrics.dot_products == base.metrics.dot_products
        assert other.metrics.pairs_sent == base.metrics.pairs_sent


class TestProtocolErrors:
    @pytest.mark.parametrize("fault", FAULTS)
    @pytest.mark.parametrize("strategy", ["kvr", "tsp"])
    def test_faults_detected(self, gqa, fault, strategy):
        with pytest.raises(ProtocolError):
            run(strategy, make_context(9, 16), NINE, gqa, fault=fault)

    def test_unknown_fault(self, gqa):
        with pytest.raises(ValueError):
            run("kvr", make_context(9, 16), NINE, gqa, fault="eat_handoff")

    def test_deadlock_message_names_the_wait(self, gqa):
        with pytest.raises(ProtocolError, match="deadlock: rank 1 waits for kv_handoff layer 0"):
            run("kvr", make_context(9, 16), NINE, gqa, fault="drop_handoff")


class TestInputs:
    def test_partition_length_mismatch(self, gqa):
        with pytest.raises(InputError):
            run("kvr", make_context(10, 16), NINE, gqa)

    def test_serial_needs_one_worker(self, gqa):
        with pytest.raises(InputError):
            run("serial", make_context(9, 16), NINE, gqa)

    def test_serial_single_worker(self, gqa):
        ctx = make_context(9, 16)
        res = run(Strategy.SERIAL, ctx, even_partition(9, 1), gqa)
        assert np.array_equal(res.hidden_out, forward_serial(ctx, gqa)[0])
        assert res.metrics.kv_pairs_sent == 0

    def test_unknown_strategy(self, gqa):
        with pytest.raises(ValueError):
            run("ring", make_context(9, 16), NINE, gqa)


class TestAssembly:
    def test_concatenates_in_rank_order(self):
        blocks = [np.full((2, 3), 0.0), np.full((1, 3), 1.0)]
        out = assemble_output(blocks, ContextPartition.from_sizes([2, 1]))
        assert out[:, 0].tolist() == [0.0, 0.0, 1.0]

    def test_wrong_block_count(self):
        with pytest.raises(AssemblyError):
            assemble_output([np.zeros((2, 3))], ContextPartition.from_sizes([2, 1]))

    def test_wrong_rows(self):
        with pytest.raises(AssemblyError):
            assemble_output([np.zeros((2, 3)), np.zeros((2, 3))], ContextPartition.from_sizes([2, 1]))
