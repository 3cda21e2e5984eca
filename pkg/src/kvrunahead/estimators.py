"""scikit-learn style front ends.

:class:`ParallelPrefill` is a transformer: ``fit`` draws the model weights,
``transform`` runs the prompt phase of a context matrix under the configured
strategy and returns the final hidden states.  :class:`PartitionSearch` is
fitted on a list of context lengths and predicts partition ratios for new
lengths by interpolation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_context, check_positive_int
from .engine import ExecutionResult, Strategy, run
from .model import ModelConfig, init_weights
from .partition import (
    ContextPartition,
    PartitionLookupTable,
    SearchConfig,
    even_partition,
    hierarchical_grid_search,
    interpolate_partition,
    partition_from_ratios,
)
from .simnet import CostModel, NetworkModel, kvr_evaluator


def _model_config(est) -> ModelConfig:
    return ModelConfig(
        d_model=est.d_model,
        n_heads=est.n_heads,
        n_kv_heads=est.n_kv_heads,
        n_layers=est.n_layers,
        seed=est.seed,
        precision=est.precision,
        d_ff=est.d_ff,
        rms_norm=est.rms_norm,
    )


class PartitionSearch(BaseEstimator):
    """Build a partition lookup table by hierarchical grid search.

    Parameters
    ----------
    n_workers : int
        Process count ``p`` of the table.
    grid_width, initial_stride, min_stride :
        Grid geometry, see :class:`~kvrunahead.partition.SearchConfig`.
    n_layers, n_heads, n_kv_heads :
        Shape of the simulated model (only layer count and KV sharing matter).
    cost, network :
        Time model used by the default evaluator.
    evaluator : callable, optional
        ``ContextPartition -> ttft``; overrides the simulated KVR TTFT.
    """

    def __init__(
        self,
        n_workers=4,
        grid_width=5,
        initial_stride=None,
        min_stride=1,
        n_layers=2,
        n_heads=4,
        n_kv_heads=None,
        cost=None,
        network=None,
        evaluator=None,
    ):
        self.n_workers = n_workers
        self.grid_width = grid_width
        self.initial_stride = initial_stride
        self.min_stride = min_stride
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.cost = cost
        self.network = network
        self.evaluator = evaluator

    def _evaluator(self):
        if self.evaluator is not None:
            return self.evaluator
        model = ModelConfig(
            d_model=self.n_heads, n_heads=self.n_heads, n_kv_heads=self.n_kv_heads,
            n_layers=self.n_layers,
        )
        return kvr_evaluator(model, self.cost or CostModel(), self.network or NetworkModel())

    def search(self, C: int):
        """Run one hierarchical grid search at context length ``C``."""
        p = check_positive_int(self.n_workers, "n_workers", minimum=2)
        cfg = SearchConfig(self.grid_width, self.initial_stride, self.min_stride, self._evaluator())
        return hierarchical_grid_search(int(C), p, cfg)

    def fit(self, X, y=None):
        lengths = [int(c) for c in np.asarray(X).ravel()]
        if not lengths:
            raise ValueError("need at least one context length")
        self.table_ = PartitionLookupTable(self.n_workers)
        self.results_ = {}
        for C in sorted(set(lengths)):
            res = self.search(C)
            self.results_[C] = res
            self.table_.add(C, [s / C for s in res.partition.sizes])
        return self

    @classmethod
    def from_table(cls, table: PartitionLookupTable, **params) -> "PartitionSearch":
        est = cls(n_workers=table.p, **params)
        est.table_ = table
        est.results_ = {}
        return est

    def predict(self, X) -> np.ndarray:
        """Interpolated ratio vectors, one row per requested context length."""
        check_is_fitted(self, "table_")
        return np.vstack([interpolate_partition(self.table_, int(c)) for c in np.asarray(X).ravel()])

    def predict_partition(self, C: int) -> ContextPartition:
        return partition_from_ratios(int(C), self.predict([C])[0], self.n_workers)


class ParallelPrefill(TransformerMixin, BaseEstimator):
    """Prompt-phase forward pass of a toy causal transformer across ``n_workers`` ranks.

    ``partition`` is ``"even"``, ``"search"`` (simulated-TTFT grid search), a
    ratio vector, or a fitted :class:`PartitionSearch`.  After ``transform``
    the execution details are in ``result_``.
    """

    def __init__(
        self,
        strategy="kvr",
        n_workers=2,
        partition="even",
        d_model=16,
        n_heads=4,
        n_kv_heads=None,
        n_layers=2,
        d_ff=None,
        rms_norm=False,
        precision="f64",
        seed=0,
        cost=None,
        network=None,
    ):
        self.strategy = strategy
        self.n_workers = n_workers
        self.partition = partition
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.rms_norm = rms_norm
        self.precision = precision
        self.seed = seed
        self.cost = cost
        self.network = network

    def fit(self, X=None, y=None):
        self.config_ = _model_config(self)
        self.weights_ = init_weights(self.config_)
        self.strategy_ = Strategy.parse(self.strategy)
        check_positive_int(self.n_workers, "n_workers")
        if self.strategy_ is Strategy.SERIAL and self.n_workers != 1:
            raise ValueError("serial strategy requires n_workers == 1")
        if X is not None:
            check_context(X, self.config_.d_model, self.config_.dtype)
        self.n_features_in_ = self.config_.d_model
        return self

    def partition_for(self, C: int) -> ContextPartition:
        p = self.n_workers
        spec = self.partition
        if isinstance(spec, PartitionSearch):
            return spec.predict_partition(C)
        if isinstance(spec, ContextPartition):
            return spec
        if isinstance(spec, str):
            if spec == "even" or p == 1:
                return even_partition(C, p)
            if spec == "search":
                ev = kvr_evaluator(self.config_, self.cost or CostModel(), self.network or NetworkModel())
                return hierarchical_grid_search(C, p, SearchConfig(evaluator=ev)).partition
            raise ValueError(f"unknown partition source {spec!r}")
        return partition_from_ratios(C, spec, p)

    def execute(self, X) -> ExecutionResult:
        check_is_fitted(self, "weights_")
        ctx = check_context(X, self.config_.d_model, self.config_.dtype)
        self.result_ = run(self.strategy_, ctx, self.partition_for(ctx.shape[0]), self.weights_)
        return self.result_

    def transform(self, X) -> np.ndarray:
        return self.execute(X).hidden_out

    def first_token(self, X) -> np.ndarray:
        """Hidden state of the last prompt token (the first-token readout)."""
        return self.execute(X).first_token_hidden


def synthetic_context(C: int, d_model: int, seed: int = 0, precision: str = "f64") -> np.ndarray:
    """Seeded standard-normal stand-in for a prompt's embedding matrix."""
    rng = np.random.default_rng(seed)
    dtype = np.float32 if precision == "f32" else np.float64
    return rng.standard_normal((C, d_model)).astype(dtype)
