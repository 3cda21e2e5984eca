"""Parallel prompt-phase (prefill) engine for causal transformers.

Compares chained KV-cache handoff (KVR) with all-gather tensor/sequence
parallelism (TSP) against a serial reference, and provides the partition
search, lookup-table interpolation and TTFT simulation around it.
"""

__version__ = "0.1.0"

from .engine import ExecutionMetrics, ExecutionResult, Strategy, dot_product_counts, run, traffic_pairs
from .estimators import ParallelPrefill, PartitionSearch, synthetic_context
from .model import (
    CausalMask,
    KVCacheSegment,
    ModelConfig,
    WeightSet,
    causal_attention,
    forward_serial,
    init_weights,
    qkv_project,
)
from .partition import (
    ContextPartition,
    PartitionLookupTable,
    SearchConfig,
    binary_search_two,
    even_partition,
    hierarchical_grid_search,
    interpolate_partition,
    partition_from_ratios,
    table_build_cost,
)
from .simnet import (
    CostModel,
    NetworkModel,
    NoiseSidecar,
    Timeline,
    calibrate_alpha,
    noise_study,
    simulate_ttft,
    ttft_practical_lower,
    ttft_star,
)

__all__ = [
    "CausalMask", "ContextPartition", "CostModel", "ExecutionMetrics", "ExecutionResult",
    "KVCacheSegment", "ModelConfig", "NetworkModel", "NoiseSidecar", "ParallelPrefill",
    "PartitionLookupTable", "PartitionSearch", "SearchConfig", "Strategy", "Timeline",
    "WeightSet", "binary_search_two", "calibrate_alpha", "causal_attention",
    "dot_product_counts", "even_partition", "forward_serial", "hierarchical_grid_search",
    "init_weights", "interpolate_partition", "noise_study", "partition_from_ratios",
    "qkv_project", "run", "simulate_ttft", "synthetic_context", "table_build_cost",
    "traffic_pairs", "ttft_practical_lower", "ttft_star",
]
