"""Brute-force references used only for verification.

Nothing here calls into the attention, engine-metric or search code it is
meant to check.  The forward pass is plain Python loops in double precision;
weight generation is the only shared piece.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import RMS_EPS, WeightSet
from .partition import ContextPartition
from .exceptions import BudgetExceededError, InfeasiblePartitionError, InputError

DEFAULT_BUDGET = 10**6


def _matvec(x, w):
    # x: list[float] (n), w: list[list[float]] (n x m)
    m = len(w[0])
    return [sum(x[k] * w[k][j] for k in range(len(x))) for j in range(m)]


def _rms_row(x):
    s = math.sqrt(sum(v * v for v in x) / len(x) + RMS_EPS)
    return [v / s for v in x]


def naive_causal_forward(context, weights: WeightSet) -> np.ndarray:
    """Triple-loop causal transformer in float64; returns final hidden states."""
    cfg = weights.config
    h = [[float(v) for v in row] for row in np.asarray(context, dtype=np.float64)]
    if not h:
        raise InputError("context must contain at least one token")
    if any(len(row) != cfg.d_model for row in h):
        raise InputError(f"context rows must have {cfg.d_model} entries")
    hd = cfg.head_dim
    group = cfg.n_heads // cfg.n_kv_heads
    C = len(h)
    for lw in weights.layers:
        w = {name: np.asarray(getattr(lw, name), dtype=np.float64).tolist()
             for name in ("wq", "wk", "wv", "wo", "w1", "w2")}
        x = [_rms_row(r) for r in h] if cfg.rms_norm else h
        q = [_matvec(r, w["wq"]) for r in x]
        k = [_matvec(r, w["wk"]) for r in x]
        v = [_matvec(r, w["wv"]) for r in x]
        attn = [[0.0] * cfg.d_model for _ in range(C)]
        for head in range(cfg.n_heads):
            qo = head * hd
            ko = (head // group) * hd
            for i in range(C):
                # keys 0..i only
                scores = [
                    sum(q[i][qo + t] * k[j][ko + t] for t in range(hd)) / math.sqrt(hd)
                    for j in range(i + 1)
                ]
                top = max(scores)
                e = [math.exp(s - top) for s in scores]
                z = sum(e)
                for t in range(hd):
                    attn[i][qo + t] = sum(e[j] * v[j][ko + t] for j in range(i + 1)) / z
        h = [[a + b for a, b in zip(h[i], _matvec(attn[i], w["wo"]))] for i in range(C)]
        x = [_rms_row(r) for r in h] if cfg.rms_norm else h
        ff = [_matvec([max(u, 0.0) for u in _matvec(r, w["w1"])], w["w2"]) for r in x]
        h = [[a + b for a, b in zip(h[i], ff[i])] for i in range(C)]
    return np.array(h)


def _closeness_to_even(bounds, C, p):
    q, r = divmod(C, p)
    even = [0]
    for i in range(p):
        even.append(even[-1] + q + (1 if i < r else 0))
    offsets = [b - e for b, e in zip(bounds[1:-1], even[1:-1])]
    return (sum(abs(d) for d in offsets), tuple(abs(d) for d in offsets), tuple(offsets))


def exhaustive_partition_search(
    C: int,
    p: int,
    evaluator: Callable[[ContextPartition], float],
    budget: int = DEFAULT_BUDGET,
) -> tuple[ContextPartition, float]:
    """Global optimum over every placement of the ``p-1`` interior boundaries."""
    if C < p or p < 1:
        raise InfeasiblePartitionError(f"cannot split {C} tokens over {p} workers")
    count = math.comb(C - 1, p - 1)
    if count > budget:
        raise BudgetExceededError(f"{count} partitions exceed the budget of {budget}")
    best = None
    for inner in itertools.combinations(range(1, C), p - 1):
        bounds = (0, *inner, C)
        val = float(evaluator(ContextPartition(bounds)))
        key = (val, _closeness_to_even(bounds, C, p))
        if best is None or key < best[0]:
            best = (key, bounds)
    return ContextPartition(best[1]), best[0][0]


@dataclass
class OracleReport:
    case: str
    checked: int = 0
    mismatches: list[dict] = field(default_factory=list)
    max_abs_dev: float = 0.0
    max_rel_dev: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def add(self, case: str, expected: float, actual: float) -> None:
        self.checked += 1
        dev = abs(expected - actual)
        self.max_abs_dev = max(self.max_abs_dev, dev)
        if expected:
            self.max_rel_dev = max(self.max_rel_dev, dev / abs(expected))
        if dev:
            self.mismatches.append({"case": case, "expected": expected, "actual": actual})


def formula_enumeration_check(C_max: int = 64, p_max: int = 8, weights: WeightSet | None = None) -> OracleReport:
    """Compare instrumented engine traffic with ``(p-1)C`` and ``(p-1)C/2`` on all ``p | C``."""
    from .engine import Strategy, run
    from .model import ModelConfig, init_weights
    from .partition import even_partition

    if weights is None:
        weights = init_weights(ModelConfig(d_model=4, n_heads=1, n_layers=1, seed=0))
    d = weights.config.d_model
    rng = np.random.default_rng(0)
    report = OracleReport(case=f"traffic closed forms, C<={C_max}, p<={p_max}")
    for C in range(1, C_max + 1):
        ctx = rng.standard_normal((C, d))
        for p in range(1, min(p_max, C) + 1):
            if C % p:
                continue
            part = even_partition(C, p)
            tsp = run(Strategy.TSP, ctx, part, weights).metrics.kv_pairs_per_layer
            kvr = run(Strategy.KVR, ctx, part, weights).metrics.kv_pairs_per_layer
            report.add(f"tsp C={C} p={p}", (p - 1) * C, tsp)
            report.add(f"kvr C={C} p={p}", (p - 1) * C / 2, kvr)
            report.add(f"kvr*2==tsp C={C} p={p}", tsp, 2 * kvr)
    return report
