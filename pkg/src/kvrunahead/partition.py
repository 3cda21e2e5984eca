"""Context partitioning and the search for TTFT-minimising partitions.

A partition of a ``C``-token prompt over ``p`` workers is stored by its
boundaries ``[0, b1, ..., C]``; worker ``i`` owns tokens ``[b_i, b_{i+1})``.
Searches work on signed offsets from the even split and take an
``evaluator`` callable mapping a :class:`ContextPartition` to a TTFT.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import warnings
from bisect import bisect_left
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import (
    ArityError,
    ClampWarning,
    InfeasiblePartitionError,
    PartitionLookupError,
    SearchError,
)

Evaluator = Callable[["ContextPartition"], float]

RATIO_SUM_TOL = 1e-6
TABLE_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ContextPartition:
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0:
            raise InfeasiblePartitionError(f"boundaries must start at 0 and name >=1 part: {b}")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise InfeasiblePartitionError(f"boundaries must be strictly increasing: {b}")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "ContextPartition":
        return cls((0, *itertools.accumulate(int(s) for s in sizes)))

    @property
    def context_length(self) -> int:
        return self.boundaries[-1]

    @property
    def p(self) -> int:
        return len(self.boundaries) - 1

    @property
    def sizes(self) -> tuple[int, ...]:
        b = self.boundaries
        return tuple(hi - lo for lo, hi in zip(b, b[1:]))

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(s / self.context_length for s in self.sizes)

    def span(self, rank: int) -> tuple[int, int]:
        return self.boundaries[rank], self.boundaries[rank + 1]

    def __str__(self) -> str:
        return "[" + ",".join(str(s) for s in self.sizes) + "]"


def even_partition(C: int, p: int) -> ContextPartition:
    """Split ``C`` tokens over ``p`` workers; the first ``C mod p`` get one extra."""
    if p < 1:
        raise InfeasiblePartitionError(f"process count must be >= 1, got {p}")
    if C < p:
        raise InfeasiblePartitionError(f"cannot split {C} tokens over {p} workers")
    q, r = divmod(C, p)
    return ContextPartition.from_sizes([q + 1 if i < r else q for i in range(p)])


def partition_from_ratios(C: int, ratios: Sequence[float], p: int | None = None) -> ContextPartition:
    """Materialise a ratio vector as integer token counts.

    Largest-remainder rounding: floor every share, hand the leftover tokens to
    the largest fractional parts (ties to the lower rank), then make sure every
    worker holds at least one token by taking from the largest part.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if p is not None and r.size != p:
        raise ArityError(f"got {r.size} ratios for {p} processes")
    if r.ndim != 1 or r.size == 0:
        raise ArityError("ratios must be a non-empty vector")
    if np.any(r <= 0) or not np.all(np.isfinite(r)):
        raise ValueError(f"ratios must be positive and finite: {r.tolist()}")
    if abs(r.sum() - 1.0) > RATIO_SUM_TOL:
        raise ValueError(f"ratios sum to {r.sum()!r}, not 1")
    n = r.size
    if C < n:
        raise InfeasiblePartitionError(f"cannot split {C} tokens over {n} workers")

    # exact rationals: float products would invent or hide ties in the remainders
    weights = [Fraction(float(x)) for x in r]
    total = sum(weights)
    exact = [C * w / total for w in weights]
    sizes = np.array([math.floor(e) for e in exact], dtype=np.int64)
    leftover = C - int(sizes.sum())
    order = sorted(range(n), key=lambda i: (sizes[i] - exact[i], i))
    for i in order[:leftover]:
        sizes[i] += 1
    for i in range(n):
        while sizes[i] < 1:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    return ContextPartition.from_sizes(sizes.tolist())


def _offsets_to_partition(base: ContextPartition, offsets: Sequence[int]) -> ContextPartition | None:
    """Shift the interior boundaries of ``base``; ``None`` if the result is infeasible."""
    inner = [b + d for b, d in zip(base.boundaries[1:-1], offsets)]
    bounds = (0, *inner, base.context_length)
    if any(hi <= lo for lo, hi in zip(bounds, bounds[1:])):
        return None
    return ContextPartition(bounds)


def _tie_key(offsets: Sequence[int]) -> tuple:
    # among equal TTFTs prefer the point closest to the even split
    return (sum(abs(d) for d in offsets), tuple(abs(d) for d in offsets), tuple(offsets))


@dataclass
class SearchConfig:
    grid_width: int = 5
    initial_stride: int | None = None
    min_stride: int = 1
    evaluator: Evaluator | None = None

    def __post_init__(self):
        if self.grid_width < 3:
            raise ValueError(f"grid_width must be >= 3, got {self.grid_width}")
        if self.min_stride < 1:
            raise ValueError(f"min_stride must be >= 1, got {self.min_stride}")
        if self.initial_stride is not None and self.initial_stride < self.min_stride:
            raise ValueError("initial_stride must be >= min_stride")

    def stride_for(self, C: int, p: int) -> int:
        if self.initial_stride is not None:
            return self.initial_stride
        return max(self.min_stride, round(C / (p * 4)))


@dataclass
class SearchResult:
    partition: ContextPartition
    ttft: float
    offsets: tuple[int, ...]
    evaluations: int
    levels: list[dict] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (partition, ttft)
        yield self.partition
        yield self.ttft


class _CachedEvaluator:
    def __init__(self, evaluator: Evaluator):
        self.evaluator = evaluator
        self.cache: dict[tuple[int, ...], float] = {}

    def __call__(self, part: ContextPartition) -> float:
        key = part.boundaries
        if key not in self.cache:
            self.cache[key] = float(self.evaluator(part))
        return self.cache[key]


def binary_search_two(C: int, evaluator: Evaluator, min_stride: int = 1) -> SearchResult:
    """Best boundary for two workers by integer ternary search on ``delta1``.

    The TTFT curve over the first worker's extra share is assumed unimodal.
    ``delta1 = 0`` is always evaluated so flat curves resolve to the even split.
    """
    base = even_partition(C, 2)
    b1 = base.boundaries[1]
    f = _CachedEvaluator(evaluator)
    step = max(1, int(min_stride))
    # delta1 = k * step with 1 <= b1 + delta1 <= C - 1
    lo = -((b1 - 1) // step)
    hi = (C - 1 - b1) // step

    def g(k: int) -> float:
        return f(ContextPartition((0, b1 + k * step, C)))

    while hi - lo > 2:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        f1, f2 = g(m1), g(m2)
        if f1 < f2:
            hi = m2 - 1
        elif f1 > f2:
            lo = m1 + 1
        else:
            lo, hi = m1, m2
    candidates = set(range(lo, hi + 1)) | {0}
    best = min(candidates, key=lambda k: (g(k), _tie_key((k * step,))))
    delta = best * step
    return SearchResult(
        ContextPartition((0, b1 + delta, C)), g(best), (delta,), len(f.cache)
    )


def hierarchical_grid_search(C: int, p: int, config: SearchConfig) -> SearchResult:
    """Coarse-to-fine grid search over the ``p-1`` boundary offsets.

    Each level scans ``grid_width`` values per offset, centred on the incumbent,
    at the current stride; the stride then halves until ``min_stride`` has been
    scanned.  The first level is centred on the even split, so the result is
    never worse than it.  Infeasible grid points are skipped.
    """
    if p < 2:
        raise ValueError(f"grid search needs p >= 2, got {p}")
    if config.evaluator is None:
        raise ValueError("SearchConfig.evaluator is required")
    base = even_partition(C, p)
    f = _CachedEvaluator(config.evaluator)
    half = config.grid_width // 2
    steps = [j - half for j in range(config.grid_width)]

    incumbent: tuple[int, ...] | None = None
    best_val = math.inf
    stride = config.stride_for(C, p)
    levels = []
    centre = (0,) * (p - 1)
    while True:
        found = False
        for combo in itertools.product(steps, repeat=p - 1):
            offsets = tuple(c + stride * s for c, s in zip(centre, combo))
            part = _offsets_to_partition(base, offsets)
            if part is None:
                continue
            val = f(part)
            found = True
            if incumbent is None or (val, _tie_key(offsets)) < (best_val, _tie_key(incumbent)):
                incumbent, best_val = offsets, val
        if not found and incumbent is None:
            raise SearchError(f"no feasible grid point for C={C}, p={p} at stride {stride}")
        levels.append({"stride": stride, "offsets": incumbent, "ttft": best_val})
        centre = incumbent
        if stride <= config.min_stride:
            break
        stride = max(config.min_stride, stride // 2)

    part = _offsets_to_partition(base, incumbent)
    return SearchResult(part, best_val, incumbent, len(f.cache), levels)


@dataclass
class PartitionLookupTable:
    """Best-found ratio vectors keyed by context length, for one process count."""

    p: int
    entries: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        entries, self.entries = self.entries, {}
        for C, ratios in entries.items():
            self.add(C, ratios)

    def add(self, C: int, ratios: Sequence[float]) -> None:
        r = tuple(float(x) for x in ratios)
        if len(r) != self.p:
            raise ArityError(f"entry for C={C} has {len(r)} ratios, table p={self.p}")
        if any(x < 0 for x in r) or abs(sum(r) - 1.0) > TABLE_SUM_TOL:
            raise ValueError(f"entry for C={C} must be non-negative and sum to 1: {r}")
        self.entries[int(C)] = r

    def keys(self) -> list[int]:
        return sorted(self.entries)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "entries": [
                {"context_length": C, "ratios": list(self.entries[C])} for C in self.keys()
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PartitionLookupTable":
        table = cls(int(doc["p"]))
        for entry in doc.get("entries", []):
            table.add(int(entry["context_length"]), entry["ratios"])
        return table

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PartitionLookupTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def interpolate_partition(table: PartitionLookupTable, C: int) -> np.ndarray:
    """Ratio vector for context length ``C`` from the two nearest table entries.

    Exact keys return the stored ratios.  Queries outside the table range are
    clamped to the nearest entry (with a :class:`ClampWarning`) rather than
    extrapolated, since extrapolated ratios can turn negative.
    """
    keys = table.keys()
    if not keys:
        raise PartitionLookupError("partition lookup table is empty")
    if C in table.entries:
        return np.array(table.entries[C])
    if C < keys[0] or C > keys[-1]:
        nearest = keys[0] if C < keys[0] else keys[-1]
        warnings.warn(
            f"context length {C} outside table range [{keys[0]}, {keys[-1]}]; using {nearest}",
            ClampWarning,
            stacklevel=2,
        )
        return np.array(table.entries[nearest])
    j = bisect_left(keys, C)
    lo, hi = keys[j - 1], keys[j]
    t = (C - lo) / (hi - lo)
    r = (1 - t) * np.array(table.entries[lo]) + t * np.array(table.entries[hi])
    return r / r.sum()


def table_build_cost(T: float, N: int, C: int, grid_width: int = 5) -> float:
    """Seconds to search one lookup-table entry: ``T * (N-1)**w * log_{w-1}(C)``."""
    if N < 2 or C < 2:
        raise ValueError("table_build_cost needs N >= 2 and C >= 2")
    levels = math.log2(C) / math.log2(grid_width - 1)
    if (grid_width - 1) ** round(levels) == C:
        levels = round(levels)
    return T * (N - 1) ** grid_width * levels
