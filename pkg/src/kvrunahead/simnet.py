"""Discrete-event TTFT simulator, analytic lower bounds and the noisy-link study.

Time is abstract seconds driven by user coefficients.  Per layer, rank ``i``
spends ``proj_coeff*c_i`` on projections, ``alpha*dots_i`` on ``QK^T``,
``softmax_coeff*c_i`` on the softmax and ``fixed_overhead`` on everything
else.  A transfer of ``n`` (K, V) pairs over a link costs
``latency + n * kv_fraction / bandwidth``, where ``kv_fraction`` is
``n_kv_heads / n_heads`` (grouped/multi-query attention ships fewer bytes).

KVR: rank ``i`` posts its receive at layer start, so the transfer from rank
``i-1`` overlaps its projection; after concatenation it forwards the cache to
``i+1`` while computing attention.  If either transfer outlasts the compute
it hides under, the remainder delays the rank.

TSP: every layer ends its projection with an all-gather that acts as a
global barrier.  The gather is modelled as ``ceil(log2 p)`` recursive-doubling
rounds over the chain; round ``r`` moves ``min(2**r, p - 2**r)`` shares of
the largest partition at the speed of the slowest link.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .engine import Strategy, dot_product_counts
from .exceptions import CalibrationError
from .model import ModelConfig
from .partition import ContextPartition, SearchConfig, hierarchical_grid_search


@dataclass(frozen=True)
class CostModel:
    alpha: float = 2e-10
    proj_coeff: float = 2e-6
    softmax_coeff: float = 2e-8
    fixed_overhead: float = 1e-4

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if min(self.proj_coeff, self.softmax_coeff, self.fixed_overhead) < 0:
            raise ValueError("cost coefficients must be non-negative")

    @classmethod
    def attention_only(cls, alpha: float = 1e-8) -> "CostModel":
        return cls(alpha=alpha, proj_coeff=0.0, softmax_coeff=0.0, fixed_overhead=0.0)

    def whole_model_alpha(self, model: ModelConfig) -> float:
        """The coefficient of ``TTFT(1) = alpha * C**2`` for an ``n_layers`` model."""
        return self.alpha * model.n_layers


@dataclass(frozen=True)
class NetworkModel:
    bandwidth: float = 2e7  # (K, V) pairs per second per link
    latency: float = 1e-5

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.latency < 0:
            raise ValueError(f"latency must be non-negative, got {self.latency}")

    @classmethod
    def zero_comm(cls) -> "NetworkModel":
        return cls(bandwidth=math.inf, latency=0.0)


@dataclass(frozen=True)
class NoiseSidecar:
    """Slows one random adjacent link per layer by ``slowdown_factor``."""

    seed: int = 0
    slowdown_factor: float = 2.0

    def __post_init__(self):
        if self.slowdown_factor < 1:
            raise ValueError(f"slowdown_factor must be >= 1, got {self.slowdown_factor}")

    def degraded_links(self, p: int, n_layers: int) -> list[int | None]:
        if p < 2:
            return [None] * n_layers
        rng = np.random.default_rng(self.seed)
        return [int(j) for j in rng.integers(0, p - 1, size=n_layers)]


@dataclass
class LayerRecord:
    rank: int
    layer: int
    compute_start: float
    compute_end: float
    send_start: float | None = None
    send_end: float | None = None
    recv_ready: float | None = None
    end: float = 0.0


@dataclass
class Timeline:
    strategy: Strategy
    partition: ContextPartition
    records: list[LayerRecord]
    ttft: float
    transfer_time: float
    gather_times: list[float] = field(default_factory=list)

    def record(self, rank: int, layer: int) -> LayerRecord:
        for rec in self.records:
            if rec.rank == rank and rec.layer == layer:
                return rec
        raise KeyError((rank, layer))

    def finish_times(self) -> list[float]:
        last = max(r.layer for r in self.records)
        return [self.record(rank, last).end for rank in range(self.partition.p)]

    def events(self) -> list[dict]:
        """Flat event list sorted by (time, rank, layer)."""
        out = []
        for rec in self.records:
            for name in ("recv_ready", "compute_start", "send_start", "send_end", "compute_end", "end"):
                t = getattr(rec, name)
                if t is not None:
                    out.append({"time": t, "rank": rec.rank, "layer": rec.layer, "event": name})
        order = {"recv_ready": 0, "compute_start": 1, "send_start": 2, "send_end": 3,
                 "compute_end": 4, "end": 5}
        out.sort(key=lambda e: (e["time"], e["rank"], e["layer"], order[e["event"]]))
        return out

    def write_jsonl(self, fh: IO[str]) -> None:
        for event in self.events():
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def _kv_fraction(model: ModelConfig) -> float:
    return model.n_kv_heads / model.n_heads


def _transfer(pairs: float, net: NetworkModel, slowdown: float, kv_fraction: float) -> float:
    if pairs == 0:
        return 0.0
    volume = pairs * kv_fraction
    return net.latency + (0.0 if math.isinf(net.bandwidth) else volume * slowdown / net.bandwidth)


class _EventQueue:
    """Deterministic priority queue keyed by (time, rank, layer, insertion order)."""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def push(self, time, rank, layer, kind, *payload):
        heapq.heappush(self._heap, (time, rank, layer, next(self._seq), kind, payload))

    def __iter__(self):
        while self._heap:
            time, rank, layer, _, kind, payload = heapq.heappop(self._heap)
            yield time, rank, layer, kind, payload


def _simulate_chain(partition, model, cost, net, links, kvf):
    """KVR (and serial when p == 1)."""
    p, L = partition.p, model.n_layers
    sizes = partition.sizes
    dots = dot_product_counts(Strategy.KVR, partition)
    records = {}
    proj_done = {}
    arrived = {}
    link_free = [0.0] * max(p - 1, 0)
    transfer_total = 0.0
    q = _EventQueue()
    for rank in range(p):
        q.push(0.0, rank, 0, "start")

    def try_attend(now, rank, layer):
        nonlocal transfer_total
        if (rank, layer) not in proj_done or (rank > 0 and (rank, layer) not in arrived):
            return
        rec = records[rank, layer]
        rec.recv_ready = arrived.get((rank, layer))
        concat = now
        compute_end = concat + cost.alpha * dots[rank] + cost.softmax_coeff * sizes[rank] + cost.fixed_overhead
        end = compute_end
        if rank < p - 1:
            slow = net_slowdown(rank, layer)
            start = max(concat, link_free[rank])
            pairs = partition.boundaries[rank + 1]
            duration = _transfer(pairs, net, slow, kvf)
            transfer_total += duration
            link_free[rank] = start + duration
            rec.send_start, rec.send_end = start, start + duration
            q.push(rec.send_end, rank + 1, layer, "arrive")
            end = max(end, rec.send_end)
        rec.compute_end, rec.end = compute_end, end
        if layer + 1 < L:
            q.push(end, rank, layer + 1, "start")

    def net_slowdown(link, layer):
        return links.slowdown if links is not None and links.degraded[layer] == link else 1.0

    for now, rank, layer, kind, _ in q:
        if kind == "start":
            records[rank, layer] = LayerRecord(rank, layer, compute_start=now, compute_end=now)
            q.push(now + cost.proj_coeff * sizes[rank], rank, layer, "proj_done")
        elif kind == "proj_done":
            proj_done[rank, layer] = now
            try_attend(now, rank, layer)
        elif kind == "arrive":
            arrived[rank, layer] = now
            if (rank, layer) in records:
                try_attend(max(now, proj_done.get((rank, layer), now)), rank, layer)
    return records, transfer_total, []


def _simulate_gather(partition, model, cost, net, links, kvf):
    p, L = partition.p, model.n_layers
    sizes = partition.sizes
    dots = dot_product_counts(Strategy.TSP, partition)
    share = max(sizes)
    rounds = math.ceil(math.log2(p)) if p > 1 else 0
    records = {}
    at_barrier: dict[int, list[int]] = {}
    gather_times = []
    transfer_total = 0.0
    q = _EventQueue()
    for rank in range(p):
        q.push(0.0, rank, 0, "start")
    for now, rank, layer, kind, _ in q:
        if kind == "start":
            records[rank, layer] = LayerRecord(rank, layer, compute_start=now, compute_end=now)
            q.push(now + cost.proj_coeff * sizes[rank], rank, layer, "proj_done")
        elif kind == "proj_done":
            waiting = at_barrier.setdefault(layer, [])
            waiting.append(rank)
            if len(waiting) < p:
                continue
            slow = links.slowdown if links is not None and p > 1 else 1.0
            gather = sum(
                _transfer(min(2**r, p - 2**r) * share, net, slow, kvf) for r in range(rounds)
            )
            gather_times.append(gather)
            transfer_total += sum(_transfer((p - 1) * c, net, 1.0, kvf) for c in sizes) if p > 1 else 0.0
            for r in range(p):
                q.push(now + gather, r, layer, "gathered")
        elif kind == "gathered":
            rec = records[rank, layer]
            if p > 1:
                rec.recv_ready = now
            rec.compute_end = rec.end = (
                now + cost.alpha * dots[rank] + cost.softmax_coeff * sizes[rank] + cost.fixed_overhead
            )
            if layer + 1 < L:
                q.push(rec.end, rank, layer + 1, "start")
    return records, transfer_total, gather_times


@dataclass
class _Links:
    slowdown: float
    degraded: list[int | None]


def simulate_ttft(
    strategy,
    partition: ContextPartition,
    model: ModelConfig,
    cost: CostModel | None = None,
    net: NetworkModel | None = None,
    noise: NoiseSidecar | None = None,
) -> Timeline:
    strategy = Strategy.parse(strategy)
    cost = cost or CostModel()
    net = net or NetworkModel()
    if strategy is Strategy.SERIAL and partition.p != 1:
        raise ValueError(f"serial strategy requires p == 1, got p={partition.p}")
    links = None
    if noise is not None:
        links = _Links(noise.slowdown_factor, noise.degraded_links(partition.p, model.n_layers))
    kvf = _kv_fraction(model)
    sim = _simulate_gather if strategy is Strategy.TSP else _simulate_chain
    records, transfer_total, gathers = sim(partition, model, cost, net, links, kvf)
    ordered = [records[key] for key in sorted(records, key=lambda k: (k[1], k[0]))]
    ttft = max(rec.end for rec in ordered)
    return Timeline(strategy, partition, ordered, ttft, transfer_total, gathers)


def ttft_star(C: int, p: int, alpha: float) -> float:
    """Ideal TTFT with ``p`` workers: ``alpha*C**2/2 * (1/p + 1/p**2)``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return alpha * C * C * (p + 1) / (2 * p * p)


def kvr_evaluator(model: ModelConfig, cost: CostModel | None = None, net: NetworkModel | None = None):
    """Partition -> simulated KVR TTFT, for the partition searches."""
    cost = cost or CostModel()
    net = net or NetworkModel()

    def evaluate(part: ContextPartition) -> float:
        return simulate_ttft(Strategy.KVR, part, model, cost, net).ttft

    return evaluate


def ttft_practical_lower(
    C: int,
    p: int,
    model: ModelConfig,
    cost: CostModel | None = None,
    search: SearchConfig | None = None,
) -> float:
    """Simulated KVR TTFT at the best-searched partition with free communication."""
    cost = cost or CostModel()
    zero = NetworkModel.zero_comm()
    if p == 1:
        return simulate_ttft(Strategy.SERIAL, ContextPartition((0, C)), model, cost, zero).ttft
    cfg = SearchConfig(
        grid_width=search.grid_width if search else 5,
        initial_stride=search.initial_stride if search else None,
        min_stride=search.min_stride if search else 1,
        evaluator=kvr_evaluator(model, cost, zero),
    )
    return hierarchical_grid_search(C, p, cfg).ttft


@dataclass
class NoiseStats:
    strategy: Strategy
    quiet_ttft: float
    degradations: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.degradations))

    @property
    def max(self) -> float:
        return float(np.max(self.degradations))


def noise_study(
    strategy,
    partition: ContextPartition,
    model: ModelConfig,
    cost: CostModel | None = None,
    net: NetworkModel | None = None,
    slowdown_factor: float = 2.0,
    trials: int = 20,
    seed: int = 0,
) -> NoiseStats:
    """Relative TTFT degradation over ``trials`` seeded noisy runs vs. a quiet network."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    quiet = simulate_ttft(strategy, partition, model, cost, net).ttft
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(trials)]
    degr = []
    for s in seeds:
        noisy = simulate_ttft(strategy, partition, model, cost, net, NoiseSidecar(s, slowdown_factor)).ttft
        degr.append((noisy - quiet) / quiet)
    return NoiseStats(Strategy.parse(strategy), quiet, degr)


def calibrate_alpha(measurements: Iterable[tuple[float, float]]) -> float:
    """Least-squares ``alpha`` for ``t = alpha * C**2`` from ``(C, seconds)`` pairs."""
    pts = [(float(C), float(t)) for C, t in measurements]
    if not pts:
        raise CalibrationError("need at least one (C, seconds) measurement")
    if any(C <= 0 for C, _ in pts):
        raise CalibrationError("context lengths must be positive")
    num = sum(t * C**2 for C, t in pts)
    den = sum(C**4 for C, _ in pts)
    return num / den
