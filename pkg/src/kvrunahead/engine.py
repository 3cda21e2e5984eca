"""Parallel prompt-phase execution: serial, all-gather (TSP) and KV handoff (KVR).

Every rank is a generator that yields communication requests (:class:`Send`,
:class:`Recv`, :class:`Barrier`) to a cooperative scheduler.  All cross-rank
data moves through tagged :class:`WorkerMessage` objects, so the numerical
result cannot depend on the order in which ranks are advanced; the
``schedule`` argument of :func:`run` exists to check exactly that.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Generator, Sequence

import numpy as np

from ._validation import check_context
from .exceptions import AssemblyError, InputError, ProtocolError
from .model import (
    CausalMask,
    KVCacheSegment,
    WeightSet,
    causal_attention,
    finish_layer,
    qkv_project,
)
from .partition import ContextPartition

FAULTS = ("drop_handoff", "duplicate_handoff", "misroute_handoff")


class Strategy(str, enum.Enum):
    SERIAL = "serial"
    TSP = "tsp"
    KVR = "kvr"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown strategy {value!r}; expected serial, tsp or kvr") from None


class MessageKind(str, enum.Enum):
    KV_HANDOFF = "kv_handoff"
    GATHER_SHARE = "gather_share"


@dataclass(frozen=True)
class WorkerMessage:
    kind: MessageKind
    layer: int
    src: int
    payload: KVCacheSegment


@dataclass(frozen=True)
class Send:
    dst: int
    message: WorkerMessage


@dataclass(frozen=True)
class Recv:
    src: int
    kind: MessageKind
    layer: int


@dataclass(frozen=True)
class Barrier:
    layer: int


@dataclass
class ExecutionMetrics:
    """Instrumented counters, summed over all layers.

    ``dot_products[i]`` counts query-row/key-row products formed by rank ``i``
    (the dense ``QK^T`` size, masked entries included).  Pair counts are
    token rows of (K, V); counting K and V rows separately is
    what the ``*_rows`` properties report.
    """

    n_layers: int
    dot_products: list[int]
    pairs_sent: list[int]
    pairs_received: list[int]
    barrier_count: int = 0
    wait_events: list[int] = field(default_factory=list)

    @property
    def dot_products_per_layer(self) -> list[int]:
        return [d // self.n_layers for d in self.dot_products]

    @property
    def kv_pairs_sent(self) -> int:
        return sum(self.pairs_sent)

    @property
    def kv_rows_sent(self) -> int:
        return 2 * self.kv_pairs_sent

    @property
    def kv_pairs_per_layer(self) -> int:
        return self.kv_pairs_sent // self.n_layers

    @property
    def kv_rows_per_layer(self) -> int:
        return 2 * self.kv_pairs_per_layer

    @property
    def rows_received_per_layer(self) -> list[int]:
        return [2 * r // self.n_layers for r in self.pairs_received]

    @property
    def max_dot_products(self) -> int:
        return max(self.dot_products_per_layer)

    def to_dict(self) -> dict:
        return {
            "dot_products_per_layer": self.dot_products_per_layer,
            "kv_pairs_per_layer": self.kv_pairs_per_layer,
            "kv_rows_per_layer": self.kv_rows_per_layer,
            "rows_received_per_layer": self.rows_received_per_layer,
            "barrier_count": self.barrier_count,
            "wait_events": list(self.wait_events),
        }


@dataclass
class ExecutionResult:
    hidden_out: np.ndarray
    metrics: ExecutionMetrics
    cache: list[KVCacheSegment]
    partition: ContextPartition
    strategy: Strategy

    @property
    def first_token_hidden(self) -> np.ndarray:
        return self.hidden_out[-1]


# --- rank programs -------------------------------------------------------

WorkerProgram = Generator[object, object, tuple[np.ndarray, list[KVCacheSegment]]]


def _kvr_worker(rank, p, hidden, span, weights, counters) -> WorkerProgram:
    cfg = weights.config
    start, end = span
    cache = []
    for layer in range(cfg.n_layers):
        prefix = None
        if rank > 0:
            msg = yield Recv(rank - 1, MessageKind.KV_HANDOFF, layer)
            prefix = msg.payload
        Q, K, V = qkv_project(hidden, weights, layer)
        local = KVCacheSegment(layer, start, end, K, V)
        full = local if prefix is None else prefix.extend(local)
        if rank < p - 1:
            yield Send(rank + 1, WorkerMessage(MessageKind.KV_HANDOFF, layer, rank, full))
        attn = causal_attention(
            Q, full.K, full.V, CausalMask(start, end - start), cfg.n_heads, cfg.n_kv_heads,
            precision=cfg.precision,
        )
        counters[rank] += Q.shape[0] * full.rows
        hidden = finish_layer(hidden, attn, weights, layer)
        cache.append(full)
    return hidden, cache


def _tsp_worker(rank, p, hidden, span, weights, counters) -> WorkerProgram:
    cfg = weights.config
    start, end = span
    cache = []
    for layer in range(cfg.n_layers):
        Q, K, V = qkv_project(hidden, weights, layer)
        local = KVCacheSegment(layer, start, end, K, V)
        for dst in range(p):
            if dst != rank:
                yield Send(dst, WorkerMessage(MessageKind.GATHER_SHARE, layer, rank, local))
        if p > 1:
            yield Barrier(layer)
        shares = [local]
        for src in range(p):
            if src != rank:
                msg = yield Recv(src, MessageKind.GATHER_SHARE, layer)
                shares.append(msg.payload)
        shares.sort(key=lambda s: s.start_pos)
        full = shares[0]
        for seg in shares[1:]:
            full = full.extend(seg)
        attn = causal_attention(
            Q, full.K, full.V, CausalMask(start, end - start), cfg.n_heads, cfg.n_kv_heads,
            precision=cfg.precision,
        )
        counters[rank] += Q.shape[0] * full.rows
        hidden = finish_layer(hidden, attn, weights, layer)
        cache.append(full)
    return hidden, cache


# --- scheduler -----------------------------------------------------------


class _Scheduler:
    def __init__(self, programs, n_layers, schedule=None, fault=None):
        self.programs = programs
        self.p = len(programs)
        self.n_layers = n_layers
        self.fault = fault
        if schedule is None or schedule == "forward":
            self._pick = lambda ready: ready[0]
        elif schedule == "reverse":
            self._pick = lambda ready: ready[-1]
        elif isinstance(schedule, (int, np.integer)):
            rng = np.random.default_rng(int(schedule))
            self._pick = lambda ready: ready[int(rng.integers(len(ready)))]
        else:
            raise ValueError(f"unknown schedule {schedule!r}")
        self.channels: dict[tuple[int, int], list[WorkerMessage]] = defaultdict(list)
        self.pairs_sent = [0] * self.p
        self.pairs_received = [0] * self.p
        self.wait_events = [0] * self.p
        self.barrier_count = 0

    def _deliver(self, src: int, op: Send) -> None:
        msg = op.message
        dst = op.dst
        copies = 1
        if self.fault and src == 0 and msg.layer == 0:
            if self.fault == "drop_handoff":
                return
            if self.fault == "duplicate_handoff":
                copies = 2
            elif self.fault == "misroute_handoff":
                dst = dst + 1
        if not 0 <= dst < self.p or dst == src:
            raise ProtocolError(f"rank {src} sent layer-{msg.layer} message to invalid rank {dst}")
        if msg.kind is MessageKind.KV_HANDOFF and dst != src + 1:
            raise ProtocolError(f"KV handoff from rank {src} must go to rank {src + 1}, not {dst}")
        if msg.src != src:
            raise ProtocolError(f"rank {src} forged a message from rank {msg.src}")
        for _ in range(copies):
            self.channels[src, dst].append(msg)
            self.pairs_sent[src] += msg.payload.rows

    def _take(self, rank: int, op: Recv) -> WorkerMessage | None:
        queue = self.channels[op.src, rank]
        hits = [i for i, m in enumerate(queue) if m.kind is op.kind and m.layer == op.layer]
        if not hits:
            return None
        if len(hits) > 1:
            raise ProtocolError(
                f"duplicate {op.kind.value} for layer {op.layer} from rank {op.src} to rank {rank}"
            )
        msg = queue.pop(hits[0])
        self.pairs_received[rank] += msg.payload.rows
        return msg

    def run(self):
        p = self.p
        results = [None] * p
        pending = [None] * p  # value to send into each generator
        blocked: dict[int, object] = {}
        done = set()

        def advance(rank):
            try:
                op = self.programs[rank].send(pending[rank])
            except StopIteration as stop:
                results[rank] = stop.value
                done.add(rank)
                return
            pending[rank] = None
            if isinstance(op, Send):
                self._deliver(rank, op)
            elif isinstance(op, Recv):
                msg = self._take(rank, op)
                if msg is None:
                    self.wait_events[rank] += 1
                    blocked[rank] = op
                else:
                    pending[rank] = msg
            elif isinstance(op, Barrier):
                blocked[rank] = op
            else:
                raise ProtocolError(f"rank {rank} yielded unknown request {op!r}")

        while len(done) < p:
            ready = []
            for rank in range(p):
                if rank in done:
                    continue
                op = blocked.get(rank)
                if op is None:
                    ready.append(rank)
                elif isinstance(op, Recv):
                    msg = self._take(rank, op)
                    if msg is not None:
                        del blocked[rank]
                        pending[rank] = msg
                        ready.append(rank)
            if not ready:
                self._release_barrier_or_fail(blocked, done)
                continue
            advance(self._pick(ready))

        leftovers = [(k, m) for k, q in self.channels.items() for m in q]
        if leftovers:
            (src, dst), m = leftovers[0]
            raise ProtocolError(
                f"{len(leftovers)} undelivered message(s), e.g. {m.kind.value} layer {m.layer} "
                f"from rank {src} to rank {dst} (duplicate or misrouted)"
            )
        return results

    def _release_barrier_or_fail(self, blocked, done):
        barriers = {op.layer for op in blocked.values() if isinstance(op, Barrier)}
        if not done and len(blocked) == self.p and len(barriers) == 1 and all(
            isinstance(op, Barrier) for op in blocked.values()
        ):
            blocked.clear()
            self.barrier_count += 1
            return
        waits = [
            f"rank {r} waits for {op.kind.value} layer {op.layer} from rank {op.src}"
            if isinstance(op, Recv)
            else f"rank {r} waits at barrier {op.layer}"
            for r, op in sorted(blocked.items())
        ]
        raise ProtocolError("deadlock: " + "; ".join(waits))


def run(
    strategy,
    context,
    partition: ContextPartition,
    weights: WeightSet,
    *,
    schedule=None,
    fault: str | None = None,
) -> ExecutionResult:
    """Execute the prompt phase across ``partition.p`` in-process ranks.

    ``schedule`` picks the rank to advance whenever several can make progress:
    ``None``/"forward" (lowest rank), "reverse" (highest) or an integer seed
    for a random interleaving.  ``fault`` corrupts rank 0's first outgoing
    message (see :data:`FAULTS`) to exercise protocol error handling.
    """
    strategy = Strategy.parse(strategy)
    cfg = weights.config
    ctx = check_context(context, cfg.d_model, cfg.dtype)
    if partition.context_length != ctx.shape[0]:
        raise InputError(
            f"partition covers {partition.context_length} tokens, context has {ctx.shape[0]}"
        )
    p = partition.p
    if strategy is Strategy.SERIAL and p != 1:
        raise InputError(f"serial strategy requires p == 1, got p={p}")
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")

    worker = _tsp_worker if strategy is Strategy.TSP else _kvr_worker
    counters = [0] * p
    programs = []
    for rank in range(p):
        s, e = partition.span(rank)
        programs.append(worker(rank, p, ctx[s:e], (s, e), weights, counters))
    sched = _Scheduler(programs, cfg.n_layers, schedule=schedule, fault=fault)
    results = sched.run()

    hidden = assemble_output([h for h, _ in results], partition)
    metrics = ExecutionMetrics(
        n_layers=cfg.n_layers,
        dot_products=counters,
        pairs_sent=sched.pairs_sent,
        pairs_received=sched.pairs_received,
        barrier_count=sched.barrier_count,
        wait_events=sched.wait_events,
    )
    # the last rank holds the complete cache in both parallel schemes
    return ExecutionResult(hidden, metrics, results[-1][1], partition, strategy)


def assemble_output(per_worker_hidden: Sequence[np.ndarray], partition: ContextPartition) -> np.ndarray:
    if len(per_worker_hidden) != partition.p:
        raise AssemblyError(f"got {len(per_worker_hidden)} blocks for {partition.p} workers")
    for rank, (block, size) in enumerate(zip(per_worker_hidden, partition.sizes)):
        if np.ndim(block) != 2 or np.shape(block)[0] != size:
            raise AssemblyError(
                f"rank {rank} returned {np.shape(block)} rows, partition expects {size}"
            )
    return np.concatenate(per_worker_hidden, axis=0)


def dot_product_counts(strategy, partition: ContextPartition) -> list[int]:
    """Per-layer ``QK^T`` products per rank: ``c_i * b_{i+1}`` (KVR) or ``c_i * C`` (TSP)."""
    strategy = Strategy.parse(strategy)
    C = partition.context_length
    if strategy is Strategy.TSP:
        return [c * C for c in partition.sizes]
    return [c * b for c, b in zip(partition.sizes, partition.boundaries[1:])]


def traffic_pairs(strategy, partition: ContextPartition) -> int:
    """Total (K, V) row pairs put on the network per layer."""
    strategy = Strategy.parse(strategy)
    p = partition.p
    if strategy is Strategy.TSP:
        return (p - 1) * partition.context_length
    if strategy is Strategy.KVR:
        return sum(partition.boundaries[1:-1])
    return 0
