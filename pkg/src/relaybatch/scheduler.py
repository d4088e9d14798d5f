"""Decode-loop policies over a live batch, on a simulated clock.

Four policies share one engine:

``benchmark``
    Run-to-completion batches prefilled in-batch, FCFS.
``pd``
    Prompts prefilled on a separate lane in length-sorted groups; decode
    batches are drawn in a seeded random order and run to completion.
``baton``
    A drained slot is refilled immediately by shaping the next raw prompt into
    the batch.
``baton-pd``
    A drained slot is refilled immediately by embedding an already prefilled
    query.

Time is counted in decode steps.  A forward that computes ``rows * width``
token columns costs ``max(1, rows * width / columns_per_step)``: narrow
forwards are latency-bound and cost one step, wide prefills become
compute-bound.  A finite ``kv_columns_per_step`` adds the cost of reading the
cache, ``1 + rows * kv_len / kv_columns_per_step``, and the larger term wins.  The prefill lane of the two ``pd`` policies runs
asynchronously beside the decode lane with the same cost rule.  Every policy
reports each query as soon as it finishes.
"""
from __future__ import annotations

import enum
import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .engine import (PrefilledQuery, SlotStatus, embed_insert, empty_batch, extract_slot, is_finished,
                     prefill_group, release_prefix, shape_insert, step)
from .metrics import IterationRecord, MetricsTrace, QueryRecord


class ConfigurationError(ValueError):
    pass


class MemoryBudgetError(RuntimeError):
    """A single query cannot fit the KV budget on its own."""


class PreemptionRefused(Exception):
    """No live query has lower priority than the urgent one."""


class Policy(str, enum.Enum):
    BENCHMARK = "benchmark"
    PD = "pd"
    BATON = "baton"
    BATON_PD = "baton-pd"

    @property
    def relay(self) -> bool:
        return self in (Policy.BATON, Policy.BATON_PD)

    @property
    def decoupled(self) -> bool:
        return self in (Policy.PD, Policy.BATON_PD)


class InsertionOrder(str, enum.Enum):
    FCFS = "fcfs"
    SHORTEST_PROMPT_FIRST = "spf"


@dataclass
class Query:
    id: int
    prompt: tuple[int, ...]
    priority: int = 0
    arrival: float = 0.0
    max_new_tokens: int = 64
    answer_len: int | None = None

    def __post_init__(self):
        self.prompt = tuple(int(t) for t in self.prompt)
        if not self.prompt:
            raise ValueError(f"query {self.id}: empty prompt")
        if self.max_new_tokens < 1:
            raise ValueError(f"query {self.id}: max_new_tokens must be >= 1")


@dataclass
class SchedulerConfig:
    batch_slots: int = 4
    policy: Policy = Policy.BATON
    insertion_order: InsertionOrder = InsertionOrder.FCFS
    memory_budget_bytes: float = math.inf
    release_before_insert: bool = True
    columns_per_step: float = 64.0
    kv_columns_per_step: float = math.inf
    seed: int = 0
    record_wall: bool = False

    def __post_init__(self):
        self.policy = Policy(self.policy)
        self.insertion_order = InsertionOrder(self.insertion_order)
        if self.batch_slots < 1:
            raise ConfigurationError("batch_slots must be >= 1")
        if self.columns_per_step <= 0:
            raise ConfigurationError("columns_per_step must be positive")


def forward_cost(rows: int, width: int, columns_per_step: float, kv_len: int = 0,
                 kv_columns_per_step: float = math.inf) -> float:
    return max(rows * width / columns_per_step, 1.0 + rows * kv_len / kv_columns_per_step)


def compose_prefill_groups(waiting, group_size: int) -> list[list]:
    """Sort by prompt length (stable) and chunk into groups of at most ``group_size``."""
    ordered = sorted(waiting, key=lambda q: len(q.prompt))
    return [ordered[i:i + group_size] for i in range(0, len(ordered), group_size)]


class HostKvStore:
    """Suspended queries, kept in suspension order."""

    def __init__(self):
        self._items: dict[int, tuple[int, PrefilledQuery]] = {}
        self._seq = itertools.count()

    def put(self, pq: PrefilledQuery) -> None:
        self._items[pq.id] = (next(self._seq), pq)

    def pop(self, qid: int) -> PrefilledQuery:
        return self._items.pop(qid)[1]

    def entries(self):
        return [(seq, pq) for seq, pq in self._items.values()]

    def __contains__(self, qid) -> bool:
        return qid in self._items

    def __len__(self) -> int:
        return len(self._items)


@dataclass(order=True)
class _Inflight:
    ready: float
    seq: int
    item: PrefilledQuery = field(compare=False)


class Scheduler:
    """Runs one workload under one policy and records a :class:`MetricsTrace`."""

    def __init__(self, config: SchedulerConfig, model, faults=frozenset()):
        self.config = config
        self.model = model
        self.faults = frozenset(faults)

    # -- public ---------------------------------------------------------------
    def run(self, workload) -> MetricsTrace:
        workload = list(workload)
        if not workload:
            raise ConfigurationError("empty workload")
        ids = [q.id for q in workload]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("query ids must be unique")
        self._check_budget(workload)
        self._reset(workload)
        {
            Policy.BENCHMARK: self._run_benchmark,
            Policy.PD: self._run_pd,
            Policy.BATON: self._run_relay,
            Policy.BATON_PD: self._run_relay,
        }[self.config.policy]()
        if len(self.done) != len(workload):
            raise RuntimeError("scheduler stopped with unfinished queries")
        return self.trace

    # -- setup ----------------------------------------------------------------
    def _column_bytes(self) -> int:
        return self.config.batch_slots * self.model.config.kv_column_bytes

    def _check_budget(self, workload) -> None:
        worst = max(len(q.prompt) + q.max_new_tokens for q in workload) * self._column_bytes()
        if self.config.memory_budget_bytes < worst:
            raise ConfigurationError(
                f"memory budget {self.config.memory_budget_bytes} below one query's worst case {worst}")

    def _reset(self, workload) -> None:
        cfg = self.config
        self.total = len(workload)
        self.future = sorted(workload, key=lambda q: (q.arrival, q.id))
        self.waiting: list[Query] = []
        self.pool: list[PrefilledQuery] = []
        self.inflight: list[_Inflight] = []
        self.host = HostKvStore()
        self.done: dict[int, list[int]] = {}
        self.clock = 0.0
        self.lane_free = 0.0
        self.prefill_forwards = 0
        self.output_tokens = 0
        self._seq = itertools.count()
        self.trace = MetricsTrace(cfg.policy.value, cfg.batch_slots)
        for q in workload:
            self.trace.queries[q.id] = QueryRecord(q.id, q.arrival, len(q.prompt), q.priority)
        self.trace.outputs = self.done

    # -- bookkeeping ----------------------------------------------------------
    def _order_key(self, q: Query):
        if self.config.insertion_order is InsertionOrder.SHORTEST_PROMPT_FIRST:
            return (-q.priority, len(q.prompt), q.arrival, q.id)
        return (-q.priority, q.arrival, q.id)

    def _admit(self) -> None:
        while self.future and self.future[0].arrival <= self.clock:
            self.waiting.append(self.future.pop(0))
        self.waiting.sort(key=self._order_key)

    def _count_tokens(self, tokens) -> None:
        eos = self.model.config.eos_token
        self.output_tokens += sum(1 for t in tokens if t != eos)

    def _complete(self, query, generated, when: float) -> None:
        rec = self.trace.queries[query.id]
        rec.completion_iteration = len(self.trace.rows)
        rec.completion_time = when
        rec.output_tokens = sum(1 for t in generated if t != self.model.config.eos_token)
        self.done[query.id] = list(generated)

    def _first_token(self, qid, iteration: int) -> None:
        rec = self.trace.queries[qid]
        if rec.first_token_iteration is None:
            rec.first_token_iteration = iteration

    def _forward(self, batch) -> None:
        width = batch.input_width
        cost = forward_cost(batch.num_slots, width, self.config.columns_per_step,
                            batch.kv_len + width, self.config.kv_columns_per_step)
        entering = [i for i, s in enumerate(batch.slots)
                    if s.status is SlotStatus.DECODING and self.trace.queries[s.occupant.id].first_batch_iteration is None]
        occupants = {i: batch.slots[i].occupant for i in entering}
        t0 = time.perf_counter_ns() if self.config.record_wall else 0
        emitted = step(batch)
        wall = time.perf_counter_ns() - t0 if self.config.record_wall else 0
        self.clock += cost
        iteration = len(self.trace.rows) + 1
        for i, q in occupants.items():
            self.trace.queries[q.id].first_batch_iteration = iteration
        self._count_tokens(emitted)
        for i, s in enumerate(batch.slots):
            if s.status is SlotStatus.DECODING:
                self._first_token(s.occupant.id, iteration)
        for slot, query, generated in batch.last_finished:
            self._first_token(query.id, iteration)
            self._complete(query, generated, self.clock)
        peak = batch.kv_bytes
        self._housekeep(batch)
        self._record(batch, iteration, width, wall, peak)

    def _housekeep(self, batch) -> None:
        if self.config.policy.relay and self.config.release_before_insert:
            release_prefix(batch)

    def _record(self, batch, iteration, width, wall, peak, kv_bytes=None) -> None:
        live = len(batch.occupied()) if batch is not None else 0
        self.trace.rows.append(IterationRecord(
            iteration=iteration,
            clock=self.clock,
            wall_ns=wall,
            width=width,
            completed=len(self.done),
            output_tokens=self.output_tokens,
            idle_slots=batch.last_idle,
            bubbles=batch.last_bubbles,
            kv_bytes=batch.kv_bytes if kv_bytes is None else kv_bytes,
            kv_peak_bytes=peak,
            prefill_forwards=self.prefill_forwards,
            waiting=len(self.waiting) + len(self.future),
            prefilled=len(self.pool) + len(self.inflight),
            live=live,
            suspended=len(self.host),
        ))

    # -- prefill lane ---------------------------------------------------------
    def _lane_pick(self) -> list[Query]:
        # the most urgent priority level first, then length-sorted groups within it
        top = max(q.priority for q in self.waiting)
        level = [q for q in self.waiting if q.priority == top]
        group = compose_prefill_groups(level, self.config.batch_slots)[0]
        for q in group:
            self.waiting.remove(q)
        return group

    def _advance_lane(self) -> None:
        """Start every prefill group the lane can begin by now; collect finished ones."""
        while self.waiting and self.lane_free <= self.clock:
            group = self._lane_pick()
            start = max(self.lane_free, max(q.arrival for q in group))
            lmax = max(len(q.prompt) for q in group)
            cost = forward_cost(len(group), lmax, self.config.columns_per_step, lmax,
                                self.config.kv_columns_per_step)
            self.lane_free = start + cost
            self.prefill_forwards += 1
            for pq in prefill_group(group, self.model):
                heapq.heappush(self.inflight, _Inflight(self.lane_free, next(self._seq), pq))
        self._collect_ready()

    def _collect_ready(self) -> None:
        eos = self.model.config.eos_token
        while self.inflight and self.inflight[0].ready <= self.clock:
            entry = heapq.heappop(self.inflight)
            pq = entry.item
            self._count_tokens(pq.generated)
            self._first_token(pq.id, len(self.trace.rows))
            if is_finished(pq.query, pq.generated, eos):
                self._complete(pq.query, pq.generated, entry.ready)
            else:
                self.pool.append(pq)

    def _next_event(self) -> float | None:
        times = []
        if self.future:
            times.append(self.future[0].arrival)
        if self.inflight:
            times.append(self.inflight[0].ready)
        if self.waiting and self.config.policy.decoupled:
            times.append(max(self.lane_free, self.clock))
        times = [t for t in times if t > self.clock] or times
        return min(times) if times else None

    def _idle_until_next_event(self) -> None:
        t = self._next_event()
        if t is None:
            raise RuntimeError("no runnable work and no pending event")
        self.clock = max(self.clock, t)

    # -- benchmark ------------------------------------------------------------
    def _run_benchmark(self) -> None:
        slots = self.config.batch_slots
        while len(self.done) < self.total:
            self._admit()
            if not self.waiting:
                self._idle_until_next_event()
                continue
            group, self.waiting = self.waiting[:slots], self.waiting[slots:]
            group.sort(key=lambda q: (q.arrival, q.id))
            batch = empty_batch(self.model, slots, self.faults)
            for i, q in enumerate(group):
                shape_insert(batch, i, q)
            self._run_to_completion(batch)

    def _run_to_completion(self, batch) -> None:
        while batch.occupied():
            self._admit()
            if self.config.policy.decoupled:
                self._advance_lane()
            self._forward(batch)
        # the batch is torn down here, freeing its whole cache
        self.trace.rows[-1].kv_bytes = 0

    # -- pd -------------------------------------------------------------------
    def _run_pd(self) -> None:
        slots = self.config.batch_slots
        rng = np.random.default_rng(self.config.seed)
        order = [q.id for q in self.future]
        order = [order[i] for i in rng.permutation(len(order))]
        while len(self.done) < self.total:
            self._admit()
            self._advance_lane()
            pending = [qid for qid in order if qid not in self.done]
            chosen = pending[:slots]
            ready = {pq.id: pq for pq in self.pool}
            missing = [qid for qid in chosen if qid not in ready]
            if missing:
                self._idle_until_next_event()
                continue
            batch = empty_batch(self.model, slots, self.faults)
            for i, qid in enumerate(chosen):
                pq = ready[qid]
                self.pool.remove(pq)
                embed_insert(batch, i, pq)
            self._run_to_completion(batch)

    # -- baton ----------------------------------------------------------------
    def _candidates(self):
        """Insertable work as ``(key, kind, item)``; suspended queries lead their priority level."""
        out = [((-pq.priority, 0, (seq,)), "host", pq) for seq, pq in self.host.entries()]
        if self.config.policy is Policy.BATON:
            out += [((-q.priority, 1, self._order_key(q)[1:]), "raw", q) for q in self.waiting]
        else:
            out += [((-pq.priority, 1, self._order_key(pq.query)[1:]), "pool", pq) for pq in self.pool]
        out.sort(key=lambda c: c[0])
        return out

    def _take(self, kind, item):
        if kind == "host":
            return self.host.pop(item.id)
        if kind == "raw":
            self.waiting.remove(item)
        else:
            self.pool.remove(item)
        return item

    def _fits(self, batch, kind, item) -> bool:
        budget = self.config.memory_budget_bytes
        if math.isinf(budget):
            return True
        if kind == "raw":
            cols = batch.kv_len + max(batch.input_width, len(item.prompt))
        else:
            cols = max(batch.kv_len, item.length) + batch.input_width
        return cols * self._column_bytes() <= budget

    def _insert(self, batch, slot, kind, item) -> None:
        if self.config.release_before_insert:
            release_prefix(batch)
        item = self._take(kind, item)
        if kind == "raw":
            shape_insert(batch, slot, item)
        else:
            embed_insert(batch, slot, item)

    def _refill(self, batch) -> None:
        for slot in batch.drained():
            for key, kind, item in self._candidates():
                if self._fits(batch, kind, item):
                    self._insert(batch, slot, kind, item)
                    break
            else:
                return

    def preempt(self, batch, urgent, kind: str) -> int:
        """Suspend the lowest-priority live query into the host store and insert ``urgent``.

        Ties go to the most recently inserted query.  Returns the victim slot;
        raises :class:`PreemptionRefused` when nobody has lower priority.
        """
        live = [i for i in batch.occupied() if not batch.slots[i].raw_pending]
        if not live:
            raise PreemptionRefused("no extractable live query")
        victim = min(live, key=lambda i: (batch.slots[i].occupant.priority, -batch.slots[i].inserted_seq))
        if batch.slots[victim].occupant.priority >= urgent.priority:
            raise PreemptionRefused(f"query {urgent.id} does not outrank any live query")
        pq = extract_slot(batch, victim)
        self.host.put(pq)
        self.trace.queries[pq.id].preempted_at.append(len(self.trace.rows))
        self._insert(batch, victim, kind, urgent)
        return victim

    def _preempt_all(self, batch) -> None:
        pending = self.waiting if self.config.policy is Policy.BATON else [pq.query for pq in self.pool]
        live = [batch.slots[i].occupant.priority for i in batch.occupied()]
        if not pending or not live or max(q.priority for q in pending) <= min(live):
            return
        while not batch.drained():
            cands = [c for c in self._candidates() if c[1] != "host"]
            if not cands:
                return
            _, kind, item = cands[0]
            try:
                self.preempt(batch, item, kind)
            except PreemptionRefused:
                return

    def scale_check(self, batch) -> None:
        """Suspend the longest live queries until the next forward fits the budget.

        A suspended query leaves its shaping bubbles behind, so even a lone
        query can come back smaller; only one that does not fit compacted is
        fatal.
        """
        budget = self.config.memory_budget_bytes
        if math.isinf(budget):
            return
        while (batch.kv_len + batch.input_width) * self._column_bytes() > budget:
            live = [i for i in batch.occupied() if not batch.slots[i].raw_pending]
            if not live:
                raise MemoryBudgetError("a staged prompt alone exceeds the memory budget")
            victim = max(live, key=lambda i: (batch.live_length(i), batch.slots[i].inserted_seq))
            pq = extract_slot(batch, victim)
            if (pq.length + 1) * self._column_bytes() > budget:
                raise MemoryBudgetError(f"query {pq.id} alone exceeds the memory budget")
            self.host.put(pq)
            self.trace.queries[pq.id].suspended_at.append(len(self.trace.rows))
            release_prefix(batch)

    def _run_relay(self) -> None:
        batch = empty_batch(self.model, self.config.batch_slots, self.faults)
        self.batch = batch
        while len(self.done) < self.total:
            self._admit()
            if self.config.policy.decoupled:
                self._advance_lane()
            if self.config.release_before_insert:
                release_prefix(batch)
            self._refill(batch)
            self._preempt_all(batch)
            self.scale_check(batch)
            if not batch.occupied():
                if len(self.done) >= self.total:
                    break
                self._idle_until_next_event()
                continue
            self._forward(batch)
