"""Randomized equivalence checks for the batch engine.

A scenario drives one live batch with a random mix of raw inserts, prefilled
inserts, prefix releases and extract-then-reinsert preemptions.  Every query
must emit exactly the tokens it emits alone, and sampled logits must match a
float64 no-cache forward of the same context.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .engine import (SKIP_MASK_ZEROING, embed_insert, empty_batch, extract_slot, fill_placeholders,
                     prefill_group, release_prefix, run_solo, shape_insert, step)
from .tensor_core import ContractViolation
from .model import ModelConfig, TinyTransformer
from .scheduler import Query


@dataclass
class ScenarioResult:
    seed: int
    slots: int
    queries: int
    forwards: int
    events: dict
    mismatched: list[int]
    logit_checks: int
    max_logit_error: float
    outputs: dict[int, list[int]] = field(repr=False, default_factory=dict)
    logits: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatched


@dataclass
class SuiteReport:
    name: str
    cases: int
    failures: list[int]
    seconds: float
    logit_checks: int = 0
    max_logit_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def line(self) -> str:
        verdict = "PASS" if self.ok else "FAIL"
        extra = f" logit_checks={self.logit_checks} max_err={self.max_logit_error:.2e}" if self.logit_checks else ""
        return f"{verdict} {self.name}: {self.cases - len(self.failures)}/{self.cases} cases{extra} ({self.seconds:.1f}s)"


def random_model(rng: np.random.Generator) -> TinyTransformer:
    return TinyTransformer(ModelConfig(
        layers=int(rng.integers(1, 3)), heads=int(rng.integers(1, 3)), head_dim=int(rng.choice([4, 8])),
        vocab_size=int(rng.integers(24, 80)), max_positions=64, seed=int(rng.integers(2**31)),
    ))


def random_queries(rng: np.random.Generator, config: ModelConfig, count: int) -> list[Query]:
    out = []
    for qid in range(count):
        n = int(rng.integers(1, 13))
        prompt = tuple(int(t) for t in rng.integers(2, config.vocab_size, size=n))
        out.append(Query(qid, prompt, priority=int(rng.integers(0, 3)), max_new_tokens=int(rng.integers(2, 11))))
    return out


def run_scenario(seed: int, *, faults=frozenset(), perturb_seed: int | None = None,
                 check_logits: float = 0.3, keep_logits: bool = False) -> ScenarioResult:
    """Drive one randomized batch to exhaustion and compare against solo runs.

    With ``perturb_seed`` every hidden K/V cell is overwritten with random
    values before each forward; the event sequence is unchanged because it
    depends only on ``seed``.
    """
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    cfg = model.config
    slots = int(rng.integers(2, 9))
    queries = random_queries(rng, cfg, int(rng.integers(slots + 1, 2 * slots + 5)))
    noise = None if perturb_seed is None else np.random.default_rng(perturb_seed)

    batch = empty_batch(model, slots, faults)
    pending = list(queries)
    parked = []
    outputs: dict[int, list[int]] = {}
    events = dict(shape=0, embed=0, release=0, preempt=0)
    logit_checks, max_err = 0, 0.0
    kept = []

    def finish(query, generated):
        outputs[query.id] = list(generated)

    while pending or parked or batch.occupied():
        if rng.random() < 0.5:
            events["release"] += bool(release_prefix(batch))
        live = [i for i in batch.occupied() if not batch.slots[i].raw_pending]
        if live and rng.random() < 0.15:
            parked.append(extract_slot(batch, int(rng.choice(live))))
            events["preempt"] += 1
        for slot in batch.drained():
            if parked and rng.random() < 0.5:
                embed_insert(batch, slot, parked.pop(0))
                events["embed"] += 1
            elif pending and rng.random() < 0.5:
                shape_insert(batch, slot, pending.pop(0))
                events["shape"] += 1
            elif pending and rng.random() < 0.6:
                group = [pending.pop(0) for _ in range(min(len(pending), int(rng.integers(1, 4))))]
                for pq in prefill_group(group, model):
                    if len(pq.generated) >= pq.query.max_new_tokens or pq.generated[-1] == cfg.eos_token:
                        finish(pq.query, pq.generated)
                    else:
                        parked.append(pq)
        if not batch.occupied():
            continue

        contexts = {i: list(batch.slots[i].occupant.prompt) + batch.slots[i].generated for i in batch.occupied()}
        if noise is not None:
            fill_placeholders(batch, noise)
        step(batch)
        batch.check_invariants()
        if keep_logits:
            kept.append(batch.last_logits.copy())
        for i, ctx in contexts.items():
            if rng.random() < check_logits:
                ref = model.reference_logits(ctx)[-1]
                err = float(np.max(np.abs(batch.last_logits[i].astype(np.float64) - ref)))
                max_err = max(max_err, err)
                logit_checks += 1
                if err > 1e-6:
                    outputs.setdefault(-1, []).append(i)
        for _, query, generated in batch.last_finished:
            finish(query, generated)

    mismatched = [q.id for q in queries if outputs.get(q.id) != run_solo(q, model)]
    if -1 in outputs:
        mismatched.append(-1)
    return ScenarioResult(seed, slots, len(queries), batch.forwards, events, mismatched,
                          logit_checks, max_err, outputs, kept)


def equivalence_suite(cases: int = 200, seed: int = 0, faults=frozenset()) -> SuiteReport:
    t0 = time.perf_counter()
    failures, checks, err = [], 0, 0.0
    for k in range(cases):
        try:
            r = run_scenario(seed * 100_003 + k, faults=faults)
        except (AssertionError, ContractViolation):
            failures.append(seed * 100_003 + k)
            continue
        checks += r.logit_checks
        err = max(err, r.max_logit_error)
        if not r.ok:
            failures.append(r.seed)
    return SuiteReport("equivalence", cases, failures, time.perf_counter() - t0, checks, err)


def inertness_suite(cases: int = 50, seed: int = 0) -> SuiteReport:
    """Random values in hidden cells must not change a single bit of any logit."""
    t0 = time.perf_counter()
    failures = []
    for k in range(cases):
        s = seed * 100_003 + 50_000 + k
        clean = run_scenario(s, check_logits=0.0, keep_logits=True)
        noisy = run_scenario(s, check_logits=0.0, keep_logits=True, perturb_seed=s + 1)
        same = clean.outputs == noisy.outputs and len(clean.logits) == len(noisy.logits) and all(
            np.array_equal(a, b) for a, b in zip(clean.logits, noisy.logits))
        if not same:
            failures.append(s)
    return SuiteReport("inertness", cases, failures, time.perf_counter() - t0)


def mutation_check(cases: int = 40, seed: int = 0) -> SuiteReport:
    """The suite must notice when a reused slot's old mask stays visible.

    Passes when at least one scenario fails under the injected fault.
    """
    report = equivalence_suite(cases, seed, faults={SKIP_MASK_ZEROING})
    caught = bool(report.failures)
    return SuiteReport("mutation", 1, [] if caught else [seed], report.seconds)


__all__ = ["ScenarioResult", "SuiteReport", "equivalence_suite", "inertness_suite", "mutation_check",
           "preemption_case", "preemption_suite", "random_model", "random_queries", "run_scenario"]


def preemption_case(seed: int, policy: str = "baton") -> dict:
    """One urgent arrival into a full batch; returns the timing and token facts to check."""
    from .scheduler import Scheduler, SchedulerConfig
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    cfg = model.config
    slots = int(rng.integers(2, 7))
    # background queries that run to their cap keep every slot busy when the urgent one arrives
    background = []
    while len(background) < 2 * slots + 2:
        q = random_queries(rng, cfg, 1)[0]
        q = Query(len(background), q.prompt, priority=0, max_new_tokens=int(rng.integers(10, 17)))
        if len(run_solo(q, model)) == q.max_new_tokens:
            background.append(q)
    urgent = None
    while urgent is None or len(run_solo(urgent, model)) < 2:
        prompt = tuple(int(t) for t in rng.integers(2, cfg.vocab_size, size=int(rng.integers(1, 9))))
        urgent = Query(len(background), prompt, priority=1, arrival=float(rng.integers(2, 8)),
                       max_new_tokens=int(rng.integers(2, 9)))
    workload = background + [urgent]
    trace = Scheduler(SchedulerConfig(batch_slots=slots, policy=policy, seed=seed), model).run(workload)
    victims = [r for r in trace.queries.values() if r.preempted_at]
    solo_ok = all(trace.outputs[q.id] == run_solo(q, model) for q in workload)
    rec = trace.queries[urgent.id]
    preempted = [v.preempted_at[0] for v in victims if v.id != urgent.id]
    return dict(seed=seed, policy=policy, slots=slots, victims=len(victims),
                preempted_at=min(preempted) if preempted else None,
                urgent_first_batch=rec.first_batch_iteration, tokens_ok=solo_ok)


def preemption_suite(cases: int = 20, seed: int = 0) -> SuiteReport:
    """Urgent queries decode one iteration after preemption; victims resume losslessly."""
    t0 = time.perf_counter()
    failures = []
    for k in range(cases):
        s = seed * 100_003 + 80_000 + k
        r = preemption_case(s, "baton" if k % 2 == 0 else "baton-pd")
        timely = r["preempted_at"] is not None and r["urgent_first_batch"] == r["preempted_at"] + 1
        if not (timely and r["tokens_ok"]):
            failures.append(s)
    return SuiteReport("preemption", cases, failures, time.perf_counter() - t0)
