import math

import numpy as np
import pytest

from relaybatch import (ConfigurationError, MemoryBudgetError, ModelConfig, Policy, PreemptionRefused, Query,
                        ScriptedModel, Scheduler, SchedulerConfig, TinyTransformer, compose_prefill_groups,
                        new_batch, prefill_query, run_solo)
from relaybatch.verify import preemption_case


def scripted(qid, forwards, prompt_len=1, priority=0, arrival=0.0):
    """A query that occupies exactly ``forwards`` decode forwards (answer then EOS)."""
    return Query(qid, (5,) * prompt_len, priority=priority, arrival=arrival,
                 max_new_tokens=forwards, answer_len=forwards - 1)


def run(policy, workload, slots=2, model=None, **kw):
    return Scheduler(SchedulerConfig(batch_slots=slots, policy=policy, **kw), model or ScriptedModel()).run(workload)


@pytest.fixture(scope="module")
def tiny():
    return TinyTransformer(ModelConfig(seed=3, vocab_size=53, max_positions=128))


def tiny_workload(model, n=10, seed=0):
    rng = np.random.default_rng(seed)
    return [Query(i, tuple(rng.integers(2, model.config.vocab_size, size=int(rng.integers(1, 9)))),
                  max_new_tokens=int(rng.integers(3, 12))) for i in range(n)]


def test_hand_counted_iterations():
    workload = [scripted(i, n) for i, n in enumerate([7, 1, 1, 1, 1, 1, 1, 1])]
    bench = run("benchmark", workload)
    baton = run("baton", workload)
    assert bench.iterations == 10
    assert baton.iterations == 7
    assert bench.iterations / baton.iterations == pytest.approx(10 / 7)


def test_single_query_identical_under_every_policy(tiny):
    query = Query(0, (4, 8, 15), max_new_tokens=7)
    traces = [run(p, [query], slots=1, model=tiny) for p in Policy]
    assert all(t.outputs[0] == run_solo(query, tiny) for t in traces)
    decode = [t.iterations + (1 if p.decoupled else 0) for p, t in zip(Policy, traces)]
    assert len(set(decode)) == 1


def test_baton_pd_never_exceeds_baton():
    rng = np.random.default_rng(4)
    workload = [scripted(i, int(rng.integers(1, 30)), prompt_len=int(rng.integers(1, 200))) for i in range(40)]
    for slots in (2, 4, 6):
        assert run("baton-pd", workload, slots).iterations <= run("baton", workload, slots).iterations


def test_refinement_order_with_backlog():
    rng = np.random.default_rng(9)
    workload = [scripted(i, int(rng.integers(1, 25)), prompt_len=int(rng.integers(1, 60))) for i in range(30)]
    it = {p: run(p, workload, 3).iterations for p in ("benchmark", "baton", "baton-pd")}
    assert it["baton-pd"] <= it["baton"] <= it["benchmark"]


def test_compose_prefill_groups():
    lengths = [110, 10, 100, 12]
    groups = compose_prefill_groups([scripted(i, 1, prompt_len=n) for i, n in enumerate(lengths)], 2)
    assert [[len(x.prompt) for x in g] for g in groups] == [[10, 12], [100, 110]]


def test_empty_backlog_counts_idle_eos():
    trace = run("baton", [scripted(0, 5), scripted(1, 2)])
    assert trace.series("idle_slots").tolist() == [0, 0, 1, 1, 1]


def test_baton_bubbles_scale_with_prompt():
    L, slots = 9, 4
    workload = [scripted(i, 3 + i, prompt_len=L) for i in range(slots)] + [scripted(9, 4, prompt_len=L)]
    trace = run("baton", workload, slots)
    inserts = [r for r in trace.rows[1:] if r.width == L]
    assert inserts and all(r.bubbles == (slots - 1) * (L - 1) for r in inserts)
    assert run("baton-pd", workload, slots).series("bubbles").sum() == 0


def test_preemption_refused_for_equal_priority(tiny):
    sched = Scheduler(SchedulerConfig(batch_slots=2), tiny)
    sched._reset([Query(0, (3,)), Query(1, (4,)), Query(2, (5,))])
    batch = new_batch([Query(0, (3,)), Query(1, (4,))], tiny)
    with pytest.raises(PreemptionRefused):
        sched.preempt(batch, Query(2, (5,)), "raw")


@pytest.mark.parametrize("policy", ["baton", "baton-pd"])
def test_urgent_query_enters_next_iteration(policy):
    for seed in range(3):
        r = preemption_case(seed, policy)
        assert r["victims"] >= 1 and r["tokens_ok"]
        assert r["urgent_first_batch"] == r["preempted_at"] + 1


def test_victim_is_most_recent_among_lowest(tiny):
    sched = Scheduler(SchedulerConfig(batch_slots=3), tiny)
    queries = [Query(0, (3,), priority=0, max_new_tokens=9), Query(1, (4,), priority=0, max_new_tokens=9),
               Query(2, (5,), priority=1, max_new_tokens=9), Query(3, (6,), priority=2)]
    sched._reset(queries)
    sched.waiting.append(queries[3])
    batch = new_batch(queries[:3], tiny)
    assert sched.preempt(batch, queries[3], "raw") == 1
    assert 1 in sched.host


def test_budget_below_worst_case_rejected(tiny):
    workload = tiny_workload(tiny)
    worst = max(len(q.prompt) + q.max_new_tokens for q in workload) * 2 * tiny.config.kv_column_bytes
    with pytest.raises(ConfigurationError):
        run("baton", workload, 2, tiny, memory_budget_bytes=worst - 1)


def test_tight_budget_suspends_and_resumes(tiny):
    # long prompts shaped in beside long answers leave bubbles that outgrow the budget
    rng = np.random.default_rng(2)
    workload = [Query(i, tuple(rng.integers(2, 53, size=1 if i % 2 == 0 else 14)),
                      max_new_tokens=24 if i % 2 == 0 else 3) for i in range(12)]
    slots = 3
    worst = max(len(q.prompt) + q.max_new_tokens for q in workload) * slots * tiny.config.kv_column_bytes
    trace = run("baton", workload, slots, tiny, memory_budget_bytes=worst)
    suspended = [r for r in trace.queries.values() if r.suspended_at]
    assert suspended
    assert max(trace.series("kv_peak_bytes")) <= worst
    assert all(trace.outputs[q.id] == run_solo(q, tiny) for q in workload)


def test_infinite_budget_never_suspends(tiny):
    trace = run("baton", tiny_workload(tiny), 3, tiny)
    assert not any(r.suspended_at for r in trace.queries.values())
    assert trace.rows[-1].suspended == 0


def test_single_query_over_budget_is_fatal(tiny):
    sched = Scheduler(SchedulerConfig(batch_slots=1, memory_budget_bytes=tiny.config.kv_column_bytes), tiny)
    sched._reset([Query(0, (3, 4, 5))])
    batch = new_batch([Query(0, (3, 4, 5))], tiny)
    with pytest.raises(MemoryBudgetError):
        sched.scale_check(batch)


@pytest.mark.parametrize("policy", list(Policy))
def test_conservation_every_iteration(policy, tiny):
    workload = tiny_workload(tiny, 12, seed=5)
    workload[3].arrival = 6.0
    trace = run(policy, workload, 3, tiny)
    for r in trace.rows:
        assert r.completed + r.live + r.prefilled + r.suspended + r.waiting == len(workload)
    assert all(trace.outputs[q.id] == run_solo(q, tiny) for q in workload)


def test_tokens_identical_across_policies():
    rng = np.random.default_rng(1)
    workload = [scripted(i, int(rng.integers(1, 20)), prompt_len=int(rng.integers(1, 50))) for i in range(25)]
    traces = [run(p, workload, 4) for p in Policy]
    assert all(t.outputs == traces[0].outputs for t in traces)
    assert len({t.rows[-1].output_tokens for t in traces}) == 1


def test_pd_order_is_seeded():
    workload = [scripted(i, 1 + i % 5, prompt_len=3) for i in range(12)]
    a = run("pd", workload, 3, seed=1).to_csv()
    assert a == run("pd", workload, 3, seed=1).to_csv()


def test_shortest_prompt_first():
    workload = [scripted(0, 3, 1), scripted(1, 2, 40), scripted(2, 2, 5)]
    trace = run("baton", workload, 1, insertion_order="spf")
    firsts = sorted(trace.queries.values(), key=lambda r: r.first_batch_iteration)
    assert [r.id for r in firsts] == [0, 2, 1]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SchedulerConfig(batch_slots=0)
    with pytest.raises(ConfigurationError):
        run("baton", [])
    assert SchedulerConfig().memory_budget_bytes == math.inf
