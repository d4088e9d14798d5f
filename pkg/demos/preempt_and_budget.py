"""Priorities and a memory ceiling.

An urgent query arrives while every slot is busy; the lowest-priority live
query is moved to host memory and the urgent one starts on the very next
forward.  Then the same machinery keeps a run under a tight KV budget by
parking the query with the largest cache footprint.
"""
import numpy as np

from relaybatch import ModelConfig, Query, Scheduler, SchedulerConfig, TinyTransformer, run_solo

model = TinyTransformer(ModelConfig(seed=4, vocab_size=50, max_positions=128))
rng = np.random.default_rng(0)


def prompt(n):
    return tuple(int(t) for t in rng.integers(2, 50, size=n))


background = [Query(i, prompt(4), max_new_tokens=14) for i in range(6)]
urgent = Query(6, prompt(3), priority=5, arrival=4.0, max_new_tokens=4)
trace = Scheduler(SchedulerConfig(batch_slots=3, policy="baton-pd"), model).run(background + [urgent])
for rec in trace.queries.values():
    if rec.preempted_at:
        print(f"query {rec.id} suspended after iteration {rec.preempted_at}")
print(f"urgent query first decoded in iteration {trace.queries[6].first_batch_iteration}")
print("every stream equals its solo run:",
      all(trace.outputs[q.id] == run_solo(q, model) for q in background + [urgent]))

# long prompts shaped in beside long answers leave padded columns that grow the cache
mixed = [Query(i, prompt(1 if i % 2 == 0 else 14), max_new_tokens=24 if i % 2 == 0 else 3) for i in range(12)]
slots = 3
worst = max(len(q.prompt) + q.max_new_tokens for q in mixed) * slots * model.config.kv_column_bytes
tight = Scheduler(SchedulerConfig(batch_slots=slots, policy="baton", memory_budget_bytes=worst), model).run(mixed)
free = Scheduler(SchedulerConfig(batch_slots=slots, policy="baton"), model).run(mixed)
print(f"budget {worst} B: peak {tight.series('kv_peak_bytes').max()} B,"
      f" unbounded peak {free.series('kv_peak_bytes').max()} B,"
      f" suspensions {sum(len(r.suspended_at) for r in tight.queries.values())}")
assert tight.outputs == free.outputs
