"""Command line: ``verify``, ``run`` and ``bench``.

Examples::

    relaybatch verify --cases 200
    relaybatch run --policy baton --slots 4 --dataset D2 --out trace.csv
    relaybatch bench --dataset D2 --slots 2 4 6 8 10
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .engine import SKIP_MASK_ZEROING
from .metrics import comparison_table, summarize
from .model import ModelConfig, ScriptedModel, TinyTransformer
from .scheduler import InsertionOrder, Policy, Scheduler, SchedulerConfig
from .verify import equivalence_suite, inertness_suite, mutation_check, preemption_suite
from .workload import WorkloadSpec, gen_workload, load_workload

FAULTS = (SKIP_MASK_ZEROING,)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scripted", action=argparse.BooleanOptionalAction, default=True,
                   help="scripted answers (default) or the tiny transformer (--no-scripted)")
    p.add_argument("--model-layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--vocab", type=int, default=101)


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="D2", help="D1, D2 or a workload file (one JSON record per line)")
    p.add_argument("--scale", type=float, default=None,
                   help="length multiplier; defaults to 1.0 scripted, 0.1 with the tiny transformer")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


def _add_scheduler_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget-bytes", type=float, default=math.inf)
    p.add_argument("--order", choices=[o.value for o in InsertionOrder], default="fcfs")
    p.add_argument("--no-release", action="store_true", help="never release the shared KV prefix")
    p.add_argument("--columns-per-step", type=float, default=64.0,
                   help="token columns one decode step's worth of time can compute")
    p.add_argument("--kv-columns-per-step", type=float, default=math.inf,
                   help="cached columns one step can read; finite values charge for KV reads")
    p.add_argument("--wall", action="store_true", help="record wall-clock nanoseconds (traces stop being reproducible)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaybatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="randomized equivalence, inertness and preemption checks")
    v.add_argument("--cases", type=int, default=200)
    v.add_argument("--inertness-cases", type=int, default=50)
    v.add_argument("--preemption-cases", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", choices=FAULTS, default=None,
                   help="run the equivalence suite against a deliberately broken engine")

    r = sub.add_parser("run", help="run one policy and write its per-iteration trace")
    r.add_argument("--policy", choices=[p.value for p in Policy], default="baton")
    r.add_argument("--slots", type=int, default=4)
    r.add_argument("--out", type=Path, default=None, help="trace CSV path")
    _add_workload_args(r)
    _add_scheduler_args(r)
    _add_model_args(r)

    b = sub.add_parser("bench", help="compare all four policies over several slot counts")
    b.add_argument("--slots", type=int, nargs="+", default=[2, 4, 6, 8, 10])
    b.add_argument("--out", type=Path, default=None, help="directory for one trace CSV per run")
    _add_workload_args(b)
    _add_scheduler_args(b)
    _add_model_args(b)
    return parser


def make_model(args, workload=None):
    if args.scripted:
        return ScriptedModel(seed=args.seed)
    longest = max((len(q.prompt) + q.max_new_tokens for q in workload or ()), default=0)
    return TinyTransformer(ModelConfig(layers=args.model_layers, heads=args.heads, head_dim=args.head_dim,
                                       vocab_size=args.vocab, max_positions=max(512, longest), seed=args.seed))


def make_workload(args):
    vocab = 32000 if args.scripted else args.vocab
    path = Path(args.dataset)
    if args.dataset.upper() not in ("D1", "D2") and path.exists():
        return load_workload(path, vocab_size=vocab, seed=args.seed)
    scale = args.scale if args.scale is not None else (1.0 if args.scripted else 0.1)
    return gen_workload(WorkloadSpec(args.dataset, count=args.count, seed=args.seed, scale=scale, vocab_size=vocab))


def make_config(args, policy: str, slots: int) -> SchedulerConfig:
    return SchedulerConfig(
        batch_slots=slots, policy=policy, insertion_order=args.order,
        memory_budget_bytes=args.budget_bytes, release_before_insert=not args.no_release,
        columns_per_step=args.columns_per_step, kv_columns_per_step=args.kv_columns_per_step,
        seed=args.seed, record_wall=args.wall,
    )


def cmd_verify(args) -> int:
    if args.cases < 1:
        raise SystemExit("--cases must be >= 1")
    if args.inject_fault:
        report = equivalence_suite(args.cases, args.seed, faults={args.inject_fault})
        print(report.line())
        return 0 if report.ok else 1
    reports = [
        equivalence_suite(args.cases, args.seed),
        inertness_suite(args.inertness_cases, args.seed),
        preemption_suite(args.preemption_cases, args.seed),
        mutation_check(seed=args.seed),
    ]
    for r in reports:
        print(r.line())
    return 0 if all(r.ok for r in reports) else 1


def cmd_run(args) -> int:
    workload = make_workload(args)
    model = make_model(args, workload)
    trace = Scheduler(make_config(args, args.policy, args.slots), model).run(workload)
    if args.out is not None:
        trace.to_csv(args.out)
    print(comparison_table([summarize(trace)]))
    return 0


def cmd_bench(args) -> int:
    workload = make_workload(args)
    model = make_model(args, workload)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    reports, rows = [], []
    for slots in args.slots:
        traces = {}
        for policy in Policy:
            traces[policy] = Scheduler(make_config(args, policy.value, slots), model).run(workload)
            if args.out is not None:
                traces[policy].to_csv(args.out / f"{policy.value}_{slots}.csv")
        base = traces[Policy.BENCHMARK]
        reports += [summarize(t, base) for t in traces.values()]
        times = {p: t.completion_time for p, t in traces.items()}
        rows.append((slots, times, times[Policy.BENCHMARK] / times[Policy.BATON],
                     times[Policy.BATON] / times[Policy.BATON_PD]))
    print(comparison_table(reports))
    print()
    print(f"{'slots':>5} {'benchmark':>10} {'pd':>10} {'baton':>10} {'baton-pd':>10} "
          f"{'baton/bench':>12} {'pd-gain':>8}")
    for slots, t, gain, pd_gain in rows:
        print(f"{slots:>5} {t[Policy.BENCHMARK]:>10.1f} {t[Policy.PD]:>10.1f} {t[Policy.BATON]:>10.1f} "
              f"{t[Policy.BATON_PD]:>10.1f} {gain:>12.3f} {pd_gain:>8.3f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return {"verify": cmd_verify, "run": cmd_run, "bench": cmd_bench}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
