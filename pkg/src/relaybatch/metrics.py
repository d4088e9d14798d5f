"""Per-iteration traces and the summaries computed from them."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np


@dataclass
class IterationRecord:
    """State at the end of one decode-lane forward.

    ``clock`` is simulated time in decode-step units.  ``kv_peak_bytes`` is
    the cache size right after the forward; ``kv_bytes`` is what remains held
    once the policy has freed what it can.  The four population columns count
    queries per state and always sum to the workload size together with
    ``completed``.
    """

    iteration: int
    clock: float
    wall_ns: int
    width: int
    completed: int
    output_tokens: int
    idle_slots: int
    bubbles: int
    kv_bytes: int
    kv_peak_bytes: int
    prefill_forwards: int
    waiting: int
    prefilled: int
    live: int
    suspended: int


TRACE_COLUMNS = [f.name for f in fields(IterationRecord)]


@dataclass
class QueryRecord:
    id: int
    arrival: float
    prompt_len: int
    priority: int = 0
    first_token_iteration: int | None = None
    first_batch_iteration: int | None = None
    completion_iteration: int | None = None
    completion_time: float | None = None
    output_tokens: int = 0
    preempted_at: list[int] = field(default_factory=list)
    suspended_at: list[int] = field(default_factory=list)


@dataclass
class MetricsTrace:
    policy: str
    slots: int
    rows: list[IterationRecord] = field(default_factory=list)
    queries: dict[int, QueryRecord] = field(default_factory=dict)
    outputs: dict[int, list[int]] = field(default_factory=dict)

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def completion_time(self) -> float:
        finished = [q.completion_time for q in self.queries.values() if q.completion_time is not None]
        return max(finished, default=0.0)

    @property
    def iterations(self) -> int:
        return len(self.rows)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(v) for v in asdict(r).values()])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 6))
    return v


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class Report:
    policy: str
    slots: int
    completion_time: float
    iterations: int
    forwards: int
    wall_ns: int
    speedup: float
    idle_fraction: float
    idle_fraction_with_backlog: float
    bubble_columns: int
    output_tokens: int
    mean_kv_bytes: float
    peak_kv_bytes: int
    completion_events: int
    longest_plateau: int


def summarize(trace: MetricsTrace, baseline: MetricsTrace | None = None) -> Report:
    """Headline numbers of one run; ``speedup`` is baseline time over this run's time.

    ``iterations`` counts decode-lane forwards; ``forwards`` adds the forwards
    of the separate prefill lane.
    """
    rows = trace.rows
    idle = trace.series("idle_slots") if rows else np.zeros(0)
    slot_iters = max(1, trace.slots * len(rows))
    backlog = np.array([r.waiting + r.prefilled + r.suspended > 0 for r in rows], dtype=bool)
    with_backlog = max(1, trace.slots * int(backlog.sum()))
    completed = trace.series("completed") if rows else np.zeros(0, int)
    steps = np.diff(np.concatenate([[0], completed]))
    plateau = longest = 0
    for s in steps:
        plateau = plateau + 1 if s == 0 else 0
        longest = max(longest, plateau)
    base = baseline if baseline is not None else trace
    this_time = trace.completion_time
    return Report(
        policy=trace.policy,
        slots=trace.slots,
        completion_time=this_time,
        iterations=len(rows),
        forwards=len(rows) + (rows[-1].prefill_forwards if rows else 0),
        wall_ns=int(trace.series("wall_ns").sum()) if rows else 0,
        speedup=base.completion_time / this_time if this_time else 1.0,
        idle_fraction=float(idle.sum()) / slot_iters,
        idle_fraction_with_backlog=float(idle[backlog].sum()) / with_backlog if rows else 0.0,
        bubble_columns=int(trace.series("bubbles").sum()) if rows else 0,
        output_tokens=rows[-1].output_tokens if rows else 0,
        mean_kv_bytes=float(trace.series("kv_bytes").mean()) if rows else 0.0,
        peak_kv_bytes=int(trace.series("kv_peak_bytes").max()) if rows else 0,
        completion_events=int((steps > 0).sum()),
        longest_plateau=longest,
    )


def comparison_table(reports: list[Report]) -> str:
    """Plain-text table, one row per report."""
    head = f"{'policy':<10} {'slots':>5} {'time':>10} {'iters':>7} {'speedup':>8} " \
           f"{'idle%':>6} {'bubbles':>9} {'meanKV':>12} {'peakKV':>12}"
    lines = [head]
    for r in reports:
        lines.append(f"{r.policy:<10} {r.slots:>5} {r.completion_time:>10.1f} {r.iterations:>7} "
                     f"{r.speedup:>8.3f} {100 * r.idle_fraction:>6.2f} {r.bubble_columns:>9} "
                     f"{r.mean_kv_bytes:>12.0f} {r.peak_kv_bytes:>12}")
    return "\n".join(lines)
