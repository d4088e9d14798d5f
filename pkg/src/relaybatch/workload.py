"""Synthetic query workloads and their line-per-query file format.

Two presets (words map 1:1 to tokens):

* ``D1``: 120 queries in three classes, long-in/short-out, short-in/long-out
  and short-in/short-out, mixed 1:1:2.  "Long" is drawn within 10% of 4000,
  "short" between 30 and 400.
* ``D2``: 30 short-in/short-out queries with prompts and answers in [30, 200].

Short lengths are log-uniform so that most queries sit near a few dozen
tokens with a tail up to the bound.  All lengths are multiplied by ``scale``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .scheduler import Query

LONG = ("uniform", 3600, 4400)
SHORT_D1 = ("loguniform", 30, 400)
SHORT_D2 = ("loguniform", 30, 200)


@dataclass(frozen=True)
class QueryClass:
    name: str
    weight: int
    prompt: tuple
    answer: tuple


@dataclass
class WorkloadSpec:
    kind: str = "D2"
    count: int | None = None
    classes: list[QueryClass] = field(default_factory=list)
    seed: int = 0
    scale: float = 1.0
    vocab_size: int = 101
    reserved_tokens: int = 2

    def __post_init__(self):
        self.kind = self.kind.upper() if self.kind.lower() in ("d1", "d2") else self.kind
        if self.kind == "D1":
            self.classes = self.classes or [
                QueryClass("long_in_short_out", 1, LONG, SHORT_D1),
                QueryClass("short_in_long_out", 1, SHORT_D1, LONG),
                QueryClass("short_in_short_out", 2, SHORT_D1, SHORT_D1),
            ]
            self.count = 120 if self.count is None else self.count
        elif self.kind == "D2":
            self.classes = self.classes or [QueryClass("short_in_short_out", 1, SHORT_D2, SHORT_D2)]
            self.count = 30 if self.count is None else self.count
        elif not self.classes:
            raise ValueError("a custom workload needs explicit classes")
        if self.count is None or self.count < 1:
            raise ValueError("count must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        for c in self.classes:
            for dist in (c.prompt, c.answer):
                if round(dist[1] * self.scale) < 1:
                    raise ValueError(f"class {c.name}: scale {self.scale} rounds lengths to 0")

    def class_counts(self) -> list[int]:
        """Split ``count`` by class weight; remainders go to the earliest classes."""
        weights = np.array([c.weight for c in self.classes], dtype=float)
        exact = self.count * weights / weights.sum()
        counts = np.floor(exact).astype(int)
        for i in np.argsort(-(exact - counts), kind="stable")[: self.count - counts.sum()]:
            counts[i] += 1
        return counts.tolist()


def _draw(rng: np.random.Generator, dist, scale: float) -> int:
    kind, lo, hi = dist
    if kind == "uniform":
        x = rng.uniform(lo, hi)
    elif kind == "loguniform":
        x = np.exp(rng.uniform(np.log(lo), np.log(hi)))
    elif kind == "fixed":
        x = lo
    else:
        raise ValueError(f"unknown length distribution {kind!r}")
    return max(1, int(round(x * scale)))


def gen_workload(spec: WorkloadSpec) -> list[Query]:
    """Deterministic queries for ``spec``; class order is shuffled under the same seed."""
    rng = np.random.default_rng(spec.seed)
    labels = [i for i, n in enumerate(spec.class_counts()) for _ in range(n)]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    queries = []
    for qid, label in enumerate(labels):
        cls = spec.classes[label]
        plen = _draw(rng, cls.prompt, spec.scale)
        alen = _draw(rng, cls.answer, spec.scale)
        prompt = rng.integers(spec.reserved_tokens, spec.vocab_size, size=plen)
        queries.append(Query(qid, tuple(prompt.tolist()), max_new_tokens=alen + 1, answer_len=alen))
    return queries


def query_class(spec: WorkloadSpec, workload) -> dict[int, str]:
    """Class name per query id, re-deriving the shuffled label order."""
    rng = np.random.default_rng(spec.seed)
    labels = [i for i, n in enumerate(spec.class_counts()) for _ in range(n)]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    return {q.id: spec.classes[labels[i]].name for i, q in enumerate(workload)}


FIELDS = ("id", "prompt_len", "tokens", "answer_len", "priority", "arrival")


def dump_workload(queries, path, explicit_tokens: bool = False) -> None:
    """One JSON object per line, fields always in :data:`FIELDS` order."""
    with open(path, "w") as fh:
        for q in queries:
            rec = {"id": q.id}
            if explicit_tokens:
                rec["tokens"] = list(q.prompt)
            else:
                rec["prompt_len"] = len(q.prompt)
            rec["answer_len"] = q.answer_len
            rec["priority"] = q.priority
            rec["arrival"] = q.arrival
            fh.write(json.dumps(rec) + "\n")


def load_workload(path, vocab_size: int = 101, reserved_tokens: int = 2, seed: int = 0) -> list[Query]:
    """Read a workload file; ``prompt_len`` records get seeded random prompt tokens."""
    rng = np.random.default_rng(seed)
    queries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "tokens" in rec:
                prompt = tuple(rec["tokens"])
            elif "prompt_len" in rec:
                prompt = tuple(rng.integers(reserved_tokens, vocab_size, size=int(rec["prompt_len"])).tolist())
            else:
                raise ValueError(f"{path}:{lineno}: needs prompt_len or tokens")
            alen = rec.get("answer_len")
            queries.append(Query(
                id=int(rec["id"]), prompt=prompt, priority=int(rec.get("priority", 0)),
                arrival=float(rec.get("arrival", 0)),
                max_new_tokens=int(rec.get("max_new_tokens", (alen or 63) + 1)),
                answer_len=None if alen is None else int(alen),
            ))
    return queries
