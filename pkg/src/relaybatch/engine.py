"""Live batch maintenance: stepping, insertion, prefix release, slot extraction.

A :class:`BatchState` owns a fixed number of physical slots sharing one KV
cache whose sequence axis is aligned across slots.  Queries leave the batch
when they finish and new ones are spliced in without restarting it, either

* raw, by :func:`shape_insert`: the new prompt rides along in the next forward
  and every other slot is padded up to the prompt width, or
* prefilled, by :func:`embed_insert`: keys and values computed elsewhere are
  copied into the cache end-aligned, so the next forward stays one column wide.

Correctness rests on the attention mask plus mask-derived position ids: every
column a slot does not own is hidden, so placeholder contents never matter.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .cache import FILL, KvCache
from .tensor_core import ContractViolation, DimensionError

SKIP_MASK_ZEROING = "skip_mask_zeroing"


class SlotStatus(enum.Enum):
    DECODING = "decoding"
    DRAINED = "drained"


@dataclass
class SlotInfo:
    occupant: object | None = None
    pad_start: int = 0
    generated: list[int] = field(default_factory=list)
    status: SlotStatus = SlotStatus.DRAINED
    inserted_seq: int = -1
    raw_pending: bool = False


@dataclass
class PrefilledQuery:
    """A query whose prompt (and possibly some answer) already lives in detached K/V.

    ``keys[layer]`` and ``values[layer]`` are ``[heads, length, head_dim]``.
    ``generated`` holds every token emitted so far; the last one has not been
    fed back yet and is the next decode input.
    """

    query: object
    keys: list[np.ndarray]
    values: list[np.ndarray]
    generated: list[int]

    def __post_init__(self):
        lengths = {a.shape[1] for a in self.keys} | {a.shape[1] for a in self.values}
        if len(lengths) != 1 or lengths == {0}:
            raise DimensionError(f"prefilled K/V must share one positive length, got {lengths}")

    @property
    def id(self):
        return self.query.id

    @property
    def priority(self) -> int:
        return self.query.priority

    @property
    def length(self) -> int:
        return self.keys[0].shape[1]

    @property
    def next_token(self) -> int:
        return self.generated[-1]


def is_finished(query, generated: list[int], eos_token: int) -> bool:
    return bool(generated) and (generated[-1] == eos_token or len(generated) >= query.max_new_tokens)


class BatchState:
    """Input staging, committed attention mask, KV cache and per-slot bookkeeping.

    ``mask`` covers exactly the cached columns (``kv.length``).  The columns of
    the next forward are staged per slot in ``staged``; :attr:`input_tokens`,
    :attr:`attention_mask` and :attr:`position_ids` materialise them, so
    ``attention_mask`` always has ``kv_len + input_width`` columns.
    """

    def __init__(self, model, slots: int, faults=frozenset()):
        if slots < 1:
            raise ValueError("a batch needs at least one slot")
        self.model = model
        self.config = model.config
        self.kv: KvCache = model.empty_cache(slots)
        self.mask = np.zeros((slots, 0), dtype=np.int8)
        self.slots = [SlotInfo() for _ in range(slots)]
        self.staged: list[list[int]] = [[self.config.eos_token] for _ in range(slots)]
        self.faults = frozenset(faults)
        self.last_logits: np.ndarray | None = None
        self.last_finished: list[tuple[int, object, list[int]]] = []
        self.forwards = 0
        self.bubble_columns = 0
        self.last_bubbles = 0
        self.idle_slots = 0
        self.last_idle = 0
        self._seq = itertools.count()

    # -- shape --------------------------------------------------------------
    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def kv_len(self) -> int:
        return self.kv.length

    @property
    def input_width(self) -> int:
        return max(len(s) for s in self.staged)

    @property
    def kv_bytes(self) -> int:
        return self.num_slots * self.kv_len * self.config.kv_column_bytes

    def _input_mask(self) -> np.ndarray:
        w = self.input_width
        m = np.zeros((self.num_slots, w), dtype=np.int8)
        for i, cols in enumerate(self.staged):
            m[i, w - len(cols):] = 1
        return m

    @property
    def input_tokens(self) -> np.ndarray:
        w = self.input_width
        t = np.full((self.num_slots, w), self.config.pad_token, dtype=np.int64)
        for i, cols in enumerate(self.staged):
            t[i, w - len(cols):] = cols
        return t

    @property
    def attention_mask(self) -> np.ndarray:
        return np.concatenate([self.mask, self._input_mask()], axis=1)

    @property
    def position_ids(self) -> np.ndarray:
        from .model import position_ids
        return position_ids(self.mask, self._input_mask())

    def occupied(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s.status is SlotStatus.DECODING]

    def drained(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s.status is SlotStatus.DRAINED]

    def live_length(self, slot: int) -> int:
        s = self.slots[slot]
        if s.status is not SlotStatus.DECODING or s.raw_pending:
            return 0
        return self.kv_len - s.pad_start

    def check_invariants(self) -> None:
        if self.mask.shape != (self.num_slots, self.kv_len):
            raise AssertionError(f"mask {self.mask.shape} vs kv_len {self.kv_len}")
        for layer in range(self.kv.layers):
            for a in (self.kv.keys[layer], self.kv.values[layer]):
                if a.shape[2] != self.kv_len:
                    raise AssertionError("layers disagree on kv_len")
        for i, s in enumerate(self.slots):
            if s.status is SlotStatus.DECODING and not s.raw_pending:
                if not 0 <= s.pad_start <= self.kv_len:
                    raise AssertionError(f"slot {i} pad_start {s.pad_start} outside kv")
                if self.mask[i, :s.pad_start].any():
                    raise AssertionError(f"slot {i} has visible columns before pad_start")

    def _claim(self, slot: int, occupant, generated: list[int], staged: list[int], raw: bool) -> None:
        s = self.slots[slot]
        if s.status is not SlotStatus.DRAINED:
            raise ContractViolation(f"slot {slot} is not drained")
        s.occupant = occupant
        s.generated = list(generated)
        s.status = SlotStatus.DECODING
        s.inserted_seq = next(self._seq)
        s.raw_pending = raw
        self.staged[slot] = list(staged)


def empty_batch(model, slots: int, faults=frozenset()) -> BatchState:
    return BatchState(model, slots, faults)


def new_batch(queries, model, slots: int | None = None, faults=frozenset()) -> BatchState:
    """Left-pad the prompts into one batch and run the prefill forward.

    ``slots`` defaults to ``len(queries)``; extra slots start drained.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("new_batch needs at least one query")
    batch = BatchState(model, slots or len(queries), faults)
    if len(queries) > batch.num_slots:
        raise ValueError("more queries than slots")
    for i, q in enumerate(queries):
        shape_insert(batch, i, q)
    step(batch)
    return batch


def step(batch: BatchState) -> np.ndarray:
    """Run one forward over the staged columns and return each slot's emitted token.

    Drained slots still occupy a row and always emit EOS.  A slot whose token
    is EOS, or which reaches its query's ``max_new_tokens``, becomes drained
    and is reported in ``batch.last_finished``.
    """
    cfg = batch.config
    width = batch.input_width
    old_len = batch.kv_len
    input_mask = batch._input_mask()
    tokens = batch.input_tokens
    positions = batch.position_ids
    full_mask = np.concatenate([batch.mask, input_mask], axis=1)
    progress = [(s.occupant, len(s.generated)) if s.status is SlotStatus.DECODING else None
                for s in batch.slots]

    out, logits, _ = batch.model.decode(tokens, full_mask, positions, batch.kv, progress)
    if batch.kv_len != old_len + width:
        raise DimensionError("model did not grow kv by the input width")

    batch.mask = full_mask
    batch.last_logits = logits
    batch.forwards += 1
    batch.last_bubbles = sum(width - len(cols) for cols in batch.staged)
    batch.bubble_columns += batch.last_bubbles
    batch.last_finished = []
    emitted = np.full(batch.num_slots, cfg.eos_token, dtype=np.int64)
    idle = 0
    for i, s in enumerate(batch.slots):
        if s.status is SlotStatus.DRAINED:
            idle += 1
            batch.staged[i] = [cfg.eos_token]
            continue
        if s.raw_pending:
            s.pad_start = old_len + width - len(batch.staged[i])
            s.raw_pending = False
        token = int(out[i])
        emitted[i] = token
        s.generated.append(token)
        if is_finished(s.occupant, s.generated, cfg.eos_token):
            batch.last_finished.append((i, s.occupant, s.generated))
            s.occupant, s.generated, s.status = None, [], SlotStatus.DRAINED
            batch.staged[i] = [cfg.eos_token]
        else:
            batch.staged[i] = [token]
    batch.last_idle = idle
    batch.idle_slots += idle
    return emitted


def shape_insert(batch: BatchState, slot: int, query) -> None:
    """Stage a raw prompt into a drained slot for the next forward.

    The slot's old mask is zeroed and its cached columns become placeholders;
    the prompt is appended as fresh columns, starting at position 0.  Other
    slots are padded to the prompt width when the forward runs.
    """
    prompt = list(query.prompt)
    if not prompt:
        raise ValueError(f"query {query.id} has an empty prompt")
    batch._claim(slot, query, [], prompt, raw=True)
    if SKIP_MASK_ZEROING not in batch.faults:
        batch.mask[slot] = 0
    batch.kv.fill_columns(slot, slice(None))
    batch.slots[slot].pad_start = batch.kv_len


def embed_insert(batch: BatchState, slot: int, prefilled: PrefilledQuery) -> None:
    """Copy prefilled K/V into a drained slot, end-aligned with the cache.

    When the prefilled length exceeds the cache, the cache first grows on the
    left with hidden placeholder columns for every slot.
    """
    if batch.slots[slot].status is not SlotStatus.DRAINED:
        raise ContractViolation(f"slot {slot} is not drained")
    lq = prefilled.length
    grow = lq - batch.kv_len
    if grow > 0:
        batch.kv.pad_left(grow)
        batch.mask = np.concatenate([np.zeros((batch.num_slots, grow), np.int8), batch.mask], axis=1)
        for s in batch.slots:
            if s.status is SlotStatus.DECODING and not s.raw_pending:
                s.pad_start += grow
    start = batch.kv_len - lq
    batch._claim(slot, prefilled.query, prefilled.generated, [prefilled.next_token], raw=False)
    batch.kv.write_slot(slot, start, prefilled.keys, prefilled.values)
    batch.mask[slot] = 0
    batch.mask[slot, start:] = 1
    batch.slots[slot].pad_start = start


def release_prefix(batch: BatchState) -> int:
    """Drop the leading columns that are placeholders for every live slot.

    Drained slots hold nothing worth keeping and do not pin the prefix; a slot
    with a staged raw prompt owns no cached column yet.
    """
    starts = [s.pad_start for s in batch.slots if s.status is SlotStatus.DECODING and not s.raw_pending]
    p = min(starts, default=batch.kv_len)
    if p <= 0:
        return 0
    batch.kv.drop_prefix(p)
    batch.mask = batch.mask[:, p:]
    for s in batch.slots:
        s.pad_start = max(0, s.pad_start - p)
    return p


def extract_slot(batch: BatchState, slot: int) -> PrefilledQuery:
    """Detach a live slot's visible K/V and drain the slot.

    Only mask-one columns are kept, so shaping bubbles inside the live region
    do not travel with the query.
    """
    s = batch.slots[slot]
    if s.status is not SlotStatus.DECODING:
        raise ContractViolation(f"slot {slot} has no occupant")
    if s.raw_pending:
        raise ContractViolation(f"slot {slot} holds a prompt that has not been prefilled")
    columns = s.pad_start + np.flatnonzero(batch.mask[slot, s.pad_start:])
    keys, values = batch.kv.slot_columns(slot, columns)
    pq = PrefilledQuery(s.occupant, keys, values, list(s.generated))
    s.occupant, s.generated, s.status = None, [], SlotStatus.DRAINED
    batch.staged[slot] = [batch.config.eos_token]
    return pq


def prefill_group(queries, model) -> list[PrefilledQuery]:
    """One padded prefill forward for a group, detached into per-query K/V."""
    queries = list(queries)
    batch = new_batch(queries, model)
    done = {slot: gen for slot, _, gen in batch.last_finished}
    out = []
    for i, q in enumerate(queries):
        if i in done:
            out.append(_finished_prefill(batch, i, q, done[i]))
        else:
            out.append(extract_slot(batch, i))
    return out


def _finished_prefill(batch: BatchState, slot: int, query, generated) -> PrefilledQuery:
    # the query ended on its first token; keep its K/V anyway for inspection
    columns = np.flatnonzero(batch.mask[slot])
    keys, values = batch.kv.slot_columns(slot, columns)
    return PrefilledQuery(query, keys, values, list(generated))


def prefill_query(query, model) -> PrefilledQuery:
    return prefill_group([query], model)[0]


def run_solo(query, model) -> list[int]:
    """Generate a query alone in a one-slot batch; the reference stream."""
    batch = new_batch([query], model)
    while batch.slots[0].status is SlotStatus.DECODING:
        step(batch)
    return list(batch.last_finished[0][2])


def fill_placeholders(batch: BatchState, rng: np.random.Generator, scale: float = 10.0) -> int:
    """Overwrite every mask-zero cached K/V cell with random finite values.

    Returns the number of columns touched.  Used to demonstrate that hidden
    cells have no influence.
    """
    touched = 0
    for slot in range(batch.num_slots):
        cols = np.flatnonzero(batch.mask[slot] == 0)
        if cols.size == 0:
            continue
        touched += cols.size
        for store in (batch.kv.keys, batch.kv.values):
            for layer in range(batch.kv.layers):
                view = store[layer][slot]
                view[:, cols] = rng.uniform(-scale, scale, size=view[:, cols].shape)
    return touched


__all__ = [
    "BatchState", "FILL", "PrefilledQuery", "SlotInfo", "SlotStatus", "SKIP_MASK_ZEROING",
    "embed_insert", "empty_batch", "extract_slot", "fill_placeholders", "is_finished", "new_batch",
    "prefill_group", "prefill_query", "release_prefix", "run_solo", "shape_insert", "step",
]
