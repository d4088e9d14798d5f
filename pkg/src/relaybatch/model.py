"""Next-token generators: a tiny cached transformer and a scripted stand-in.

Both expose ``decode(tokens, mask, positions, kv, progress)``, which runs one
batched forward over the staged input columns, grows ``kv`` by the input width
and returns one token per slot.  The batch engine only talks to that method.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .cache import KvCache
from .tensor_core import DTYPE, NEG_INF, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    vocab_size: int = 101
    max_positions: int = 512
    eos_token: int = 1
    pad_token: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.eos_token == self.pad_token:
            raise ValueError("eos_token and pad_token must differ")
        if not (0 <= self.eos_token < self.vocab_size and 0 <= self.pad_token < self.vocab_size):
            raise ValueError("eos_token and pad_token must be inside the vocabulary")
        if min(self.layers, self.heads, self.head_dim, self.max_positions) < 1:
            raise ValueError("model extents must be positive")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must leave room for ordinary tokens")

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def kv_column_bytes(self) -> int:
        """Bytes one sequence column of one slot occupies across all layers, K and V."""
        return self.layers * 2 * self.heads * self.head_dim * np.dtype(DTYPE).itemsize


def greedy_next(logits) -> int:
    """Argmax token; ``np.argmax`` already breaks ties toward the lowest id."""
    return int(np.argmax(logits))


@dataclass(frozen=True)
class ScriptedQueryPlan:
    query_id: int
    answer_length: int
    seed: int = 0


def _hash_token(seed: int, query_id: int, step: int, choices: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{query_id}:{step}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % choices


def scripted_next(plan: ScriptedQueryPlan, step: int, config: ModelConfig) -> int:
    """Token number ``step`` (0-based) of a scripted answer: ordinary tokens, then EOS."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= plan.answer_length:
        return config.eos_token
    reserved = sorted({config.eos_token, config.pad_token})
    token = _hash_token(plan.seed, plan.query_id, step, config.vocab_size - len(reserved))
    for r in reserved:
        if token >= r:
            token += 1
    return token


def position_ids(kv_mask: np.ndarray, input_mask: np.ndarray) -> np.ndarray:
    """Position of every input column: the count of mask ones strictly before it.

    ``kv_mask`` is ``[slots, kv_len]`` and ``input_mask`` ``[slots, width]``.
    Padding columns get the position of the next real column; they are hidden
    anyway.
    """
    before = kv_mask.sum(axis=1, dtype=np.int64)[:, None]
    within = np.cumsum(input_mask, axis=1, dtype=np.int64) - input_mask
    return before + within


def attention_bias(mask: np.ndarray, width: int) -> np.ndarray:
    """Additive ``[slots, 1, width, kv_len + width]`` mask for the staged columns.

    Input column ``j`` sees key ``t`` when ``t`` is at or before it and the
    mask marks ``t`` real.  Every column also sees itself, so padding columns
    keep a defined softmax without touching any real column's output.
    """
    total = mask.shape[1]
    key = np.arange(total)
    query = total - width + np.arange(width)
    visible = (mask[:, None, :] == 1) & (key[None, None, :] <= query[None, :, None])
    visible |= key[None, None, :] == query[None, :, None]
    return np.where(visible, DTYPE(0.0), NEG_INF).astype(DTYPE)[:, None]


class TinyTransformer:
    """Pre-norm GPT-style decoder with learned absolute positions and a KV cache."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        e, v = config.embed_dim, config.vocab_size
        hidden = 4 * e

        def w(*shape, std):
            return rng.normal(0.0, std, size=shape).astype(DTYPE)

        self.token_embedding = w(v, e, std=1.0)
        self.position_embedding = w(config.max_positions, e, std=0.5)
        self.blocks = []
        for _ in range(config.layers):
            self.blocks.append(dict(
                ln1_g=np.ones(e, DTYPE), ln1_b=np.zeros(e, DTYPE),
                wq=w(e, e, std=e ** -0.5), wk=w(e, e, std=e ** -0.5),
                wv=w(e, e, std=e ** -0.5), wo=w(e, e, std=e ** -0.5),
                ln2_g=np.ones(e, DTYPE), ln2_b=np.zeros(e, DTYPE),
                w1=w(e, hidden, std=e ** -0.5), b1=w(hidden, std=0.02),
                w2=w(hidden, e, std=hidden ** -0.5), b2=w(e, std=0.02),
            ))
        self.lnf_g = np.ones(e, DTYPE)
        self.lnf_b = np.zeros(e, DTYPE)
        # small head keeps logits O(0.1) so float32 rounding stays far below 1e-6
        self.head = w(e, v, std=0.1 * e ** -0.5)
        for block in self.blocks:
            for a in block.values():
                a.setflags(write=False)

    def empty_cache(self, slots: int) -> KvCache:
        c = self.config
        return KvCache.empty(c.layers, slots, c.heads, c.head_dim)

    def _split(self, x, slots, width):
        c = self.config
        return x.reshape(slots, width, c.heads, c.head_dim).transpose(0, 2, 1, 3)

    def forward(self, tokens, mask, positions, kv: KvCache):
        """Logits of the last input column per slot; ``kv`` grows by the input width."""
        c = self.config
        tokens = np.asarray(tokens)
        mask = np.asarray(mask)
        slots, width = tokens.shape
        if mask.shape != (slots, kv.length + width):
            raise DimensionError(
                f"mask {mask.shape} must be (slots, kv_len + width) = ({slots}, {kv.length + width})")
        if kv.slots != slots:
            raise DimensionError(f"kv holds {kv.slots} slots, input has {slots}")
        positions = np.asarray(positions)
        if positions.size and positions.max() >= c.max_positions:
            raise IndexError("position beyond max_positions")
        bias = attention_bias(mask, width)
        scale = DTYPE(1.0 / np.sqrt(c.head_dim))

        x = tc.gather_rows(self.token_embedding, tokens) + tc.gather_rows(self.position_embedding, positions)
        for layer, p in enumerate(self.blocks):
            h = tc.layer_norm(x, p["ln1_g"], p["ln1_b"])
            q = self._split(tc.matmul(h, p["wq"]), slots, width)
            k = self._split(tc.matmul(h, p["wk"]), slots, width)
            v = self._split(tc.matmul(h, p["wv"]), slots, width)
            keys, values = kv.append(layer, k, v)
            scores = tc.matmul(q, keys.transpose(0, 1, 3, 2)) * scale
            weights = tc.masked_softmax(scores, bias)
            att = tc.matmul(weights, values).transpose(0, 2, 1, 3).reshape(slots, width, c.embed_dim)
            x = x + tc.matmul(att, p["wo"])
            h = tc.layer_norm(x, p["ln2_g"], p["ln2_b"])
            x = x + (tc.matmul(np.maximum(tc.matmul(h, p["w1"]) + p["b1"], DTYPE(0.0)), p["w2"]) + p["b2"])
        last = tc.layer_norm(x[:, -1], self.lnf_g, self.lnf_b)
        return tc.matmul(last, self.head), kv

    def decode(self, tokens, mask, positions, kv, progress=None):
        logits, kv = self.forward(tokens, mask, positions, kv)
        return np.array([greedy_next(row) for row in logits]), logits, kv

    def reference_logits(self, sequence) -> np.ndarray:
        """No-cache float64 forward over one unpadded sequence; logits of every position.

        Shares only the weights with :meth:`forward`: plain ``np.matmul`` and a
        textbook causal softmax, used as an independent oracle.
        """
        c = self.config
        seq = np.asarray(sequence)
        n = len(seq)
        f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731

        def ln(x, g, b):
            mu = x.mean(-1, keepdims=True)
            var = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(var + 1e-5) * f(g) + f(b)

        x = f(self.token_embedding)[seq] + f(self.position_embedding)[np.arange(n)]
        causal = np.triu(np.full((n, n), -np.inf), k=1)
        for p in self.blocks:
            h = ln(x, p["ln1_g"], p["ln1_b"])
            split = lambda t: t.reshape(n, c.heads, c.head_dim).transpose(1, 0, 2)  # noqa: E731
            q, k, v = (split(h @ f(p[name])) for name in ("wq", "wk", "wv"))
            s = q @ k.transpose(0, 2, 1) / np.sqrt(c.head_dim) + causal
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            att = (s @ v).transpose(1, 0, 2).reshape(n, c.embed_dim)
            x = x + att @ f(p["wo"])
            h = ln(x, p["ln2_g"], p["ln2_b"])
            x = x + np.maximum(h @ f(p["w1"]) + f(p["b1"]), 0.0) @ f(p["w2"]) + f(p["b2"])
        return ln(x, self.lnf_g, self.lnf_b) @ f(self.head)


class ScriptedModel:
    """Emits each query's scripted answer; K/V are zero-filled one-float columns.

    Cheap enough for thousands of iterations, while every shaping, embedding and
    release still runs on real arrays.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig(layers=1, heads=1, head_dim=1, vocab_size=32000,
                                            max_positions=1 << 30, seed=seed)
        self.seed = seed

    def empty_cache(self, slots: int) -> KvCache:
        c = self.config
        return KvCache.empty(c.layers, slots, c.heads, c.head_dim)

    def plan(self, query) -> ScriptedQueryPlan:
        if query.answer_len is None:
            raise ValueError(f"query {query.id} has no scripted answer length")
        return ScriptedQueryPlan(query.id, query.answer_len, self.seed)

    def decode(self, tokens, mask, positions, kv, progress=None):
        c = self.config
        slots, width = np.shape(tokens)
        if np.shape(mask) != (slots, kv.length + width):
            raise DimensionError("mask width must equal kv_len + input width")
        zeros = np.zeros((slots, c.heads, width, c.head_dim), dtype=DTYPE)
        for layer in range(c.layers):
            kv.append(layer, zeros, zeros)
        out = np.full(slots, c.eos_token)
        for slot, entry in enumerate(progress or ()):
            if entry is not None:
                query, step = entry
                out[slot] = scripted_next(self.plan(query), step, c)
        return out, None, kv
