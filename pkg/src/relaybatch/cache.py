"""Per-layer key/value storage with one shared, dynamic sequence axis."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import DTYPE, DimensionError

FILL = DTYPE(0.0)


@dataclass
class KvCache:
    """Keys and values for every layer, each shaped ``[slots, heads, length, head_dim]``.

    Placeholder columns hold :data:`FILL` and are hidden by the attention mask;
    their content never reaches an output.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    length: int = field(init=False)

    def __post_init__(self):
        shapes = {a.shape for a in self.keys} | {a.shape for a in self.values}
        if len(shapes) > 1:
            raise DimensionError(f"layers disagree on kv shape: {sorted(shapes)}")
        self.length = self.keys[0].shape[2] if self.keys else 0

    @classmethod
    def empty(cls, layers: int, slots: int, heads: int, head_dim: int) -> "KvCache":
        z = lambda: np.zeros((slots, heads, 0, head_dim), dtype=DTYPE)  # noqa: E731
        return cls([z() for _ in range(layers)], [z() for _ in range(layers)])

    @property
    def layers(self) -> int:
        return len(self.keys)

    @property
    def slots(self) -> int:
        return self.keys[0].shape[0]

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys) + sum(a.nbytes for a in self.values)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Extend one layer along the sequence axis; returns the full K and V."""
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=2)
        if layer == self.layers - 1:
            self.length = self.keys[layer].shape[2]
        return self.keys[layer], self.values[layer]

    def drop_prefix(self, n: int) -> None:
        if n:
            self.keys = [a[:, :, n:] for a in self.keys]
            self.values = [a[:, :, n:] for a in self.values]
            self.length -= n

    def pad_left(self, n: int) -> None:
        """Prepend ``n`` placeholder columns to every slot."""
        if n:
            def grow(a):
                pad = np.full(a.shape[:2] + (n,) + a.shape[3:], FILL, dtype=DTYPE)
                return np.concatenate([pad, a], axis=2)

            self.keys = [grow(a) for a in self.keys]
            self.values = [grow(a) for a in self.values]
            self.length += n

    def slot_columns(self, slot: int, columns) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Copies of one slot's K/V restricted to ``columns``, shaped ``[heads, n, head_dim]``."""
        return ([a[slot][:, columns].copy() for a in self.keys],
                [a[slot][:, columns].copy() for a in self.values])

    def write_slot(self, slot: int, start: int, keys: list[np.ndarray], values: list[np.ndarray]) -> None:
        """Overwrite ``slot`` from column ``start`` to the end; earlier columns become fill."""
        for layer in range(self.layers):
            for store, src in ((self.keys, keys[layer]), (self.values, values[layer])):
                store[layer][slot] = FILL
                store[layer][slot, :, start:] = src

    def fill_columns(self, slot: int, columns, value=FILL) -> None:
        for store in (self.keys, self.values):
            for layer in range(self.layers):
                store[layer][slot][:, columns] = value
