"""Deterministic dense kernels.

Every reduction in this module runs over its axis in ascending index order
(``np.cumsum`` is a strict left-to-right recurrence), never through BLAS or
numpy's pairwise summation.  The value of an output row therefore depends only
on the values of the matching input row, in order, and not on how many other
rows are in the batch or on trailing masked-out columns.  This is what lets a
query produce bit-identical results alone or inside any batch.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float32
NEG_INF = np.float32(-np.inf)


class DimensionError(ValueError):
    """Operand extents do not line up."""


class ContractViolation(RuntimeError):
    """A caller broke a documented precondition."""


def as_array(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def ordered_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` accumulating strictly from index 0 upward."""
    x = np.asarray(x)
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis), dtype=x.dtype)
    return np.take(np.cumsum(x, axis=axis, dtype=x.dtype), -1, axis=axis)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` over the last two axes, each cell accumulated in ascending k.

    Leading axes of ``a`` are treated as batch axes; ``b`` is a single 2-D
    weight matrix or broadcasts against ``a``'s batch axes.
    """
    a = as_array(a)
    b = as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    # products[..., m, k, n], reduced over k in order
    products = a[..., :, :, None] * b[..., None, :, :]
    return ordered_sum(products, axis=-2)


def masked_softmax(logits: np.ndarray, additive_mask: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis with an additive 0 / -inf mask.

    Masked cells come out as exactly 0.0.  A row with every cell masked has no
    defined distribution and raises :class:`ContractViolation`.
    """
    logits = as_array(logits)
    additive_mask = as_array(additive_mask)
    if logits.shape != np.broadcast_shapes(logits.shape, additive_mask.shape):
        raise DimensionError(f"mask {additive_mask.shape} does not fit logits {logits.shape}")
    z = logits + additive_mask
    peak = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise ContractViolation("softmax row with every position masked")
    e = np.exp(np.ascontiguousarray(z - peak))
    return e / ordered_sum(e, axis=-1)[..., None]


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = as_array(x)
    n = DTYPE(x.shape[-1])
    mean = ordered_sum(x, axis=-1)[..., None] / n
    centered = x - mean
    var = ordered_sum(centered * centered, axis=-1)[..., None] / n
    return centered / np.sqrt(var + DTYPE(eps)) * gain + bias


def gather_rows(table: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Row lookup ``table[index]``; index must be in range."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    return table[index]


def concat(parts, axis: int) -> np.ndarray:
    return np.concatenate([as_array(p) for p in parts], axis=axis)
