"""Deterministic dense kernels.

A ``Tensor`` is a 2-D ``float64`` numpy array.  Matrix products accumulate
strictly left to right over the inner dimension so results are reproducible
bit for bit and agree exactly with a naive triple loop.
"""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray


def tensor(data, cols: int | None = None) -> Tensor:
    """Build a 2-D float64 tensor from nested sequences or a flat buffer."""
    arr = np.array(data, dtype=np.float64)
    if cols is not None:
        if arr.ndim != 1 or arr.size % cols:
            raise ShapeError(f"cannot view {arr.size} values as rows of {cols}")
        arr = arr.reshape(-1, cols)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got {arr.ndim} dimensions")
    return arr


def _accumulate(prod: np.ndarray, axis: int) -> np.ndarray:
    # ufunc.accumulate is strictly sequential, unlike sum() which is pairwise
    if prod.shape[axis] == 0:
        shape = list(prod.shape)
        del shape[axis]
        return np.zeros(shape)
    acc = np.add.accumulate(prod, axis=axis)
    index = [slice(None)] * acc.ndim
    index[axis] = -1
    return acc[tuple(index)]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _accumulate(a[:, :, None] * b[None, :, :], axis=1)


def bmatmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``matmul`` over leading dimensions, same accumulation order."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _accumulate(a[..., :, :, None] * b[..., None, :, :], axis=-2)


def row_sums(x: np.ndarray) -> np.ndarray:
    return _accumulate(x, axis=-1)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Entries equal to ``-inf`` receive zero mass.
    """
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / row_sums(e)[..., None]


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(row_sums(np.exp(shifted)))[..., None]


def log_sum_exp(x: Iterable[float]) -> float:
    vals = [float(v) for v in x]
    if not vals:
        raise ValueError("log_sum_exp of an empty sequence")
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(v - m) for v in vals))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    d = x.shape[-1]
    mean = row_sums(x)[..., None] / d
    centered = x - mean
    var = row_sums(centered * centered)[..., None] / d
    return centered / np.sqrt(var + eps) * gain + bias


def checksum(arrays: Iterable[np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()
