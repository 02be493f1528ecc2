"""Dense float64 tensor helpers, deterministic RNG streams, and the
finite-difference gradient oracle.

Tensors are plain C-contiguous float64 ndarrays of rank 1..4. Every public
operation validates that its result is finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    NonFiniteError,
    RankOutOfRangeError,
    ShapeMismatchError,
    ZeroVectorError,
)

MAX_RANK = 4
COSINE_FLOOR = 1e-12

_U64 = 0xFFFFFFFFFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def as_tensor(values, *, rank=None) -> np.ndarray:
    """Coerce to a contiguous float64 array and enforce the tensor invariants."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise RankOutOfRangeError(f"rank {arr.ndim} outside 1..{MAX_RANK}")
    if rank is not None and arr.ndim != rank:
        raise ShapeMismatchError(f"expected rank {rank}, got {arr.ndim}")
    if min(arr.shape) < 1:
        raise ShapeMismatchError(f"zero extent in shape {arr.shape}")
    check_finite(arr)
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    # fast path: a finite sum proves all elements finite; a non-finite sum
    # may be overflow of large finite values, so confirm elementwise
    with np.errstate(over="ignore"):
        quick = np.isfinite(np.sum(arr))
    if not quick and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return arr


def cosine(a, b) -> float:
    """Cosine similarity of two vectors with the denominator floored at 1e-12.

    Raises ZeroVectorError when both norms vanish; a single zero vector
    yields 0.0.
    """
    a = as_tensor(a, rank=1)
    b = as_tensor(b, rank=1)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cosine on lengths {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < COSINE_FLOOR and nb < COSINE_FLOOR:
        raise ZeroVectorError("both vectors are numerically zero")
    denom = max(na * nb, COSINE_FLOOR)
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))


def clamp_linf(t, eps: float) -> np.ndarray:
    """Clip every element into [-eps, +eps]."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return np.clip(as_tensor(t), -eps, eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Serves as the independent oracle for every analytic gradient in the
    package; never reuse analytic code paths inside `f` shortcuts.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    x = as_tensor(x)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f non-finite at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def fold64(*tags) -> int:
    """FNV-1a fold of ints/strings into a 64-bit stream id.

    Python's hash() is salted per process, so stream derivation uses this
    instead.
    """
    h = _FNV_OFFSET
    for tag in tags:
        if isinstance(tag, str):
            data = tag.encode("utf-8")
        else:
            data = (int(tag) & _U64).to_bytes(8, "little")
        for byte in data:
            h ^= byte
            h = (h * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream keyed by (seed, stream_id).

    Streams with distinct ids are independent: draws on one never disturb
    another, so parallel schedules cannot perturb determinism. Backed by
    numpy's Philox counter generator.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _U64, self.stream_id & _U64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, *tags) -> "SeededRng":
        """Child stream whose id folds this stream's id with the tags."""
        return SeededRng(self.seed, fold64(self.stream_id, *tags))
