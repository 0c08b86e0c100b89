"""Dense 2-D float64 linear algebra and seeded, splittable random streams.

All weights and activations in this package are plain numpy float64 arrays
(row-major). The helpers here add the shape/validity checking the rest of
the code relies on; operations return new arrays and never mutate inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError

_MASK64 = (1 << 64) - 1


def tensor2(data) -> np.ndarray:
    """Coerce to a 2-D float64 array, validating rank and finiteness."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("tensor contains non-finite entries")
    return a


def _check2d(a: np.ndarray, name: str = "input") -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check2d(a, "a")
    _check2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    _check2d(a)
    if a.size == 0:
        raise ShapeError(f"softmax_rows on empty array of shape {a.shape}")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def slice_cols(a: np.ndarray, k: int) -> np.ndarray:
    _check2d(a)
    if not 1 <= k <= a.shape[1]:
        raise ShapeError(f"column count {k} out of range [1, {a.shape[1]}]")
    return a[:, :k].copy()


def slice_rows(a: np.ndarray, k: int) -> np.ndarray:
    _check2d(a)
    if not 1 <= k <= a.shape[0]:
        raise ShapeError(f"row count {k} out of range [1, {a.shape[0]}]")
    return a[:k, :].copy()


def check_permutation(p, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.intp)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ValidationError(f"not a permutation of [0, {n}): {p.tolist()}")
    return p


def permute_cols(a: np.ndarray, p) -> np.ndarray:
    """Output column j is input column p[j]."""
    _check2d(a)
    p = check_permutation(p, a.shape[1])
    return a[:, p].copy()


def permute_rows(a: np.ndarray, p) -> np.ndarray:
    _check2d(a)
    p = check_permutation(p, a.shape[0])
    return a[p, :].copy()


def inverse_permutation(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.intp)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


class RngStream:
    """Counter-based (Philox) random stream keyed by (seed, stream_id).

    Equal (seed, stream_id) pairs reproduce the same draw sequence on any
    platform; distinct stream ids are statistically independent, so every
    randomized stage of a run owns a named stream and results do not depend
    on execution order.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def dirichlet(self, alpha: np.ndarray) -> np.ndarray:
        return self.gen.dirichlet(alpha)
