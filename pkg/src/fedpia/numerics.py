"""Dense float64 linear algebra, labeled deterministic RNG streams, and
order-free reductions.

Everything downstream moves 2-D float64 arrays through these helpers; the
constructors reject NaN/Inf so later stages can assume finite inputs.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "pairwise_euclidean",
    "relu",
    "sigmoid",
    "softmax",
    "weighted_sum",
    "Rng",
    "rng_normal",
]


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate ``data`` as a finite 2-D float64 array, optionally pinning its shape."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {a.shape[1]}")
    if not np.isfinite(a).all():
        raise ShapeError("matrix contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape[1]} vs {b.shape[0]})")
    return a @ b


def pairwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs row distances: out[i, j] = ||a[i] - b[j]||_2.

    Computed via explicit broadcast differences rather than the Gram-matrix
    shortcut so that swapping the arguments transposes the result bitwise.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_euclidean: support dims differ ({a.shape[1]} vs {b.shape[1]})"
        )
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def weighted_sum(arrays: list[np.ndarray], weights: list[float]) -> np.ndarray:
    """Order-free weighted sum of same-shaped arrays.

    Each entry is accumulated with ``math.fsum`` (exactly rounded), so
    permuting the (array, weight) pairs cannot change the result bitwise.
    Server-side reductions rely on this for client-order covariance.
    """
    if len(arrays) != len(weights):
        raise ShapeError("weighted_sum: arrays and weights length mismatch")
    if not arrays:
        raise ShapeError("weighted_sum: empty input")
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"weighted_sum: shape mismatch {a.shape} vs {shape}")
    terms = np.stack([w * a for a, w in zip(arrays, weights)], axis=0)
    flat = terms.reshape(len(arrays), -1)
    out = np.fromiter(
        (math.fsum(flat[:, j]) for j in range(flat.shape[1])),
        dtype=np.float64,
        count=flat.shape[1],
    )
    return out.reshape(shape)


def _philox_key(seed: int, path: str) -> int:
    digest = hashlib.blake2b(
        f"{seed}\x1f{path}".encode("utf-8"), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based random stream addressable by slash-separated labels.

    Substreams are keyed by hashing ``(seed, path)``, so the values drawn
    under one label never depend on what other labels were consumed or in
    what order. ``Rng(s).child("a").child("b")`` equals ``Rng(s, "a/b")``.
    """

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path
        self._gen = np.random.Generator(
            np.random.Philox(key=_philox_key(self.seed, path))
        )

    def child(self, label: str) -> "Rng":
        if "\x1f" in label:
            raise ValueError("rng labels must not contain the separator byte")
        path = f"{self.path}/{label}" if self.path else label
        return Rng(self.seed, path)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        return std * self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha: np.ndarray) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)


def rng_normal(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    """Draw a rows x cols Gaussian matrix from ``rng``'s stream."""
    if std <= 0:
        raise ValueError("std must be positive")
    if rows < 1 or cols < 1:
        raise ShapeError("rng_normal: dimensions must be >= 1")
    return rng.normal((rows, cols), std)
