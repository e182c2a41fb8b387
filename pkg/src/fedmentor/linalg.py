"""Dense float64 matrices and reproducible random streams.

Everything downstream (adapters, backbone weights, data batches) is built on
two primitives defined here: an immutable 2-D ``Matrix`` of 64-bit floats and
a seeded ``Rng`` whose output depends only on the seed tuple it was derived
from, never on call order elsewhere in the program or on thread scheduling.

The generator is numpy's PCG64 keyed through ``SeedSequence``; Gaussian
samples come from numpy's ziggurat (``standard_normal``). Both are fixed by
name here so that streams are bit-reproducible across platforms and runs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Matrix",
    "Rng",
    "matmul",
    "gaussian",
    "axpy",
    "frobenius_norm",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def _as_matrix_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"matrix data must be 2-D, got ndim={arr.ndim}")
    rows, cols = arr.shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix entries must be finite (no NaN/Inf)")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Matrix:
    """Immutable row-major dense matrix of float64 scalars.

    Safe to share across threads: the backing array is marked read-only at
    construction and every public operation returns a new ``Matrix``.
    """

    array: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "array", _as_matrix_array(self.array))

    @property
    def rows(self) -> int:
        return self.array.shape[0]

    @property
    def cols(self) -> int:
        return self.array.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries (read-only)."""
        return self.array.reshape(-1)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls(np.full((rows, cols), float(value)))

    @classmethod
    def from_rows(cls, rows) -> "Matrix":
        return cls(np.array(rows, dtype=np.float64))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.array, other.array)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def _tag_to_entropy(tag: int | str) -> int:
    """Map a stream tag to a stable non-negative integer.

    Strings go through BLAKE2b so the mapping never depends on Python's
    salted ``hash()``.
    """
    if isinstance(tag, bool):
        raise TypeError("bool is not a valid stream tag")
    if isinstance(tag, int):
        return tag & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream tags must be int or str, got {type(tag).__name__}")


class Rng:
    """Seeded random stream keyed by (seed, *stream tags).

    Identical (seed, tags) always yields an identical sample stream; distinct
    tag tuples yield statistically independent streams. An ``Rng`` is
    single-owner: it is consumed sequentially and must never be shared across
    workers. Use :meth:`derive` to mint a fresh stream for a sub-task (e.g.
    per client, per round, per purpose) — derivation does not advance this
    stream's state, so scheduling order cannot change results.
    """

    def __init__(self, seed: int, *stream: int | str):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self._seed = seed
        self._stream = tuple(stream)
        entropy = [seed] + [_tag_to_entropy(t) for t in stream]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def stream(self) -> tuple[int | str, ...]:
        return self._stream

    def derive(self, *tags: int | str) -> "Rng":
        """Fresh independent stream for (seed, *self.stream, *tags)."""
        return Rng(self._seed, *self._stream, *tags)

    def standard_normal(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.standard_normal((rows, cols))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, size: int) -> np.ndarray:
        return self._gen.random(size)

    def __repr__(self) -> str:
        return f"Rng(seed={self._seed}, stream={self._stream!r})"


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(
            f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    return Matrix(a.array @ b.array)


def gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    """Matrix of i.i.d. Gaussian samples; std=0 degenerates to a constant matrix."""
    std = float(std)
    if std < 0:
        raise ValueError(f"standard deviation must be >= 0, got {std}")
    if std == 0.0:
        return Matrix.full(rows, cols, mean)
    return Matrix(mean + std * rng.standard_normal(rows, cols))


def axpy(alpha: float, x: Matrix, y: Matrix) -> Matrix:
    """Element-wise alpha*x + y."""
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return Matrix(float(alpha) * x.array + y.array)


def frobenius_norm(m: Matrix) -> float:
    """Square root of the sum of squared entries."""
    return float(np.sqrt(np.sum(m.array * m.array)))
