"""Dense linear algebra helpers, flop instrumentation and the seeded RNG.

Matrices are plain ``float64`` numpy arrays. Every helper accepts leading
batch axes so the same code path serves a single vector, a sequence of
frames, or a stack of independently sampled projection matrices.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from contextvars import ContextVar

import numpy as np

__all__ = [
    "Rng",
    "FlopCounter",
    "count_flops",
    "tally_flops",
    "as_matrix",
    "matvec",
    "outer",
    "vec_col",
    "unvec_col",
    "haar_orthogonal",
    "chi_sample",
    "chi_samples",
]


class Rng:
    """Counter-based random stream (numpy ``Philox4x64``).

    The 128-bit Philox key is the first 16 bytes of
    ``blake2b(b"rpbilinear" + seed as 8 little-endian bytes)``.
    ``split(label)`` derives a child key as
    ``blake2b(parent_key + label.encode())`` without touching the parent
    stream, so substreams can be handed to workers in any order.
    """

    def __init__(self, seed: int = 0, *, _key: bytes | None = None):
        if _key is None:
            seed_bytes = int(seed).to_bytes(8, "little", signed=False)
            _key = hashlib.blake2b(b"rpbilinear" + seed_bytes, digest_size=16).digest()
        self.seed = int(seed)
        self._key = _key
        key = np.frombuffer(_key, dtype="<u8").astype(np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str | int) -> "Rng":
        child = hashlib.blake2b(self._key + str(label).encode(), digest_size=16).digest()
        return Rng(self.seed, _key=child)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def rademacher(self, size) -> np.ndarray:
        """I.i.d. signs in {-1, +1} as float64, one random bit per entry."""
        size = tuple(np.atleast_1d(size)) if not isinstance(size, tuple) else size
        n = int(np.prod(size, dtype=np.int64))
        raw = np.frombuffer(self.gen.bytes((n + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(raw)[:n]
        return (bits.astype(np.float64) * 2.0 - 1.0).reshape(size)

    def bernoulli_mask(self, keep: float, size) -> np.ndarray:
        return (self.gen.random(size) < keep).astype(np.float64)


class FlopCounter:
    """Tallies floating point operations issued through this module."""

    def __init__(self):
        self.flops = 0

    def add(self, n: int) -> None:
        self.flops += int(n)


_active_counter: ContextVar[FlopCounter | None] = ContextVar("_active_counter", default=None)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def tally_flops(n: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(n)


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and convert to a finite 2-D float64 array."""
    a = np.asarray(data, dtype=np.float64)
    if rows is not None and cols is not None and a.ndim == 1:
        if a.size != rows * cols:
            raise ValueError(f"expected {rows * cols} entries, got {a.size}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


def matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``out[..., i] = sum_j A[..., i, j] * x[..., j]`` with broadcasting.

    Counts ``2 * rows * cols`` flops per broadcast element.
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.ndim < 2 or x.ndim < 1:
        raise ValueError("matvec needs a matrix and a vector")
    if A.shape[-1] != x.shape[-1]:
        raise ValueError(f"dimension mismatch: A has {A.shape[-1]} columns, x has {x.shape[-1]} entries")
    batch = np.broadcast_shapes(A.shape[:-2], x.shape[:-1])
    tally_flops(2 * A.shape[-2] * A.shape[-1] * math.prod(batch))
    if A.ndim == 2:
        return x @ A.T
    return np.einsum("...ij,...j->...i", A, x)


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``out[..., i, j] = u[..., i] * v[..., j]``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    batch = np.broadcast_shapes(u.shape[:-1], v.shape[:-1])
    tally_flops(u.shape[-1] * v.shape[-1] * math.prod(batch))
    return u[..., :, None] * v[..., None, :]


def vec_col(A: np.ndarray) -> np.ndarray:
    """Column-major flattening of the trailing two axes: ``out[j*M + i] = A[i, j]``."""
    A = np.asarray(A)
    M, N = A.shape[-2], A.shape[-1]
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (M * N,))


def unvec_col(v: np.ndarray, M: int, N: int) -> np.ndarray:
    """Inverse of :func:`vec_col`."""
    v = np.asarray(v)
    if v.shape[-1] != M * N:
        raise ValueError(f"expected trailing size {M * N}, got {v.shape[-1]}")
    return np.swapaxes(v.reshape(v.shape[:-1] + (N, M)), -1, -2)


def haar_orthogonal(rng: Rng, n: int, batch: tuple[int, ...] = ()) -> np.ndarray:
    """Haar-distributed orthogonal ``n x n`` matrices.

    QR of a standard normal matrix with each column of Q multiplied by the
    sign of the matching diagonal entry of R. Rank-deficient draws (a zero
    on R's diagonal) are resampled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    while True:
        G = rng.normal(tuple(batch) + (n, n))
        Q, Rt = np.linalg.qr(G)
        d = np.sign(np.diagonal(Rt, axis1=-2, axis2=-1))
        if np.all(d != 0):
            return Q * d[..., None, :]


def chi_samples(rng: Rng, dof: int, size=()) -> np.ndarray:
    """Chi-distributed draws, ``sqrt(sum of dof squared standard normals)``."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    size = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    g = rng.normal(size + (dof,))
    out = np.sqrt(np.einsum("...k,...k->...", g, g))
    # a draw of exactly zero has probability zero; keep the strict-positivity contract anyway
    return np.where(out > 0, out, np.finfo(np.float64).tiny)


def chi_sample(rng: Rng, dof: int) -> float:
    return float(chi_samples(rng, dof))
