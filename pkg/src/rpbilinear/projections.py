"""Construction and serialization of the R pairs of projection matrices."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .linalg import Rng, chi_samples, haar_orthogonal

__all__ = [
    "ProjectionKind",
    "ProjectionStack",
    "build_rademacher",
    "build_orth_gaussian_full",
    "build_orth_gaussian_simplified",
    "init_learnable",
    "stack_to_bytes",
    "stack_from_bytes",
]


class ProjectionKind(enum.Enum):
    RADEMACHER = "rademacher"
    ORTH_GAUSSIAN_FULL = "orth_gaussian_full"
    ORTH_GAUSSIAN_SIMPLIFIED = "orth_gaussian_simplified"
    LEARNABLE = "learnable"


_KIND_CODES = {
    ProjectionKind.RADEMACHER: 0,
    ProjectionKind.ORTH_GAUSSIAN_FULL: 1,
    ProjectionKind.ORTH_GAUSSIAN_SIMPLIFIED: 2,
    ProjectionKind.LEARNABLE: 3,
}


@dataclass
class ProjectionStack:
    """R pairs ``(E^r, F^r)`` together with their bandwidths.

    ``base_E``/``base_F`` hold the sampled matrices before bandwidth scaling;
    the matrices actually applied are ``E^r = base_E^r / sigma^r`` and
    ``F^r = base_F^r / rho^r``. Arrays may carry extra leading axes, each
    index of which is an independent draw of the whole stack (used by the
    Monte-Carlo harness to vectorize over samples).

    ``trainable`` marks the matrices as learnable parameters;
    ``learn_bandwidth`` marks ``sigma``/``rho`` as learnable.
    """

    kind: ProjectionKind
    base_E: np.ndarray  # (..., R, M, D_X)
    base_F: np.ndarray  # (..., R, N, D_Y)
    sigma: np.ndarray  # (..., R)
    rho: np.ndarray  # (..., R)
    trainable: bool = False
    learn_bandwidth: bool = False

    def __post_init__(self):
        self.base_E = np.asarray(self.base_E, dtype=np.float64)
        self.base_F = np.asarray(self.base_F, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.base_E.ndim < 3 or self.base_F.ndim < 3:
            raise ValueError("base_E and base_F must be (..., R, rows, cols)")
        if self.base_E.shape[-3] != self.base_F.shape[-3]:
            raise ValueError("E and F stacks must have the same rank R")
        if self.sigma.shape[-1] != self.R or self.rho.shape[-1] != self.R:
            raise ValueError("need one sigma and one rho per rank")
        if np.any(self.sigma <= 0) or np.any(self.rho <= 0):
            raise ValueError("bandwidths must be strictly positive")

    @property
    def R(self) -> int:
        return self.base_E.shape[-3]

    @property
    def M(self) -> int:
        return self.base_E.shape[-2]

    @property
    def N(self) -> int:
        return self.base_F.shape[-2]

    @property
    def D_X(self) -> int:
        return self.base_E.shape[-1]

    @property
    def D_Y(self) -> int:
        return self.base_F.shape[-1]

    @property
    def E(self) -> np.ndarray:
        return self.base_E / self.sigma[..., :, None, None]

    @property
    def F(self) -> np.ndarray:
        return self.base_F / self.rho[..., :, None, None]

    def copy(self) -> "ProjectionStack":
        return ProjectionStack(
            self.kind,
            self.base_E.copy(),
            self.base_F.copy(),
            self.sigma.copy(),
            self.rho.copy(),
            self.trainable,
            self.learn_bandwidth,
        )


def _check_dims(*dims: int) -> None:
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")


def _bandwidths(values, R: int, batch: tuple[int, ...], name: str) -> np.ndarray:
    if values is None:
        values = 1.0
    arr = np.broadcast_to(np.asarray(values, dtype=np.float64), batch + (R,)).copy()
    if np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive")
    return arr


def build_rademacher(rng: Rng, R: int, M: int, N: int, D_X: int, D_Y: int,
                     batch: tuple[int, ...] = ()) -> ProjectionStack:
    """I.i.d. +-1 entries. ``M > D_X`` is allowed here."""
    _check_dims(R, M, N, D_X, D_Y)
    batch = tuple(batch)
    E = rng.rademacher(batch + (R, M, D_X))
    F = rng.rademacher(batch + (R, N, D_Y))
    ones = np.ones(batch + (R,))
    return ProjectionStack(ProjectionKind.RADEMACHER, E, F, ones, ones.copy())


def _orth_rows(rng: Rng, R: int, rows: int, dim: int, batch, with_chi: bool) -> np.ndarray:
    P = haar_orthogonal(rng, dim, batch + (R,))
    if with_chi:
        # diag(chi draws) @ P, then keep the first `rows` rows
        scale = chi_samples(rng, dim, batch + (R, dim))
        P = scale[..., :, None] * P
    else:
        P = np.sqrt(dim) * P
    return P[..., :rows, :]


def build_orth_gaussian_full(rng: Rng, R: int, M: int, N: int, D_X: int, D_Y: int,
                             sigma=None, rho=None, batch: tuple[int, ...] = ()) -> ProjectionStack:
    """``E^r = (1/sigma^r) I_{M x D_X} diag(chi(D_X)) P^r`` with Haar ``P^r``; same for F."""
    _check_dims(R, M, N, D_X, D_Y)
    if M > D_X or N > D_Y:
        raise ValueError(f"orthogonal projections need M <= D_X and N <= D_Y (got M={M}, D_X={D_X}, N={N}, D_Y={D_Y})")
    batch = tuple(batch)
    sig = _bandwidths(sigma, R, batch, "sigma")
    rh = _bandwidths(rho, R, batch, "rho")
    E = _orth_rows(rng.split("E"), R, M, D_X, batch, with_chi=True)
    F = _orth_rows(rng.split("F"), R, N, D_Y, batch, with_chi=True)
    return ProjectionStack(ProjectionKind.ORTH_GAUSSIAN_FULL, E, F, sig, rh, learn_bandwidth=True)


def build_orth_gaussian_simplified(rng: Rng, R: int, M: int, N: int, D_X: int, D_Y: int,
                                   sigma=None, rho=None, batch: tuple[int, ...] = ()) -> ProjectionStack:
    """``E^r = (sqrt(D_X)/sigma^r) I_{M x D_X} P^r``; every row has norm ``sqrt(D_X)/sigma^r``."""
    _check_dims(R, M, N, D_X, D_Y)
    if M > D_X or N > D_Y:
        raise ValueError(f"orthogonal projections need M <= D_X and N <= D_Y (got M={M}, D_X={D_X}, N={N}, D_Y={D_Y})")
    batch = tuple(batch)
    sig = _bandwidths(sigma, R, batch, "sigma")
    rh = _bandwidths(rho, R, batch, "rho")
    E = _orth_rows(rng.split("E"), R, M, D_X, batch, with_chi=False)
    F = _orth_rows(rng.split("F"), R, N, D_Y, batch, with_chi=False)
    return ProjectionStack(ProjectionKind.ORTH_GAUSSIAN_SIMPLIFIED, E, F, sig, rh, learn_bandwidth=True)


def init_learnable(rng: Rng, R: int, M: int, N: int, D_X: int, D_Y: int) -> ProjectionStack:
    """Normal entries with std ``1/sqrt(D)`` for the matching input dimension."""
    _check_dims(R, M, N, D_X, D_Y)
    E = rng.normal((R, M, D_X)) / np.sqrt(D_X)
    F = rng.normal((R, N, D_Y)) / np.sqrt(D_Y)
    ones = np.ones(R)
    return ProjectionStack(ProjectionKind.LEARNABLE, E, F, ones, ones.copy(), trainable=True)


# Blob layout: b"BRPS", u32 version, u32 kind code, u32 R, M, N, D_X, D_Y,
# u32 flags (bit0 trainable, bit1 learn_bandwidth), then little-endian f64
# base_E, base_F, sigma, rho in C order.
_STACK_MAGIC = b"BRPS"
_STACK_VERSION = 1
_STACK_HEADER = struct.Struct("<4s8I")


def stack_to_bytes(stack: ProjectionStack) -> bytes:
    if stack.base_E.ndim != 3:
        raise ValueError("only unbatched stacks can be serialized")
    flags = int(stack.trainable) | (int(stack.learn_bandwidth) << 1)
    header = _STACK_HEADER.pack(_STACK_MAGIC, _STACK_VERSION, _KIND_CODES[stack.kind],
                                stack.R, stack.M, stack.N, stack.D_X, stack.D_Y, flags)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in (stack.base_E, stack.base_F, stack.sigma, stack.rho))
    return header + payload


def stack_from_bytes(blob: bytes) -> ProjectionStack:
    if len(blob) < _STACK_HEADER.size:
        raise ValueError("projection blob shorter than its header")
    magic, version, code, R, M, N, D_X, D_Y, flags = _STACK_HEADER.unpack_from(blob)
    if magic != _STACK_MAGIC:
        raise ValueError(f"bad projection magic {magic!r}")
    if version != _STACK_VERSION:
        raise ValueError(f"unsupported projection blob version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if code not in kinds:
        raise ValueError(f"unknown projection kind code {code}")
    sizes = [R * M * D_X, R * N * D_Y, R, R]
    expected = _STACK_HEADER.size + 8 * sum(sizes)
    if len(blob) != expected:
        raise ValueError(f"projection blob has {len(blob)} bytes, expected {expected}")
    arrays, off = [], _STACK_HEADER.size
    for n in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    return ProjectionStack(
        kinds[code],
        arrays[0].reshape(R, M, D_X),
        arrays[1].reshape(R, N, D_Y),
        arrays[2],
        arrays[3],
        trainable=bool(flags & 1),
        learn_bandwidth=bool(flags & 2),
    )
