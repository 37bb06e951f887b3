"""Forward and backward passes of the low-rank bilinear pooling variants.

All functions accept inputs with leading batch axes (``x`` of shape
``(..., D_X)``); the pooled output keeps those axes. Pooled vectors use
column-major vectorization, ``z[j*M + i]`` pairs row ``i`` of the x-side
projection with row ``j`` of the y-side projection.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .linalg import Rng, matvec, outer, tally_flops, unvec_col, vec_col
from .projections import (
    ProjectionKind,
    ProjectionStack,
    build_orth_gaussian_full,
    build_orth_gaussian_simplified,
    build_rademacher,
    init_learnable,
)

__all__ = [
    "Variant",
    "BilinearConfig",
    "PoolGrads",
    "HadamardGrads",
    "build_stack",
    "forward_rp",
    "backward_rp",
    "forward_full",
    "feature_maps",
    "backward_full",
    "forward_hadamard",
    "backward_hadamard",
    "flops_rp",
    "flops_hadamard",
]


class Variant(enum.Enum):
    RPBINARY = "rpbinary"
    RPGAUSSIAN = "rpgaussian"
    RPGAUSSIAN_FULL = "rpgaussianfull"
    LEARNABLE = "learnable"
    HADAMARD = "hadamard"


_KIND_FOR_VARIANT = {
    Variant.RPBINARY: ProjectionKind.RADEMACHER,
    Variant.RPGAUSSIAN: ProjectionKind.ORTH_GAUSSIAN_SIMPLIFIED,
    Variant.RPGAUSSIAN_FULL: ProjectionKind.ORTH_GAUSSIAN_FULL,
    Variant.LEARNABLE: ProjectionKind.LEARNABLE,
}


@dataclass(frozen=True)
class BilinearConfig:
    """Pooling variant and dimensions.

    ``normalize`` applies the ``1/(R sqrt(MN))`` scaling to the linear forms.
    ``average_ranks`` applies ``1/R`` to the sin/cos form so that multi-rank
    outputs average the per-rank feature maps instead of summing them.
    """

    variant: Variant
    R: int
    M: int
    N: int
    D_X: int
    D_Y: int
    normalize: bool = True
    average_ranks: bool = True

    def __post_init__(self):
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", Variant(self.variant))
        if min(self.R, self.M, self.N, self.D_X, self.D_Y) < 1:
            raise ValueError("all bilinear dimensions must be >= 1")

    @property
    def output_dim(self) -> int:
        if self.variant is Variant.RPGAUSSIAN_FULL:
            return 4 * self.M * self.N
        return self.M * self.N

    @property
    def projection_kind(self) -> ProjectionKind:
        return _KIND_FOR_VARIANT[self.variant]


@dataclass
class PoolGrads:
    """Cotangents of a pooling call.

    ``d_E``/``d_F`` are gradients with respect to the stored base matrices
    (equal to the gradient w.r.t. the applied matrices when the bandwidth is
    1); present only for trainable stacks. ``d_sigma``/``d_rho`` are present
    only when the stack learns its bandwidths.
    """

    d_x: np.ndarray
    d_y: np.ndarray
    d_E: np.ndarray | None = None
    d_F: np.ndarray | None = None
    d_sigma: np.ndarray | None = None
    d_rho: np.ndarray | None = None


@dataclass
class HadamardGrads:
    d_x: np.ndarray
    d_y: np.ndarray
    d_U: np.ndarray
    d_V: np.ndarray
    d_P: np.ndarray | None = None


def build_stack(rng: Rng, cfg: BilinearConfig, sigma=None, rho=None) -> ProjectionStack:
    kind = cfg.projection_kind
    args = (rng, cfg.R, cfg.M, cfg.N, cfg.D_X, cfg.D_Y)
    if kind is ProjectionKind.RADEMACHER:
        return build_rademacher(*args)
    if kind is ProjectionKind.ORTH_GAUSSIAN_FULL:
        return build_orth_gaussian_full(*args, sigma=sigma, rho=rho)
    if kind is ProjectionKind.ORTH_GAUSSIAN_SIMPLIFIED:
        return build_orth_gaussian_simplified(*args, sigma=sigma, rho=rho)
    return init_learnable(*args)


def _check(stack: ProjectionStack, cfg: BilinearConfig, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if (stack.R, stack.M, stack.N, stack.D_X, stack.D_Y) != (cfg.R, cfg.M, cfg.N, cfg.D_X, cfg.D_Y):
        raise ValueError("projection stack does not match the bilinear config")
    if x.ndim < 1 or x.shape[-1] != cfg.D_X:
        raise ValueError(f"x must have trailing dimension {cfg.D_X}, got shape {x.shape}")
    if y.ndim < 1 or y.shape[-1] != cfg.D_Y:
        raise ValueError(f"y must have trailing dimension {cfg.D_Y}, got shape {y.shape}")
    return x, y


def _rp_scale(cfg: BilinearConfig) -> float:
    return 1.0 / (cfg.R * math.sqrt(cfg.M * cfg.N)) if cfg.normalize else 1.0


def _project(stack: ProjectionStack, x, y):
    # x[..., None, :] broadcasts the input against the rank axis of E
    u = matvec(stack.E, x[..., None, :])
    v = matvec(stack.F, y[..., None, :])
    return u, v


def _sum_ranks(P: np.ndarray) -> np.ndarray:
    R, rows, cols = P.shape[-3:]
    tally_flops((R - 1) * rows * cols * math.prod(P.shape[:-3]))
    return P.sum(axis=-3)


def forward_rp(stack: ProjectionStack, cfg: BilinearConfig, x, y) -> np.ndarray:
    """Linear low-rank pooling ``c * vec(sum_r (E^r x) outer (F^r y))``."""
    x, y = _check(stack, cfg, x, y)
    u, v = _project(stack, x, y)
    Z = _sum_ranks(outer(u, v))
    z = vec_col(Z)
    if cfg.normalize:
        tally_flops(z.size)
        z = z * _rp_scale(cfg)
    return z


def backward_rp(stack: ProjectionStack, cfg: BilinearConfig, x, y, d_z) -> PoolGrads:
    """Vector-Jacobian product of :func:`forward_rp`.

    With ``G = unvec(d_z)``, ``u_r = E^r x`` and ``v_r = F^r y``:
    ``d_u_r = c G v_r``, ``d_v_r = c G^T u_r``, ``d_x = sum_r E^r^T d_u_r``.
    Since ``E^r = base_E^r / sigma^r``, the bandwidth gradient is
    ``d_sigma_r = -(1/sigma_r) <d_u_r, u_r>`` (summed over batch axes).
    """
    x, y = _check(stack, cfg, x, y)
    d_z = np.asarray(d_z, dtype=np.float64)
    if d_z.shape[-1] != cfg.M * cfg.N:
        raise ValueError(f"d_z must have trailing dimension {cfg.M * cfg.N}")
    c = _rp_scale(cfg)
    u, v = _project(stack, x, y)
    G = unvec_col(d_z, cfg.M, cfg.N)
    d_u = c * np.einsum("...mn,...rn->...rm", G, v)
    d_v = c * np.einsum("...mn,...rm->...rn", G, u)
    return _chain_projection(stack, x, y, u, v, d_u, d_v)


def _chain_projection(stack, x, y, u, v, d_u, d_v) -> PoolGrads:
    E, F = stack.E, stack.F
    d_x = np.einsum("...rmd,...rm->...d", E, d_u)
    d_y = np.einsum("...rnd,...rn->...d", F, d_v)
    grads = PoolGrads(d_x=d_x, d_y=d_y)
    unbatched = stack.base_E.ndim == 3
    if stack.trainable and unbatched:
        R, M, N = stack.R, stack.M, stack.N
        xb = np.broadcast_to(x, d_u.shape[:-2] + x.shape[-1:]).reshape(-1, stack.D_X)
        yb = np.broadcast_to(y, d_v.shape[:-2] + y.shape[-1:]).reshape(-1, stack.D_Y)
        d_E = np.einsum("brm,bd->rmd", d_u.reshape(-1, R, M), xb)
        d_F = np.einsum("brn,bd->rnd", d_v.reshape(-1, R, N), yb)
        grads.d_E = d_E / stack.sigma[:, None, None]
        grads.d_F = d_F / stack.rho[:, None, None]
    if stack.learn_bandwidth and unbatched:
        R = stack.R
        grads.d_sigma = -(d_u * u).reshape(-1, R, d_u.shape[-1]).sum(axis=(0, 2)) / stack.sigma
        grads.d_rho = -(d_v * v).reshape(-1, R, d_v.shape[-1]).sum(axis=(0, 2)) / stack.rho
    return grads


def _phi(a: np.ndarray) -> np.ndarray:
    M = a.shape[-1]
    tally_flops(3 * a.size)
    return np.concatenate([np.sin(a), np.cos(a)], axis=-1) / math.sqrt(M)


def feature_maps(stack: ProjectionStack, x, y):
    """Per-rank sin/cos maps ``(phi(E^r x), phi(F^r y))``, shapes ``(..., R, 2M)`` and ``(..., R, 2N)``."""
    a, b = _project(stack, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return _phi(a), _phi(b)


def _full_scale(cfg: BilinearConfig) -> float:
    return 1.0 / cfg.R if cfg.average_ranks else 1.0


def forward_full(stack: ProjectionStack, cfg: BilinearConfig, x, y) -> np.ndarray:
    """Sin/cos pooling ``s * vec(sum_r phi(E^r x) outer phi(F^r y))``.

    ``phi(a) = [sin(a), cos(a)] / sqrt(len(a))`` so ``||phi(a)|| = 1``. The
    output has ``4 M N`` entries; ``s = 1/R`` when ``cfg.average_ranks``.
    """
    if stack.kind not in (ProjectionKind.ORTH_GAUSSIAN_FULL, ProjectionKind.ORTH_GAUSSIAN_SIMPLIFIED):
        raise ValueError("sin/cos pooling needs an orthogonal Gaussian projection stack")
    x, y = _check(stack, cfg, x, y)
    a, b = _project(stack, x, y)
    Z = _sum_ranks(outer(_phi(a), _phi(b)))
    z = vec_col(Z)
    if cfg.average_ranks and cfg.R > 1:
        tally_flops(z.size)
        z = z * _full_scale(cfg)
    return z


def backward_full(stack: ProjectionStack, cfg: BilinearConfig, x, y, d_z) -> PoolGrads:
    """Vector-Jacobian product of :func:`forward_full`."""
    x, y = _check(stack, cfg, x, y)
    d_z = np.asarray(d_z, dtype=np.float64)
    M, N = cfg.M, cfg.N
    if d_z.shape[-1] != 4 * M * N:
        raise ValueError(f"d_z must have trailing dimension {4 * M * N}")
    s = _full_scale(cfg)
    a, b = _project(stack, x, y)
    pa, pb = _phi(a), _phi(b)
    G = unvec_col(d_z, 2 * M, 2 * N)
    d_pa = s * np.einsum("...mn,...rn->...rm", G, pb)
    d_pb = s * np.einsum("...mn,...rm->...rn", G, pa)
    # d/da [sin a, cos a]/sqrt(M) = [cos a, -sin a]/sqrt(M)
    d_a = (d_pa[..., :M] * np.cos(a) - d_pa[..., M:] * np.sin(a)) / math.sqrt(M)
    d_b = (d_pb[..., :N] * np.cos(b) - d_pb[..., N:] * np.sin(b)) / math.sqrt(N)
    return _chain_projection(stack, x, y, a, b, d_a, d_b)


def _check_hadamard(U, V, P, x, y):
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if U.ndim != 2 or V.ndim != 2 or U.shape[0] != V.shape[0]:
        raise ValueError("U and V must be matrices with the same number of rows")
    if x.shape[-1] != U.shape[1] or y.shape[-1] != V.shape[1]:
        raise ValueError("input dimensions do not match U/V columns")
    if P is not None:
        P = np.asarray(P, dtype=np.float64)
        if P.ndim != 2 or P.shape[1] != U.shape[0]:
            raise ValueError("P must have as many columns as U has rows")
    return U, V, P, x, y


def forward_hadamard(U, V, P, x, y) -> np.ndarray:
    """Low-rank Hadamard baseline ``P ((U x) * (V y))``; ``P=None`` skips the output projection."""
    U, V, P, x, y = _check_hadamard(U, V, P, x, y)
    ux, vy = matvec(U, x), matvec(V, y)
    tally_flops(math.prod(np.broadcast_shapes(ux.shape, vy.shape)))
    h = ux * vy
    return h if P is None else matvec(P, h)


def _batch_outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum over batch axes of a[..., i] * b[..., j]``."""
    b = np.broadcast_to(b, a.shape[:-1] + b.shape[-1:])
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def backward_hadamard(U, V, P, x, y, d_z) -> HadamardGrads:
    U, V, P, x, y = _check_hadamard(U, V, P, x, y)
    d_z = np.asarray(d_z, dtype=np.float64)
    ux, vy = x @ U.T, y @ V.T
    h = ux * vy
    d_h = d_z if P is None else d_z @ P
    if d_h.shape[-1] != U.shape[0]:
        raise ValueError("d_z has the wrong trailing dimension")
    d_ux, d_vy = d_h * vy, d_h * ux
    grads = HadamardGrads(
        d_x=d_ux @ U,
        d_y=d_vy @ V,
        d_U=_batch_outer_sum(d_ux, x),
        d_V=_batch_outer_sum(d_vy, y),
    )
    if P is not None:
        grads.d_P = _batch_outer_sum(d_z, h)
    return grads


def flops_rp(R: int, M: int, N: int, D_X: int, D_Y: int, normalize: bool = True) -> int:
    """Closed-form flop count of :func:`forward_rp` for one input pair.

    Projections ``2R(M D_X + N D_Y)``, outer products ``R M N``, rank sum
    ``(R-1) M N`` and the optional scaling ``M N``.
    """
    return R * (2 * M * D_X + 2 * N * D_Y) + R * M * N + (R - 1) * M * N + (M * N if normalize else 0)


def flops_hadamard(d_h: int, D_X: int, D_Y: int, d_out: int | None = None) -> int:
    """Closed-form flop count of :func:`forward_hadamard` for one input pair."""
    return 2 * d_h * D_X + 2 * d_h * D_Y + d_h + (2 * d_out * d_h if d_out else 0)
