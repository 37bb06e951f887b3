"""Monte-Carlo checks of the kernel identities behind the pooling variants.

Each check draws many independent projection stacks, evaluates an
estimator of the compositional kernel, and compares its empirical mean
against the analytic target. Results are :class:`KernelReport` records
that serialize to JSON lines.

Estimator bookkeeping for the normalized linear forms (scale
``c = 1/(R sqrt(MN))``): cross-rank terms vanish in expectation, so
``E<z1, z2> = c^2 * R * M * N * E[<e,x1><e,x2>] E[<f,y1><f,y2>]``.
For Rademacher rows ``E[<e,x1><e,x2>] = <x1,x2>``, hence ``R <z1,z2>`` is
unbiased for ``<x1,x2><y1,y2>``. For the simplified orthogonal rows (norm
``sqrt(D)/sigma``, uniform direction) ``E[e e^T] = I / sigma^2``, hence
``sigma^2 rho^2 R <z1,z2>`` is unbiased for the same target.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bilinear import BilinearConfig, Variant, feature_maps, forward_full, forward_rp
from .linalg import Rng
from .projections import (
    ProjectionKind,
    ProjectionStack,
    build_orth_gaussian_full,
    build_orth_gaussian_simplified,
    build_rademacher,
)

__all__ = [
    "KernelReport",
    "SuiteUsageError",
    "estimate_linear_kernel",
    "estimate_linear_kernel_many",
    "exhaustive_rademacher_expectation",
    "check_exhaustive",
    "check_concentration",
    "check_gaussian_product",
    "check_variance_structure",
    "check_simplified_gaussian",
    "gaussian_product_target",
    "run_suite",
    "SUITES",
    "write_reports",
]

Z_THRESHOLD = 4.0
VARIANCE_Z_THRESHOLD = 5.0
CHUNK = 10_000


class SuiteUsageError(ValueError):
    """A suite was requested with parameters that violate its preconditions."""


@dataclass
class KernelReport:
    """Outcome of one Monte-Carlo check.

    ``mode`` says how ``passed`` was decided: ``"abs_z"`` means
    ``|z_score| <= threshold``; ``"upper"`` means
    ``empirical_mean <= threshold`` (a one-sided bound, used for variance
    ratios); ``"exact"`` means ``|empirical_mean - target| <= threshold``
    (enumeration oracles, no sampling error).
    """

    test_name: str
    target: float
    empirical_mean: float
    empirical_var: float
    n_samples: int
    std_error: float
    z_score: float
    passed: bool
    seed: int
    threshold: float = Z_THRESHOLD
    mode: str = "abs_z"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        if not math.isfinite(d["z_score"]):
            d["z_score"] = "inf" if d["z_score"] > 0 else "-inf"
        return d


def _z(mean: float, target: float, se: float) -> float:
    # floor the standard error at float64 roundoff so exact-valued samples
    # (variance ~1e-32) are not flagged for last-bit differences
    floor = 64 * np.finfo(np.float64).eps * max(1.0, abs(target))
    denom = max(se, floor)
    return (mean - target) / denom


def _report(name: str, target: float, samples: np.ndarray, seed: int,
            threshold: float = Z_THRESHOLD, **extra) -> KernelReport:
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    mean = float(np.mean(samples))
    var = float(np.var(samples, ddof=1)) if n > 1 else 0.0
    se = math.sqrt(var / n)
    z = _z(mean, target, se)
    return KernelReport(name, float(target), mean, var, n, se, float(z),
                        bool(abs(z) <= threshold), int(seed), threshold, "abs_z", dict(extra))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BRP_THREADS", "1")))
    except ValueError:
        return 1


def _sample_chunks(rng: Rng, n_samples: int, fn) -> list:
    """Run ``fn(sub_rng, count)`` over fixed-size chunks, each with its own substream.

    The chunk layout does not depend on the thread count, so results are
    identical for any ``BRP_THREADS``.
    """
    counts = [min(CHUNK, n_samples - start) for start in range(0, n_samples, CHUNK)]
    jobs = [(rng.split(f"chunk{i}"), c) for i, c in enumerate(counts)]
    workers = _threads()
    if workers == 1 or len(jobs) == 1:
        return [fn(r, c) for r, c in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def _vec(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).ravel()


def _inner_z(cfg, stack, forward, x1, y1, x2, y2) -> np.ndarray:
    z1 = forward(stack, cfg, x1, y1)
    z2 = forward(stack, cfg, x2, y2)
    return np.einsum("...k,...k->...", z1, z2)


def estimate_linear_kernel_many(rng: Rng, D_X: int, D_Y: int, M: int, N: int, R: int,
                                quads, n_samples: int, name: str = "rademacher_unbiased") -> list[KernelReport]:
    """Rademacher estimator ``R <z1, z2>`` for several input quadruples.

    All quadruples are evaluated on the same stream of sampled stacks; each
    report is an independent-sample estimate for its own quadruple.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    quads = [tuple(_vec(a) for a in q) for q in quads]
    cfg = BilinearConfig(Variant.RPBINARY, R, M, N, D_X, D_Y, normalize=True)

    def chunk(sub: Rng, count: int):
        stack = build_rademacher(sub, R, M, N, D_X, D_Y, batch=(count,))
        return np.stack([R * _inner_z(cfg, stack, forward_rp, x1, y1, x2, y2)
                         for x1, x2, y1, y2 in quads], axis=0)

    values = np.concatenate(_sample_chunks(rng, n_samples, chunk), axis=1)
    reports = []
    for i, (x1, x2, y1, y2) in enumerate(quads):
        target = float(np.dot(x1, x2) * np.dot(y1, y2))
        reports.append(_report(f"{name}[R={R},case={i}]", target, values[i], rng.seed,
                               R=R, M=M, N=N, D_X=D_X, D_Y=D_Y))
    return reports


def estimate_linear_kernel(rng: Rng, D_X: int, D_Y: int, M: int, N: int, R: int,
                           x1, x2, y1, y2, n_samples: int) -> KernelReport:
    return estimate_linear_kernel_many(rng, D_X, D_Y, M, N, R, [(x1, x2, y1, y2)], n_samples)[0]


def exhaustive_rademacher_expectation(D_X: int, D_Y: int, M: int, N: int, R: int,
                                      x1, x2, y1, y2) -> tuple[float, float, int]:
    """Exact mean and variance of ``R <z1, z2>`` over every sign assignment.

    Returns ``(mean, variance, n_assignments)``. Limited to 20 sign entries.
    """
    nE, nF = R * M * D_X, R * N * D_Y
    n = nE + nF
    if n > 20:
        raise ValueError(f"{n} sign entries is too many to enumerate")
    codes = np.arange(2 ** n, dtype=np.int64)[:, None]
    signs = ((codes >> np.arange(n)) & 1).astype(np.float64) * 2.0 - 1.0
    E = signs[:, :nE].reshape(-1, R, M, D_X)
    F = signs[:, nE:].reshape(-1, R, N, D_Y)
    ones = np.ones((2 ** n, R))
    stack = ProjectionStack(ProjectionKind.RADEMACHER, E, F, ones, ones)
    cfg = BilinearConfig(Variant.RPBINARY, R, M, N, D_X, D_Y, normalize=True)
    k = R * _inner_z(cfg, stack, forward_rp, _vec(x1), _vec(y1), _vec(x2), _vec(y2))
    mean = math.fsum(k) / k.size
    var = math.fsum((k - mean) ** 2) / k.size
    return mean, var, int(k.size)


def check_exhaustive(x1, x2, y1, y2, D_X: int = 2, D_Y: int = 2, M: int = 1, N: int = 1, R: int = 1,
                     tol: float = 1e-12, seed: int = 0) -> KernelReport:
    mean, var, count = exhaustive_rademacher_expectation(D_X, D_Y, M, N, R, x1, x2, y1, y2)
    target = float(np.dot(_vec(x1), _vec(x2)) * np.dot(_vec(y1), _vec(y2)))
    diff = mean - target
    return KernelReport("rademacher_exhaustive", target, mean, var, count, math.sqrt(var / count),
                        _z(mean, target, 0.0), abs(diff) <= tol, seed, tol, "exact")


def check_concentration(rng: Rng, D: int, settings=((4, 4), (16, 16)), epsilon_grid=(0.5,),
                        n_samples: int = 50_000, R: int = 1, inputs=None,
                        ratio_bound: float = 0.5) -> list[KernelReport]:
    """Variance of the Rademacher estimator as the projection sizes grow.

    Returns one unbiasedness report per ``(M, N)`` setting (with tail
    frequencies ``P(|k - target| > eps)`` in ``extra``) followed by a
    ``concentration_ratio`` report whose ``empirical_mean`` is
    ``Var(last setting) / Var(first setting)``, passing when it is at most
    ``ratio_bound`` and the tail frequency at the first epsilon drops.
    """
    if len(settings) < 2:
        raise ValueError("need at least two (M, N) settings")
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples per setting")
    if inputs is None:
        inputs = _random_unit_quad(rng.split("inputs"), D, D)
    x1, x2, y1, y2 = (_vec(a) for a in inputs)
    target = float(np.dot(x1, x2) * np.dot(y1, y2))
    cfgs, reports, variances, tails = [], [], [], []
    for M, N in settings:
        cfg = BilinearConfig(Variant.RPBINARY, R, M, N, D, D)
        cfgs.append(cfg)

        def chunk(sub: Rng, count: int, M=M, N=N, cfg=cfg):
            stack = build_rademacher(sub, R, M, N, D, D, batch=(count,))
            return R * _inner_z(cfg, stack, forward_rp, x1, y1, x2, y2)

        k = np.concatenate(_sample_chunks(rng.split(f"setting{M}x{N}"), n_samples, chunk))
        tail = {str(eps): float(np.mean(np.abs(k - target) > eps)) for eps in epsilon_grid}
        rep = _report(f"concentration[M={M},N={N}]", target, k, rng.seed, M=M, N=N, R=R, tail_freq=tail)
        reports.append(rep)
        variances.append(rep.empirical_var)
        tails.append(tail[str(epsilon_grid[0])])
        # fourth central moment for the delta-method error of the variance ratio
        rep.extra["m4"] = float(np.mean((k - k.mean()) ** 4))
    v0, v1 = variances[0], variances[-1]
    ratio = v1 / v0 if v0 > 0 else (0.0 if v1 == 0 else math.inf)
    rel0 = math.sqrt(max(reports[0].extra["m4"] - v0 ** 2, 0.0) / n_samples) / v0 if v0 > 0 else 0.0
    rel1 = math.sqrt(max(reports[-1].extra["m4"] - v1 ** 2, 0.0) / n_samples) / v1 if v1 > 0 else 0.0
    se = ratio * math.hypot(rel0, rel1) if math.isfinite(ratio) else math.inf
    tail_drop = tails[-1] < tails[0] or tails[0] == 0.0
    passed = bool(ratio <= ratio_bound and tail_drop)
    reports.append(KernelReport(
        "concentration_ratio", ratio_bound, ratio, se ** 2 * n_samples, n_samples, se,
        _z(ratio, ratio_bound, se), passed, rng.seed, ratio_bound, "upper",
        {"variances": variances, "tail_freq_first_eps": tails, "settings": [list(s) for s in settings]},
    ))
    return reports


def gaussian_product_target(x1, x2, y1, y2, sigma: float, rho: float) -> float:
    dx = _vec(x1) - _vec(x2)
    dy = _vec(y1) - _vec(y2)
    return math.exp(-float(dx @ dx) / (2 * sigma ** 2)) * math.exp(-float(dy @ dy) / (2 * rho ** 2))


def check_gaussian_product(rng: Rng, D_X: int, D_Y: int, M: int, N: int, sigma: float, rho: float,
                           x1, x2, y1, y2, n_samples: int, R: int = 1) -> KernelReport:
    """``<z1, z2>`` of the sin/cos form against the product of two Gaussian kernels (rank 1 only)."""
    if R != 1:
        raise SuiteUsageError("the Gaussian product identity is exact only for rank R=1")
    x1, x2, y1, y2 = (_vec(a) for a in (x1, x2, y1, y2))
    cfg = BilinearConfig(Variant.RPGAUSSIAN_FULL, 1, M, N, D_X, D_Y)

    def chunk(sub: Rng, count: int):
        stack = build_orth_gaussian_full(sub, 1, M, N, D_X, D_Y, sigma, rho, batch=(count,))
        return _inner_z(cfg, stack, forward_full, x1, y1, x2, y2)

    k = np.concatenate(_sample_chunks(rng, n_samples, chunk))
    target = gaussian_product_target(x1, x2, y1, y2, sigma, rho)
    return _report("gaussian_product", target, k, rng.seed, sigma=sigma, rho=rho, M=M, N=N,
                   min_sample=float(k.min()), max_sample=float(k.max()))


@dataclass
class GaussianCase:
    """Inputs and dimensions for the sin/cos variance checks (rank 1)."""

    D_X: int
    D_Y: int
    M: int
    N: int
    x1: np.ndarray
    x2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    sigma: float = 1.0
    rho: float = 1.0


def _factor_samples(rng: Rng, case: GaussianCase, M: int, N: int, n_samples: int):
    cfg = BilinearConfig(Variant.RPGAUSSIAN_FULL, 1, M, N, case.D_X, case.D_Y)
    x1, x2, y1, y2 = (_vec(a) for a in (case.x1, case.x2, case.y1, case.y2))

    def chunk(sub: Rng, count: int):
        stack = build_orth_gaussian_full(sub, 1, M, N, case.D_X, case.D_Y, case.sigma, case.rho, batch=(count,))
        pa1, pb1 = feature_maps(stack, x1, y1)
        pa2, pb2 = feature_maps(stack, x2, y2)
        U = np.einsum("...rk,...rk->...", pa1, pa2)
        V = np.einsum("...rk,...rk->...", pb1, pb2)
        K = _inner_z(cfg, stack, forward_full, x1, y1, x2, y2)
        return np.stack([U, V, K])

    return np.concatenate(_sample_chunks(rng, n_samples, chunk), axis=1)


def check_variance_structure(rng: Rng, case: GaussianCase, n_samples: int,
                             compare_dims: tuple[int, int] | None = None) -> KernelReport:
    """Compare ``Var(k)`` with ``Var(U)Var(V) + Var(U)E[V]^2 + Var(V)E[U]^2``.

    ``U`` and ``V`` are the two factor inner products of a rank-1 sin/cos
    feature pair and ``k = <z1, z2>`` is computed from the pooled outputs.
    The standard error of ``direct - reconstructed`` comes from the
    per-sample influence values of both moment estimators. With
    ``compare_dims`` the direct variance is also estimated at the larger
    ``(M, N)`` and must be smaller there.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    U, V, K = _factor_samples(rng.split("base"), case, case.M, case.N, n_samples)
    mU, mV, mK = U.mean(), V.mean(), K.mean()
    dU, dV, dK = U - mU, V - mV, K - mK
    sU, sV, sK = np.mean(dU ** 2), np.mean(dV ** 2), np.mean(dK ** 2)
    recon = sU * sV + sU * mV ** 2 + sV * mU ** 2
    infl_recon = ((dU ** 2 - sU) * (sV + mV ** 2) + (dV ** 2 - sV) * (sU + mU ** 2)
                  + 2 * sU * mV * dV + 2 * sV * mU * dU)
    psi = (dK ** 2 - sK) - infl_recon
    psi_var = float(np.var(psi, ddof=1))
    se = math.sqrt(psi_var / n_samples)
    z = _z(float(sK), float(recon), se)
    passed = abs(z) <= VARIANCE_Z_THRESHOLD
    extra = {"var_U": float(sU), "var_V": float(sV), "mean_U": float(mU), "mean_V": float(mV),
             "max_abs_k_minus_UV": float(np.max(np.abs(K - U * V))), "M": case.M, "N": case.N}
    if compare_dims is not None:
        M2, N2 = compare_dims
        _, _, K2 = _factor_samples(rng.split("larger"), case, M2, N2, n_samples)
        var_large = float(np.var(K2))
        extra.update(compare_dims=[M2, N2], var_k_larger=var_large)
        decreasing = var_large < sK or (sK == 0.0 and var_large == 0.0)
        extra["variance_decreases"] = bool(decreasing)
        passed = passed and decreasing
    return KernelReport("variance_structure", float(recon), float(sK), psi_var, n_samples, se, float(z),
                        bool(passed), rng.seed, VARIANCE_Z_THRESHOLD, "abs_z", extra)


def check_simplified_gaussian(rng: Rng, D_X: int, D_Y: int, M: int, N: int, R: int,
                              sigma: float, rho: float, x1, x2, y1, y2, n_samples: int) -> KernelReport:
    """Estimator ``sigma^2 rho^2 R <z1, z2>`` on simplified orthogonal stacks, target ``<x1,x2><y1,y2>``."""
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    x1, x2, y1, y2 = (_vec(a) for a in (x1, x2, y1, y2))
    cfg = BilinearConfig(Variant.RPGAUSSIAN, R, M, N, D_X, D_Y, normalize=True)

    def chunk(sub: Rng, count: int):
        stack = build_orth_gaussian_simplified(sub, R, M, N, D_X, D_Y, sigma, rho, batch=(count,))
        return sigma ** 2 * rho ** 2 * R * _inner_z(cfg, stack, forward_rp, x1, y1, x2, y2)

    k = np.concatenate(_sample_chunks(rng, n_samples, chunk))
    target = float(np.dot(x1, x2) * np.dot(y1, y2))
    return _report("simplified_gaussian", target, k, rng.seed, sigma=sigma, rho=rho, R=R, M=M, N=N)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_unit_quad(rng: Rng, D_X: int, D_Y: int):
    g = rng.normal((4, max(D_X, D_Y)))
    return _unit(g[0, :D_X]), _unit(g[1, :D_X]), _unit(g[2, :D_Y]), _unit(g[3, :D_Y])


def _with_separation(rng: Rng, D: int, dist: float):
    base = rng.normal(D)
    direction = _unit(rng.normal(D))
    return base, base + dist * direction


def rademacher_quads(rng: Rng, D: int = 16):
    """Five fixed input quadruples: orthogonal, identical, 0.6-correlated, random unit, random unnormalized."""
    e = np.eye(D)
    u = np.ones(D) / math.sqrt(D)
    x_corr = 0.6 * e[0] + 0.8 * e[1]
    g = rng.normal((4, D))
    return [
        (e[0], e[1], e[0], e[2]),
        (u, u, u, u),
        (e[0], x_corr, e[0], e[0]),
        _random_unit_quad(rng.split("unit"), D, D),
        (g[0], g[1], g[2], g[3]),
    ]


SUITES = ("rademacher", "exhaustive", "concentration", "gaussian", "variance", "simplified", "all")


def run_suite(name: str, seed: int = 0, n_samples: int | None = None, rank: int | None = None) -> list[KernelReport]:
    """Run one named check suite with its default configuration."""
    if name not in SUITES:
        raise SuiteUsageError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    if name == "all":
        if rank not in (None, 1):
            raise SuiteUsageError("suite 'all' includes the Gaussian product check, which needs rank 1")
        out = []
        for sub in SUITES[:-1]:
            out.extend(run_suite(sub, seed, n_samples, rank))
        return out
    rng = Rng(seed).split(name)
    if name == "rademacher":
        ranks = (1, 2, 4) if rank is None else (rank,)
        quads = rademacher_quads(rng.split("inputs"))
        out = []
        for R in ranks:
            out.extend(estimate_linear_kernel_many(rng.split(f"R{R}"), 16, 16, 8, 8, R, quads,
                                                   n_samples or 200_000))
        return out
    if name == "exhaustive":
        cases = [
            ((1.0, 0.0), (0.6, 0.8), (1.0, 0.0), (1.0, 0.0)),
            ((1.0, 2.0), (-3.0, 0.5), (0.25, -1.0), (2.0, 4.0)),
            ((1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 1.0)),
        ]
        return [check_exhaustive(*c, R=rank or 1, seed=seed) for c in cases]
    if name == "concentration":
        return check_concentration(rng, 16, ((4, 4), (16, 16)), (0.5,), n_samples or 50_000, R=rank or 1)
    if name == "gaussian":
        if rank not in (None, 1):
            raise SuiteUsageError("the Gaussian product suite requires rank 1")
        n = n_samples or 100_000
        x1, x2 = _with_separation(rng.split("x"), 8, 1.0)
        y1, y2 = _with_separation(rng.split("y"), 8, 0.5)
        return [
            check_gaussian_product(rng.split("separated"), 8, 8, 8, 8, 1.0, 1.0, x1, x2, y1, y2, n),
            check_gaussian_product(rng.split("identical"), 8, 8, 8, 8, 1.0, 1.0, x1, x1, y1, y1, n),
        ]
    if name == "variance":
        x1, x2 = _with_separation(rng.split("x"), 16, 1.0)
        y1, y2 = _with_separation(rng.split("y"), 16, 0.5)
        case = GaussianCase(16, 16, 4, 4, x1, x2, y1, y2)
        return [check_variance_structure(rng, case, n_samples or 100_000, compare_dims=(8, 8))]
    # simplified
    R = rank or 4
    quad = _random_unit_quad(rng.split("inputs"), 16, 16)
    return [check_simplified_gaussian(rng, 16, 16, 8, 8, R, 1.0, 1.0, *quad, n_samples or 100_000)]


def write_reports(path, reports) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
