import itertools
import json
import math

import numpy as np
import pytest

from rpbilinear.kernel_verify import (
    GaussianCase,
    KernelReport,
    SuiteUsageError,
    check_concentration,
    check_exhaustive,
    check_gaussian_product,
    check_simplified_gaussian,
    check_variance_structure,
    estimate_linear_kernel,
    exhaustive_rademacher_expectation,
    gaussian_product_target,
    run_suite,
    write_reports,
)
from rpbilinear.linalg import Rng


def _pure_python_expectation(D, M, N, R, x1, x2, y1, y2):
    """Enumerate every sign pattern with plain loops (no library code)."""
    nE, nF = R * M * D, R * N * D
    c = 1.0 / (R * math.sqrt(M * N))
    total = 0.0
    count = 0
    for signs in itertools.product((-1.0, 1.0), repeat=nE + nF):
        E = [[[signs[(r * M + i) * D + d] for d in range(D)] for i in range(M)] for r in range(R)]
        F = [[[signs[nE + (r * N + j) * D + d] for d in range(D)] for j in range(N)] for r in range(R)]

        def pooled(x, y):
            z = []
            for j in range(N):
                for i in range(M):
                    s = 0.0
                    for r in range(R):
                        ex = sum(E[r][i][d] * x[d] for d in range(D))
                        fy = sum(F[r][j][d] * y[d] for d in range(D))
                        s += ex * fy
                    z.append(c * s)
            return z

        z1, z2 = pooled(x1, y1), pooled(x2, y2)
        total += R * sum(a * b for a, b in zip(z1, z2))
        count += 1
    return total / count


@pytest.mark.parametrize("R,M,N", [(1, 1, 1), (2, 1, 1), (1, 2, 1)])
def test_exhaustive_matches_pure_python_enumeration(R, M, N):
    x1, x2, y1, y2 = (1.0, 2.0), (-3.0, 0.5), (0.25, -1.0), (2.0, 4.0)
    mean, _, count = exhaustive_rademacher_expectation(2, 2, M, N, R, x1, x2, y1, y2)
    assert count == 2 ** (R * (M + N) * 2)
    assert abs(mean - _pure_python_expectation(2, M, N, R, x1, x2, y1, y2)) <= 1e-12
    assert abs(mean - 7.0) <= 1e-12


def test_check_exhaustive_report():
    rep = check_exhaustive((1, 0), (0.6, 0.8), (1, 0), (1, 0))
    assert rep.passed and rep.mode == "exact" and rep.n_samples == 16
    assert abs(rep.empirical_mean - 0.6) <= 1e-12


def test_exhaustive_limit():
    with pytest.raises(ValueError):
        exhaustive_rademacher_expectation(4, 4, 2, 2, 2, *(np.ones(4),) * 4)


def test_estimate_linear_kernel_examples():
    e = np.eye(4)
    rep = estimate_linear_kernel(Rng(1), 4, 4, 3, 3, 2, e[0], e[1], e[0], e[2], 20_000)
    assert rep.target == 0.0 and rep.passed
    rep = estimate_linear_kernel(Rng(2), 2, 2, 3, 3, 1, (1, 0), (0.6, 0.8), (1, 0), (1, 0), 20_000)
    assert abs(rep.target - 0.6) < 1e-15 and rep.passed
    assert rep.std_error == pytest.approx(math.sqrt(rep.empirical_var / rep.n_samples))


def test_estimate_requires_samples():
    with pytest.raises(ValueError):
        estimate_linear_kernel(Rng(0), 2, 2, 1, 1, 1, (1, 0), (1, 0), (1, 0), (1, 0), 10)


def test_concentration_degenerate_zero_variance():
    reps = check_concentration(Rng(3), 1, ((1, 1), (1, 1)), (0.5,), 2000,
                               inputs=((1.0,), (1.0,), (1.0,), (1.0,)))
    assert reps[0].empirical_var == 0.0 and reps[0].empirical_mean == 1.0


def test_concentration_shape():
    reps = check_concentration(Rng(4), 16, n_samples=20_000)
    ratio = reps[-1]
    assert ratio.test_name == "concentration_ratio" and ratio.mode == "upper"
    assert ratio.passed and ratio.empirical_mean <= 0.5
    tails = ratio.extra["tail_freq_first_eps"]
    assert tails[1] < tails[0]


def test_concentration_needs_two_settings():
    with pytest.raises(ValueError):
        check_concentration(Rng(0), 4, ((2, 2),), n_samples=2000)


def test_gaussian_target_values():
    x1, x2 = np.zeros(8), np.eye(8)[0]
    y1, y2 = np.zeros(8), 0.5 * np.eye(8)[1]
    assert gaussian_product_target(x1, x2, y1, y2, 1.0, 1.0) == pytest.approx(math.exp(-0.5 - 0.125), abs=1e-15)
    assert abs(math.exp(-0.625) - 0.53526) < 1e-5


def test_gaussian_identical_inputs_exactly_one():
    x, y = Rng(5).normal((2, 8))
    rep = check_gaussian_product(Rng(6), 8, 8, 8, 8, 1.0, 1.0, x, x, y, y, 5000)
    assert rep.target == 1.0 and rep.passed
    assert abs(rep.extra["min_sample"] - 1.0) <= 1e-12 and abs(rep.extra["max_sample"] - 1.0) <= 1e-12


def test_gaussian_product_small_run():
    x1 = Rng(7).normal(8)
    x2 = x1 + np.eye(8)[3]
    y1 = Rng(8).normal(8)
    y2 = y1 + 0.5 * np.eye(8)[5]
    rep = check_gaussian_product(Rng(9), 8, 8, 8, 8, 1.0, 1.0, x1, x2, y1, y2, 20_000)
    assert rep.passed


def test_gaussian_wide_bandwidth_limit():
    x1 = np.zeros(8)
    x2 = np.eye(8)[0]
    rep = check_gaussian_product(Rng(10), 8, 8, 8, 8, 1e3, 1e3, x1, x2, x1, x2, 20_000)
    assert rep.target == pytest.approx(math.exp(-1e-6), rel=1e-15)
    assert abs(rep.target - 0.999999) < 1e-6
    assert rep.passed


def test_gaussian_rejects_rank():
    with pytest.raises(SuiteUsageError):
        check_gaussian_product(Rng(0), 4, 4, 2, 2, 1.0, 1.0, *np.eye(4)[:4], 1000, R=2)


def test_variance_identical_inputs():
    x, y = Rng(11).normal((2, 8))
    case = GaussianCase(8, 8, 4, 4, x, x, y, y)
    rep = check_variance_structure(Rng(12), case, 2000)
    assert rep.extra["var_U"] < 1e-28 and rep.extra["var_V"] < 1e-28
    assert rep.empirical_mean < 1e-28 and rep.passed


def test_variance_decreases_with_dims():
    x1 = Rng(13).normal(32)
    x2 = x1 + 0.2 * Rng(14).normal(32)
    y1 = Rng(15).normal(32)
    y2 = y1 + 0.2 * Rng(16).normal(32)
    case = GaussianCase(32, 32, 8, 8, x1, x2, y1, y2)
    rep = check_variance_structure(Rng(17), case, 10_000, compare_dims=(32, 32))
    assert rep.extra["var_k_larger"] < rep.empirical_mean
    assert rep.passed


def test_simplified_examples():
    e = np.eye(8)
    rep = check_simplified_gaussian(Rng(18), 8, 8, 4, 4, 2, 1.0, 1.0, e[0], e[1], e[2], e[2], 10_000)
    assert rep.target == 0.0 and rep.passed
    u = np.ones(8) / math.sqrt(8)
    rep = check_simplified_gaussian(Rng(19), 8, 8, 4, 4, 2, 1.0, 1.0, u, u, u, u, 20_000)
    assert rep.target == pytest.approx(1.0) and rep.passed
    rep2 = check_simplified_gaussian(Rng(19), 8, 8, 4, 4, 2, 2.0, 1.0, u, u, u, u, 20_000)
    assert rep2.passed
    assert rep2.empirical_mean == pytest.approx(rep.empirical_mean, rel=1e-12)


def test_report_serialization(tmp_path):
    rep = KernelReport("t", 1.0, 1.0, 0.0, 10, 0.0, math.inf, False, 3)
    d = rep.to_dict()
    assert d["pass"] is False and d["z_score"] == "inf"
    path = tmp_path / "r.jsonl"
    write_reports(path, [rep, rep])
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    loaded = json.loads(lines[0])
    assert set(loaded) >= {"test_name", "target", "empirical_mean", "empirical_var", "n_samples",
                           "std_error", "z_score", "pass", "seed"}


def test_suite_determinism_and_threads(monkeypatch):
    a = run_suite("rademacher", seed=3, n_samples=25_000, rank=2)
    monkeypatch.setenv("BRP_THREADS", "3")
    b = run_suite("rademacher", seed=3, n_samples=25_000, rank=2)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_suite_usage_errors():
    with pytest.raises(SuiteUsageError):
        run_suite("gaussian", rank=2)
    with pytest.raises(SuiteUsageError):
        run_suite("nope")
