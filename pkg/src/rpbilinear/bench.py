"""Micro-benchmark of low-rank outer-product pooling against the Hadamard baseline."""
from __future__ import annotations

import math
import os
import statistics
import time

import numpy as np

from .bilinear import BilinearConfig, Variant, flops_hadamard, flops_rp, forward_hadamard, forward_rp
from .linalg import Rng, count_flops
from .projections import build_rademacher

__all__ = ["pin_single_cpu", "split_rows", "measure", "bench_grid", "summarize"]

DEFAULT_GRID = (256, 1024, 4096, 16384)


def pin_single_cpu() -> bool:
    """Restrict this process to one CPU where the platform supports it."""
    if not hasattr(os, "sched_setaffinity"):
        return False
    try:
        cpu = min(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpu})
        return True
    except OSError:
        return False


def split_rows(d: int) -> tuple[int, int]:
    """``M, N`` with ``M * N >= d`` and both close to ``sqrt(d)``; exact for perfect squares."""
    M = max(1, math.isqrt(d))
    N = -(-d // M)
    return M, N


def _median_ns(fn, reps: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples))


def measure(D: int, d: int, R: int = 1, reps: int = 100, warmup: int = 10, seed: int = 0) -> list[dict]:
    """One row per variant: instrumented flop count and median wall-clock of one forward call."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = Rng(seed).split(f"bench-{D}-{d}")
    M, N = split_rows(d)
    cfg = BilinearConfig(Variant.RPBINARY, R, M, N, D, D, normalize=True)
    stack = build_rademacher(rng.split("stack"), R, M, N, D, D)
    U = rng.split("U").normal((d, D))
    V = rng.split("V").normal((d, D))
    x = rng.split("x").normal(D)
    y = rng.split("y").normal(D)

    with count_flops() as ours:
        forward_rp(stack, cfg, x, y)
    with count_flops() as theirs:
        forward_hadamard(U, V, None, x, y)
    expected_ours = flops_rp(R, M, N, D, D, normalize=True)
    expected_theirs = flops_hadamard(d, D, D)
    if ours.flops != expected_ours or theirs.flops != expected_theirs:
        raise AssertionError(
            f"flop instrumentation disagrees with closed form: ours {ours.flops} vs {expected_ours}, "
            f"hadamard {theirs.flops} vs {expected_theirs}")
    return [
        {"variant": "rpbinary", "D": D, "d": d,
         "median_ns": _median_ns(lambda: forward_rp(stack, cfg, x, y), reps, warmup),
         "flop_count": ours.flops},
        {"variant": "hadamard", "D": D, "d": d,
         "median_ns": _median_ns(lambda: forward_hadamard(U, V, None, x, y), reps, warmup),
         "flop_count": theirs.flops},
    ]


def bench_grid(D: int = 64, grid=DEFAULT_GRID, R: int = 1, reps: int = 100, warmup: int = 10,
               rounds: int = 3, seed: int = 0) -> list[dict]:
    """Measure every ``d`` in ``grid``; ``median_ns`` is the median over ``rounds`` repeated medians."""
    rows: dict[tuple[str, int], dict] = {}
    timings: dict[tuple[str, int], list[int]] = {}
    for _ in range(max(1, rounds)):
        for d in grid:
            for row in measure(D, d, R, reps, warmup, seed):
                key = (row["variant"], d)
                rows[key] = row
                timings.setdefault(key, []).append(row["median_ns"])
    out = []
    for d in grid:
        for variant in ("rpbinary", "hadamard"):
            row = dict(rows[(variant, d)])
            row["median_ns"] = int(statistics.median(timings[(variant, d)]))
            out.append(row)
    return out


def summarize(rows: list[dict]) -> dict:
    """Per-d flop ratios and wall-clock speedups (Hadamard over ours)."""
    by = {(r["variant"], r["d"]): r for r in rows}
    ds = sorted({r["d"] for r in rows})
    flop_ratio = [by[("hadamard", d)]["flop_count"] / by[("rpbinary", d)]["flop_count"] for d in ds]
    speedup = [by[("hadamard", d)]["median_ns"] / max(by[("rpbinary", d)]["median_ns"], 1) for d in ds]
    return {
        "d": ds,
        "flop_ratio": flop_ratio,
        "speedup": speedup,
        "speedup_non_decreasing": bool(np.all(np.diff(speedup) >= 0)) if len(ds) > 1 else True,
    }
