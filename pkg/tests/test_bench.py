import pytest

from rpbilinear.bench import bench_grid, measure, split_rows, summarize
from rpbilinear.bilinear import flops_hadamard, flops_rp


def test_split_rows():
    assert split_rows(1) == (1, 1)
    assert split_rows(4096) == (64, 64)
    M, N = split_rows(10)
    assert M * N >= 10


def test_measure_rows():
    rows = measure(16, 64, reps=3, warmup=1)
    assert [r["variant"] for r in rows] == ["rpbinary", "hadamard"]
    assert rows[0]["flop_count"] == flops_rp(1, 8, 8, 16, 16)
    assert rows[1]["flop_count"] == flops_hadamard(64, 16, 16)
    assert all(r["median_ns"] > 0 for r in rows)


def test_degenerate_grid():
    rows = bench_grid(D=1, grid=(1,), reps=2, warmup=0, rounds=1)
    assert len(rows) == 2 and all(r["d"] == 1 for r in rows)


def test_flop_ratio_at_4096():
    rows = bench_grid(D=64, grid=(4096,), reps=1, warmup=0, rounds=1)
    s = summarize(rows)
    assert s["flop_ratio"][0] >= 10


def test_flop_counts_deterministic():
    a = [r["flop_count"] for r in bench_grid(D=8, grid=(4, 16), reps=1, warmup=0, rounds=1)]
    b = [r["flop_count"] for r in bench_grid(D=8, grid=(4, 16), reps=1, warmup=0, rounds=2)]
    assert a == b


def test_reps_validation():
    with pytest.raises(ValueError):
        measure(4, 4, reps=0)
