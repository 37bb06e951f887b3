"""Synthetic frame-feature sequences, the BRPF file format and fold splits.

BRPF layout (all little-endian)::

    b"BRPF" | u32 version=1 | u32 T | u32 D | u32 n_classes
    T*D float64 features (row-major) | T uint32 labels
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import Rng, haar_orthogonal

__all__ = [
    "FeatureSequence",
    "SynthConfig",
    "gen_synthetic",
    "BrpfError",
    "MalformedHeaderError",
    "TruncatedFileError",
    "UnsupportedVersionError",
    "write_features",
    "read_features",
    "write_labels_text",
    "read_labels_text",
    "make_folds",
]

MAGIC = b"BRPF"
VERSION = 1
_HEADER = struct.Struct("<4s4I")


@dataclass
class FeatureSequence:
    features: np.ndarray  # (T, D) float64
    labels: np.ndarray  # (T,) int
    id: str = ""
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a T x D matrix")
        T = self.features.shape[0]
        if T < 1:
            raise ValueError("a sequence needs at least one frame")
        if self.labels.shape != (T,):
            raise ValueError(f"expected {T} labels, got shape {self.labels.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SynthConfig:
    """Sticky-Markov label chains with Gaussian emissions.

    Class means are the vertices of a scaled simplex (scaled basis vectors,
    then randomly rotated) with pairwise distance ``separation * noise_std``.
    Lower ``separation`` makes classes more confusable.
    """

    n_classes: int = 5
    D: int = 32
    T_range: tuple[int, int] = (450, 550)
    seed: int = 0
    stickiness: float = 0.98
    noise_std: float = 1.0
    separation: float = 2.0 * math.sqrt(2.0)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.D < self.n_classes:
            raise ValueError("feature dimension must be at least n_classes")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid T_range {self.T_range}")
        if not 0.0 < self.stickiness < 1.0:
            raise ValueError("stickiness must lie in (0, 1)")
        if self.noise_std < 0 or self.separation <= 0:
            raise ValueError("noise_std must be >= 0 and separation > 0")


def class_means(cfg: SynthConfig) -> np.ndarray:
    rng = Rng(cfg.seed).split("means")
    scale = cfg.separation * (cfg.noise_std if cfg.noise_std > 0 else 1.0) / math.sqrt(2.0)
    means = np.zeros((cfg.n_classes, cfg.D))
    means[:, : cfg.n_classes] = scale * np.eye(cfg.n_classes)
    return means @ haar_orthogonal(rng, cfg.D).T


def gen_synthetic(cfg: SynthConfig, n_sequences: int) -> list[FeatureSequence]:
    cfg.validate()
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    means = class_means(cfg)
    root = Rng(cfg.seed).split("sequences")
    out = []
    for i in range(n_sequences):
        rng = root.split(i)
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        stay = rng.uniform(T) < cfg.stickiness
        jumps = rng.integers(1, cfg.n_classes, size=T)
        labels = np.empty(T, dtype=np.int64)
        labels[0] = rng.integers(0, cfg.n_classes)
        for t in range(1, T):
            # uniform over the other classes: shift by 1..n_classes-1
            labels[t] = labels[t - 1] if stay[t] else (labels[t - 1] + jumps[t]) % cfg.n_classes
        feats = means[labels] + cfg.noise_std * rng.normal((T, cfg.D))
        out.append(FeatureSequence(feats, labels, f"seq{i:04d}", cfg.n_classes))
    return out


class BrpfError(ValueError):
    """Base class for BRPF decoding failures."""


class MalformedHeaderError(BrpfError):
    pass


class TruncatedFileError(BrpfError):
    pass


class UnsupportedVersionError(BrpfError):
    pass


def write_features(path, seq: FeatureSequence) -> None:
    header = _HEADER.pack(MAGIC, VERSION, seq.T, seq.D, seq.n_classes)
    body = np.ascontiguousarray(seq.features, dtype="<f8").tobytes()
    labels = np.ascontiguousarray(seq.labels, dtype="<u4").tobytes()
    Path(path).write_bytes(header + body + labels)


def read_features(path) -> FeatureSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the BRPF header")
    magic, version, T, D, n_classes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: BRPF version {version} is not supported")
    if T == 0:
        raise MalformedHeaderError(f"{path}: sequence has zero frames")
    if D == 0 or n_classes == 0:
        raise MalformedHeaderError(f"{path}: zero feature dimension or class count")
    expected = _HEADER.size + 8 * T * D + 4 * T
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise MalformedHeaderError(f"{path}: {len(blob) - expected} trailing bytes after payload")
    feats = np.frombuffer(blob, dtype="<f8", count=T * D, offset=_HEADER.size).reshape(T, D)
    labels = np.frombuffer(blob, dtype="<u4", count=T, offset=_HEADER.size + 8 * T * D)
    try:
        return FeatureSequence(feats.astype(np.float64), labels.astype(np.int64), path.stem, n_classes)
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc


def write_labels_text(path, labels, class_names=None) -> None:
    """One class name per line; names default to the integer id."""
    names = class_names or {}
    lines = [str(names[int(l)]) if int(l) in names else str(int(l)) for l in labels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels_text(path, class_names=None) -> np.ndarray:
    lookup = {v: k for k, v in (class_names or {}).items()}
    rows = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return np.array([lookup[r] if r in lookup else int(r) for r in rows], dtype=np.int64)


def make_folds(sequences, k: int) -> list[tuple[list[str], list[str]]]:
    """Fold ``f`` tests on the sequences whose index is congruent to ``f`` modulo ``k``."""
    ids = [s.id if isinstance(s, FeatureSequence) else str(s) for s in sequences]
    if not 2 <= k <= len(ids):
        raise ValueError(f"need 2 <= k <= {len(ids)}, got k={k}")
    folds = []
    for f in range(k):
        test = [sid for i, sid in enumerate(ids) if i % k == f]
        train = [sid for i, sid in enumerate(ids) if i % k != f]
        folds.append((train, test))
    return folds
