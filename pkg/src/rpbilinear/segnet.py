"""Single-stage dilated temporal convolution network with a bilinear head.

Pipeline for a ``T x D_in`` feature sequence::

    1x1 conv D_in -> H
    L x [ x + pointwise(ReLU(dilated_conv3(x, dilation=2**l))) ]
    head

The bilinear head pools every frame with itself, ``z_t = pool(h_t, h_t)``,
applies a temporal convolution (kernel 25 by default) to the class
logits and then inverted dropout. The baseline head is a 1x1 conv.

Everything is float64 numpy with hand-written backward passes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bilinear import (
    BilinearConfig,
    Variant,
    backward_full,
    backward_hadamard,
    backward_rp,
    build_stack,
    forward_full,
    forward_hadamard,
    forward_rp,
)
from .dataio import FeatureSequence
from .linalg import Rng
from .metrics import SegmentLabeling, segments_from_frames
from .projections import ProjectionKind, ProjectionStack

__all__ = [
    "HEADS",
    "NetConfig",
    "TrainConfig",
    "Model",
    "Adam",
    "TrainingDivergedError",
    "conv1d_forward",
    "conv1d_backward",
    "dilated_conv1d_forward",
    "residual_block_forward",
    "residual_block_backward",
    "bilinear_head_forward",
    "softmax",
    "cross_entropy",
    "train_step",
    "fit",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

HEADS = ("baseline", "rpbinary", "rpgaussian", "rpgaussianfull", "learnable", "hadamard")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the single stage.

    ``rows`` is M = N of the pooling projections (default ``hidden // 2``).
    """

    D_in: int
    n_classes: int
    hidden: int = 32
    layers: int = 6
    head: str = "rpgaussian"
    rank: int = 4
    rows: int | None = None
    head_kernel: int = 25
    dropout: float = 0.25
    bandwidth_init: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.layers < 1 or self.hidden < 2:
            raise ValueError("need layers >= 1 and hidden >= 2")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ValueError("head_kernel must be a positive odd number")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def M(self) -> int:
        return self.rows if self.rows is not None else self.hidden // 2

    @property
    def bilinear(self) -> BilinearConfig | None:
        if self.head in ("baseline", "hadamard"):
            return None
        return BilinearConfig(Variant(self.head), self.rank, self.M, self.M, self.hidden, self.hidden)

    @property
    def pooled_dim(self) -> int:
        if self.head == "baseline":
            return self.hidden
        if self.head == "rpgaussianfull":
            return 4 * self.M * self.M
        return self.M * self.M


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------- convolution

def _shift(X: np.ndarray, off: int) -> np.ndarray:
    """``Y[t] = X[t + off]``, zero outside ``[0, T)``."""
    T = X.shape[0]
    Y = np.zeros_like(X)
    if abs(off) >= T:
        return Y
    if off >= 0:
        Y[: T - off] = X[off:]
    else:
        Y[-off:] = X[: T + off]
    return Y


def conv1d_forward(w: np.ndarray, b: np.ndarray, X: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Same-length acausal convolution.

    ``w`` has shape ``(K, C_out, C_in)`` with odd ``K``; tap ``k`` reads frame
    ``t + (k - K//2) * dilation``.
    """
    K, C_out, C_in = w.shape
    if K % 2 == 0:
        raise ValueError("kernel size must be odd")
    if X.ndim != 2 or X.shape[1] != C_in:
        raise ValueError(f"input must be T x {C_in}, got {X.shape}")
    if b.shape != (C_out,):
        raise ValueError(f"bias must have shape ({C_out},)")
    out = np.tile(b, (X.shape[0], 1))
    for k in range(K):
        off = (k - K // 2) * dilation
        if abs(off) < X.shape[0]:
            out += _shift(X, off) @ w[k].T
    return out


def conv1d_backward(w: np.ndarray, X: np.ndarray, dY: np.ndarray, dilation: int = 1):
    """Returns ``(dX, dw, db)``."""
    K = w.shape[0]
    dX = np.zeros_like(X)
    dw = np.zeros_like(w)
    for k in range(K):
        off = (k - K // 2) * dilation
        if abs(off) >= X.shape[0]:
            continue
        dX += _shift(dY @ w[k], -off)
        dw[k] = dY.T @ _shift(X, off)
    return dX, dw, dY.sum(axis=0)


def dilated_conv1d_forward(w, b, X, dilation: int) -> np.ndarray:
    """Kernel-3 dilated convolution used inside the residual blocks."""
    if np.asarray(w).shape[0] != 3:
        raise ValueError("residual convolutions use kernel size 3")
    return conv1d_forward(np.asarray(w), np.asarray(b), np.asarray(X, dtype=np.float64), dilation)


def residual_block_forward(p: dict, X: np.ndarray, dilation: int):
    """``X + pointwise(ReLU(dilated_conv(X)))``; returns ``(out, cache)``."""
    h = dilated_conv1d_forward(p["conv.w"], p["conv.b"], X, dilation)
    a = np.maximum(h, 0.0)
    out = X + a @ p["pw.w"].T + p["pw.b"]
    return out, (X, h, a)


def residual_block_backward(p: dict, cache, d_out: np.ndarray, dilation: int):
    X, h, a = cache
    grads = {"pw.w": d_out.T @ a, "pw.b": d_out.sum(axis=0)}
    d_h = (d_out @ p["pw.w"]) * (h > 0)
    dX, grads["conv.w"], grads["conv.b"] = conv1d_backward(p["conv.w"], X, d_h, dilation)
    return dX + d_out, grads


# ---------------------------------------------------------------- loss

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean frame-wise cross-entropy and its gradient w.r.t. the logits."""
    T = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -float(logp[np.arange(T), labels].mean())
    d = np.exp(logp)
    d[np.arange(T), labels] -= 1.0
    return loss, d / T


# ---------------------------------------------------------------- model

def _uniform(rng: Rng, bound: float, shape) -> np.ndarray:
    return (rng.uniform(shape) * 2.0 - 1.0) * bound


@dataclass
class Model:
    """Parameters (a flat name -> array dict) plus the set of frozen names."""

    cfg: NetConfig
    params: dict
    frozen: set = field(default_factory=set)

    @classmethod
    def init(cls, cfg: NetConfig, seed: int = 0) -> "Model":
        rng = Rng(seed).split("init")
        H, C = cfg.hidden, cfg.n_classes
        p: dict[str, np.ndarray] = {}
        bound = 1.0 / math.sqrt(cfg.D_in)
        p["in.w"] = _uniform(rng.split("in.w"), bound, (H, cfg.D_in))
        p["in.b"] = _uniform(rng.split("in.b"), bound, (H,))
        for l in range(cfg.layers):
            r = rng.split(f"layer{l}")
            p[f"layer{l}.conv.w"] = _uniform(r.split("cw"), 1.0 / math.sqrt(3 * H), (3, H, H))
            p[f"layer{l}.conv.b"] = _uniform(r.split("cb"), 1.0 / math.sqrt(3 * H), (H,))
            p[f"layer{l}.pw.w"] = _uniform(r.split("pw"), 1.0 / math.sqrt(H), (H, H))
            p[f"layer{l}.pw.b"] = _uniform(r.split("pb"), 1.0 / math.sqrt(H), (H,))
        frozen: set[str] = set()
        if cfg.head == "baseline":
            p["out.w"] = _uniform(rng.split("out.w"), 1.0 / math.sqrt(H), (C, H))
            p["out.b"] = _uniform(rng.split("out.b"), 1.0 / math.sqrt(H), (C,))
            return cls(cfg, p, frozen)
        P = cfg.pooled_dim
        if cfg.head == "hadamard":
            p["pool.U"] = rng.split("U").normal((P, H)) / math.sqrt(H)
            p["pool.V"] = rng.split("V").normal((P, H)) / math.sqrt(H)
        else:
            stack = build_stack(rng.split("pool"), cfg.bilinear, cfg.bandwidth_init, cfg.bandwidth_init)
            p["pool.E"], p["pool.F"] = stack.base_E, stack.base_F
            p["pool.sigma"], p["pool.rho"] = stack.sigma, stack.rho
            if not stack.trainable:
                frozen |= {"pool.E", "pool.F"}
            if not stack.learn_bandwidth:
                frozen |= {"pool.sigma", "pool.rho"}
        fan_in = cfg.head_kernel * P
        p["head.w"] = _uniform(rng.split("head.w"), 1.0 / math.sqrt(fan_in), (cfg.head_kernel, C, P))
        p["head.b"] = _uniform(rng.split("head.b"), 1.0 / math.sqrt(fan_in), (C,))
        return cls(cfg, p, frozen)

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def n_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable_names if trainable_only else list(self.params)
        return sum(self.params[n].size for n in names)

    def stack(self) -> ProjectionStack:
        kind = self.cfg.bilinear.projection_kind
        return ProjectionStack(
            kind, self.params["pool.E"], self.params["pool.F"],
            self.params["pool.sigma"], self.params["pool.rho"],
            trainable=kind is ProjectionKind.LEARNABLE,
            learn_bandwidth=kind in (ProjectionKind.ORTH_GAUSSIAN_FULL, ProjectionKind.ORTH_GAUSSIAN_SIMPLIFIED),
        )

    def _block(self, l: int) -> dict:
        pre = f"layer{l}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # forward / backward --------------------------------------------------

    def forward(self, X: np.ndarray, train: bool = False, rng: Rng | None = None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.cfg.D_in:
            raise ValueError(f"features must be T x {self.cfg.D_in}, got {X.shape}")
        p = self.params
        h = X @ p["in.w"].T + p["in.b"]
        caches = []
        for l in range(self.cfg.layers):
            h, c = residual_block_forward(self._block(l), h, 2 ** l)
            caches.append(c)
        if self.cfg.head == "baseline":
            logits = h @ p["out.w"].T + p["out.b"]
            return logits, {"X": X, "blocks": caches, "h": h}
        logits, head_cache = bilinear_head_forward(self, h, train, rng)
        return logits, {"X": X, "blocks": caches, "h": h, "head": head_cache}

    def backward(self, cache: dict, d_logits: np.ndarray) -> dict:
        p, cfg = self.params, self.cfg
        grads: dict[str, np.ndarray] = {}
        h = cache["h"]
        if cfg.head == "baseline":
            grads["out.w"] = d_logits.T @ h
            grads["out.b"] = d_logits.sum(axis=0)
            d_h = d_logits @ p["out.w"]
        else:
            d_h = _bilinear_head_backward(self, h, cache["head"], d_logits, grads)
        for l in reversed(range(cfg.layers)):
            d_h, g = residual_block_backward(self._block(l), cache["blocks"][l], d_h, 2 ** l)
            for k, v in g.items():
                grads[f"layer{l}.{k}"] = v
        grads["in.w"] = d_h.T @ cache["X"]
        grads["in.b"] = d_h.sum(axis=0)
        return {n: grads[n] for n in self.trainable_names}

    def loss_and_grads(self, X, labels, train: bool = True, rng: Rng | None = None):
        logits, cache = self.forward(X, train, rng)
        loss, d_logits = cross_entropy(logits, np.asarray(labels))
        return loss, self.backward(cache, d_logits)


def _pool(model: Model, h: np.ndarray) -> np.ndarray:
    p, head = model.params, model.cfg.head
    if head == "hadamard":
        return forward_hadamard(p["pool.U"], p["pool.V"], None, h, h)
    bcfg = model.cfg.bilinear
    if head == "rpgaussianfull":
        return forward_full(model.stack(), bcfg, h, h)
    return forward_rp(model.stack(), bcfg, h, h)


def bilinear_head_forward(model: Model, h: np.ndarray, train: bool = False, rng: Rng | None = None):
    """Per-frame self pooling, temporal conv to class logits, inverted dropout.

    No activation or normalization follows the pooling. Dropout is active
    only when ``train`` is set and ``model.cfg.dropout > 0``.
    """
    z = _pool(model, h)
    logits = conv1d_forward(model.params["head.w"], model.params["head.b"], z)
    mask = None
    rate = model.cfg.dropout
    if train and rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an Rng")
        mask = rng.bernoulli_mask(1.0 - rate, logits.shape) / (1.0 - rate)
        logits = logits * mask
    return logits, {"z": z, "mask": mask}


def _bilinear_head_backward(model: Model, h, head_cache, d_logits, grads) -> np.ndarray:
    p, head = model.params, model.cfg.head
    if head_cache["mask"] is not None:
        d_logits = d_logits * head_cache["mask"]
    d_z, grads["head.w"], grads["head.b"] = conv1d_backward(p["head.w"], head_cache["z"], d_logits)
    if head == "hadamard":
        g = backward_hadamard(p["pool.U"], p["pool.V"], None, h, h, d_z)
        grads["pool.U"], grads["pool.V"] = g.d_U, g.d_V
        return g.d_x + g.d_y
    stack, bcfg = model.stack(), model.cfg.bilinear
    g = (backward_full if head == "rpgaussianfull" else backward_rp)(stack, bcfg, h, h, d_z)
    if g.d_E is not None:
        grads["pool.E"], grads["pool.F"] = g.d_E, g.d_F
    if g.d_sigma is not None:
        grads["pool.sigma"], grads["pool.rho"] = g.d_sigma, g.d_rho
    return g.d_x + g.d_y


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, params: dict, names, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in names}
        self.v = {n: np.zeros_like(params[n]) for n in names}

    def step(self, params: dict, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        lr_t = c.learning_rate * math.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for n, g in grads.items():
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            params[n] = params[n] - lr_t * self.m[n] / (np.sqrt(self.v[n]) + c.eps)
        # bandwidths must stay positive
        for n in ("pool.sigma", "pool.rho"):
            if n in grads:
                params[n] = np.maximum(params[n], 1e-6)


def train_step(model: Model, opt: Adam, seq: FeatureSequence, rng: Rng | None = None) -> float:
    """One Adam update on one sequence; updates ``model.params`` in place and returns the loss."""
    labels = np.asarray(seq.labels)
    if labels.min() < 0 or labels.max() >= model.cfg.n_classes:
        raise ValueError(f"labels must lie in [0, {model.cfg.n_classes})")
    loss, grads = model.loss_and_grads(seq.features, labels, train=True, rng=rng)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDivergedError(f"non-finite loss or gradient on sequence {seq.id!r} (loss={loss})")
    opt.step(model.params, grads)
    return loss


def predict(model: Model, features) -> SegmentLabeling:
    """Frame-wise argmax of the eval-mode logits (lowest class id wins ties)."""
    logits, _ = model.forward(features, train=False)
    return segments_from_frames(np.argmax(logits, axis=1))


def _accuracy(model: Model, seqs) -> float:
    hits = total = 0
    for s in seqs:
        pred = np.asarray(predict(model, s.features).frames)
        hits += int(np.sum(pred == s.labels))
        total += s.T
    return 100.0 * hits / total if total else float("nan")


def fit(model: Model, train: list[FeatureSequence], tcfg: TrainConfig,
        val: list[FeatureSequence] | None = None, log=None) -> list[dict]:
    """Train for ``tcfg.epochs`` epochs, one Adam step per sequence.

    Sequence order is reshuffled every epoch from the seed. Returns one row
    per epoch with ``epoch, loss, train_acc, val_acc``; ``log`` (if given)
    is called with each row.
    """
    opt = Adam(model.params, model.trainable_names, tcfg)
    root = Rng(tcfg.seed).split("train")
    rows = []
    for epoch in range(1, tcfg.epochs + 1):
        erng = root.split(f"epoch{epoch}")
        order = erng.gen.permutation(len(train))
        losses = [train_step(model, opt, train[i], erng.split(f"step{i}")) for i in order]
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": _accuracy(model, train),
            "val_acc": _accuracy(model, val) if val else float("nan"),
        }
        rows.append(row)
        if log is not None:
            log(row)
    return rows


# ---------------------------------------------------------------- checkpoints
#
# b"BRPC" | u32 version | u32 header length | UTF-8 JSON header
# (config, frozen names, ordered [name, shape] manifest) | little-endian f64
# tensors in manifest order.

_CKPT_MAGIC = b"BRPC"
_CKPT_VERSION = 1


def save_checkpoint(path, model: Model) -> None:
    manifest = [[n, list(a.shape)] for n, a in model.params.items()]
    header = json.dumps({"config": asdict(model.cfg), "frozen": sorted(model.frozen),
                         "tensors": manifest}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n, _ in manifest)
    Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(header)) + header + body)


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode())
    off = 12 + hlen
    params = {}
    for name, shape in header["tensors"]:
        n = math.prod(shape)
        if off + 8 * n > len(blob):
            raise ValueError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after tensors")
    return Model(NetConfig(**header["config"]), params, set(header["frozen"]))
