"""Losses, Adam, the training loop and the checkpoint format."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import patch_pairs
from .model import ModelConfig, SAFNet
from .tensor import Tensor, backward, clip, log, relu, sqrt, tmean, tsum

log_ = logging.getLogger(__name__)

MAGIC = b"SAFN"
VERSION = 1


@dataclass
class TrainConfig:
    lam: float = 0.5
    margin: float = 1.0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    r: int = 13
    nt: float = 0.04

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch normalization)")
        if self.r < 3 or self.r % 2 == 0:
            raise ValueError(f"patch size r must be odd and >= 3, got {self.r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# losses ---------------------------------------------------------------------

def contrastive_loss(feat0: Tensor, feat1: Tensor, y, margin: float = 1.0) -> Tensor:
    """Batch mean of D^2 (y = 0) or max(0, margin - D)^2 (y = 1), D the Euclidean distance."""
    y = np.asarray(y, dtype=feat0.dtype).ravel()
    if y.shape[0] != feat0.shape[0]:
        raise ValueError("label count does not match batch size")
    diff = feat0 - feat1
    d2 = tsum(diff * diff, axis=1)
    hinge = relu(margin - sqrt(d2))
    per = d2 * (1.0 - y) + (hinge * hinge) * y
    return tmean(per)


def classification_loss(probs: Tensor, y_true, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy on the change probability (column 1)."""
    y_true = np.asarray(y_true, dtype=probs.dtype).ravel()
    p = clip(probs[:, 1], eps, 1.0 - eps)
    q = clip(probs[:, 0], eps, 1.0 - eps)
    return -tmean(log(p) * y_true + log(q) * (1.0 - y_true))


def total_loss(l1: Tensor, l2: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l1 + l2 * lam


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Parameters without a grad are skipped."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# training loop --------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    l1: float
    l2: float
    loss: float
    accuracy: float


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train_on_patches(x1: np.ndarray, x2: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                     model_cfg: ModelConfig | None = None, dtype=np.float32,
                     model: SAFNet | None = None, callback=None) -> tuple[SAFNet, list[EpochLog]]:
    """Train on ready-made (n, 1, 28, 28) patch batches with binary labels."""
    labels = np.asarray(labels).astype(np.int64)
    if len(labels) < 2:
        raise ValueError("need at least two training samples")
    if model is None:
        model = SAFNet(model_cfg or ModelConfig(seed=cfg.seed), dtype=dtype)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        s1 = s2 = sl = 0.0
        correct = 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            y = labels[idx]
            out = model.forward(x1[idx], x2[idx], training=True)
            l1 = classification_loss(out.probs, y)
            l2 = contrastive_loss(out.feat0, out.feat1, y, cfg.margin)
            loss = total_loss(l1, l2, cfg.lam)
            model.zero_grad()
            backward(loss)
            adam_step(model.params, state, cfg.lr, cfg.betas, cfg.adam_eps)
            k = len(idx)
            s1 += l1.item() * k
            s2 += l2.item() * k
            sl += loss.item() * k
            correct += int(((out.probs.data[:, 1] > out.probs.data[:, 0]) == (y == 1)).sum())
        n = len(labels)
        rec = EpochLog(epoch, s1 / n, s2 / n, sl / n, correct / n)
        history.append(rec)
        log_.info("epoch %d  L1 %.5f  L2 %.5f  L %.5f  acc %.4f", *asdict(rec).values())
        if callback is not None:
            callback(rec)
    model.zero_grad()
    return model, history


def train(i1: np.ndarray, i2: np.ndarray, samples: np.ndarray, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None, callback=None) -> tuple[SAFNet, list[EpochLog]]:
    """Train a network on pseudo-labelled pixels ``samples`` = (row, col, label) rows."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ValueError("no training samples")
    x1, x2 = patch_pairs(i1, i2, samples[:, 0], samples[:, 1], cfg.r)
    return train_on_patches(x1, x2, samples[:, 2], cfg, model_cfg, callback=callback)


def write_loss_log(history: list[EpochLog], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch\tL1\tL2\tL\taccuracy\n")
        for h in history:
            fh.write(f"{h.epoch}\t{h.l1:.8f}\t{h.l2:.8f}\t{h.loss:.8f}\t{h.accuracy:.6f}\n")


# checkpoints ----------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SAFNet, train_cfg: TrainConfig, path) -> None:
    """"SAFN", version byte, u32 header length, JSON header, float32 LE payload."""
    arrays = model.state_arrays()
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"model_config": model.config.to_dict(), "train_config": train_cfg.to_dict(), "tensors": manifest},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {raw[4]}")
    (hlen,) = struct.unpack("<I", raw[5:9])
    try:
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable JSON header ({exc})") from None
    payload = raw[9 + hlen:]
    arrays = {}
    expected = 0
    for entry in header.get("tensors", []):
        name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if off != expected:
            raise CheckpointError(f"{path}: tensor {name!r} at offset {off}, expected {expected} "
                                  "(manifest gap or overlap)")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name!r} shape {list(shape)} needs "
                                  f"{4 * int(np.prod(shape))} bytes, manifest says {nbytes}")
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} [{off}, {off + nbytes}) runs past the "
                                  f"{len(payload)}-byte payload")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
        expected = off + nbytes
    if expected != len(payload):
        raise CheckpointError(f"{path}: manifest covers {expected} bytes but payload has {len(payload)}")
    return header, arrays


def load_checkpoint(path) -> tuple[SAFNet, TrainConfig]:
    header, arrays = read_checkpoint(path)
    model = SAFNet(ModelConfig.from_dict(header["model_config"]), dtype=np.float32)
    try:
        model.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, TrainConfig.from_dict(header["train_config"])
