"""Joint training of enhancer and head under the classification loss."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, read_archive
from .enhancer import EnhancerConfig, Params, init_params
from .head import cross_entropy, evaluate, init_head, model_logits, predict
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FECK"
CKPT_VERSION = 1
METRICS_HEADER = ("config", "epoch", "train_loss", "val_loss", "val_acc", "seconds")


class CheckpointError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class Optimizer:
    kind = ""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.buffers: dict[str, np.ndarray] = {}

    @staticmethod
    def _grad(name: str, p: Tensor) -> np.ndarray:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        return p.grad

    def step(self, params: Params) -> None:
        raise NotImplementedError

    def state(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "weight_decay": self.weight_decay,
                "step_count": self.step_count}


class SGD(Optimizer):
    """Heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    kind = "sgd_momentum"

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(lr, weight_decay)
        self.momentum = momentum

    def step(self, params: Params) -> None:
        grads = {name: self._grad(name, p) for name, p in params.items()}
        self.step_count += 1
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.buffers.get(f"v/{name}")
            v = g.copy() if v is None else self.momentum * v + g
            self.buffers[f"v/{name}"] = v
            p.data -= self.lr * v

    def state(self) -> dict:
        return {**super().state(), "momentum": self.momentum}


class AdamW(Optimizer):
    """Adam with decoupled weight decay and bias-corrected moments."""

    kind = "adamw"

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        super().__init__(lr, weight_decay)
        self.betas = tuple(betas)
        self.eps = eps

    def step(self, params: Params) -> None:
        grads = {name: self._grad(name, p) for name, p in params.items()}
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self.buffers.get(f"m/{name}", np.zeros_like(g))
            v = self.buffers.get(f"v/{name}", np.zeros_like(g))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.buffers[f"m/{name}"], self.buffers[f"v/{name}"] = m, v
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {**super().state(), "betas": list(self.betas), "eps": self.eps}


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0, momentum: float = 0.9) -> Optimizer:
    if kind in ("sgd", "sgd_momentum"):
        return SGD(lr, momentum, weight_decay)
    if kind == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_from_state(state: dict, buffers: dict[str, np.ndarray]) -> Optimizer:
    if state["kind"] == "sgd_momentum":
        opt: Optimizer = SGD(state["lr"], state["momentum"], state["weight_decay"])
    elif state["kind"] == "adamw":
        opt = AdamW(state["lr"], tuple(state["betas"]), state["eps"], state["weight_decay"])
    else:
        raise CheckpointError(f"unknown optimizer kind {state['kind']!r}")
    opt.step_count = state["step_count"]
    opt.buffers = {k: v.copy() for k, v in buffers.items()}
    return opt


def optimizer_step(opt: Optimizer, params: Params) -> None:
    opt.step(params)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    lr_milestones: tuple[float, ...] = (0.8,)
    seed: int = 0
    enhancer: EnhancerConfig | None = field(default_factory=EnhancerConfig)
    num_classes: int = 4
    train_path: str | None = None
    val_path: str | None = None
    label: str = "run"

    def lr_at(self, epoch: int) -> float:
        """Step decay: x0.1 at each milestone fraction of the total epochs."""
        drops = sum(1 for m in self.lr_milestones if epoch >= round(m * self.epochs))
        return self.lr * 0.1 ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["enhancer"] = None if self.enhancer is None else self.enhancer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown TrainConfig keys {sorted(set(d) - known)}")
        d = dict(d)
        if d.get("enhancer") is not None:
            d["enhancer"] = EnhancerConfig.from_dict(d["enhancer"])
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


@dataclass
class MetricsRow:
    config: str
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float

    def cells(self) -> list[str]:
        return [self.config, str(self.epoch), repr(self.train_loss), repr(self.val_loss),
                repr(self.val_acc), f"{self.seconds:.3f}"]


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    train_config: TrainConfig
    enhancer: Params | None
    head: Params
    optimizer: Optimizer
    rng_state: dict
    epoch: int
    rows: list[MetricsRow] = field(default_factory=list)
    version: int = CKPT_VERSION

    @property
    def enhancer_config(self) -> EnhancerConfig | None:
        return self.train_config.enhancer

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in (self.enhancer or {}).items()}
        out.update({f"param/{k}": p.data for k, p in self.head.items()})
        out.update({f"opt/{k}": v for k, v in self.optimizer.buffers.items()})
        return out

    def params(self) -> Params:
        return {**(self.enhancer or {}), **self.head}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    meta = {
        "format_version": ckpt.version,
        "train_config": ckpt.train_config.to_dict(),
        "enhancer_config": None if ckpt.enhancer_config is None else ckpt.enhancer_config.to_dict(),
        "optimizer": ckpt.optimizer.state(),
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "rows": [asdict(r) for r in ckpt.rows],
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values())
    payload = CKPT_MAGIC + struct.pack("<II", ckpt.version, len(header)) + header + body
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 + 32 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic or truncated)")
    payload, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (corrupt or truncated file)")
    version, hlen = struct.unpack_from("<II", payload, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(payload[12:12 + hlen])
    pos = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(payload):
        raise CheckpointError("checkpoint payload size mismatch")

    cfg = TrainConfig.from_dict(meta["train_config"])
    params = {k[len("param/"):]: Tensor(v, requires_grad=True, name=k[len("param/"):])
              for k, v in arrays.items() if k.startswith("param/")}
    head = {k: v for k, v in params.items() if k.startswith("head.")}
    enhancer = {k: v for k, v in params.items() if not k.startswith("head.")} or None
    buffers = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    return Checkpoint(
        train_config=cfg, enhancer=enhancer, head=head,
        optimizer=optimizer_from_state(meta["optimizer"], buffers),
        rng_state=meta["rng_state"], epoch=meta["epoch"],
        rows=[MetricsRow(**r) for r in meta["rows"]], version=version)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        return parse_checkpoint(Path(path).read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def initialize(cfg: TrainConfig, image_size: int) -> Checkpoint:
    init_rng = np.random.default_rng([cfg.seed, 0])
    enhancer = None if cfg.enhancer is None else init_params(cfg.enhancer, init_rng)
    head = init_head(cfg.num_classes, image_size, init_rng)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    return Checkpoint(cfg, enhancer, head, opt, shuffle_rng.bit_generator.state, epoch=0)


def _first_non_finite(params: Params) -> str:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name}"
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"gradient of {name}"
    return "loss only (all parameters and gradients finite)"


def batch_loss(images: np.ndarray, labels: np.ndarray, ckpt: Checkpoint) -> Tensor:
    logits = model_logits(Tensor(images), ckpt.head, ckpt.enhancer, ckpt.enhancer_config)
    return cross_entropy(logits, labels)


def validation_loss(ckpt: Checkpoint, ds: Dataset, batch_size: int) -> tuple[float, float]:
    logits = predict(ds.images, ckpt.head, ckpt.enhancer, ckpt.enhancer_config, batch_size)
    loss = cross_entropy(Tensor(logits), ds.labels).item()
    acc = float(np.count_nonzero(logits.argmax(axis=1) == ds.labels)) / len(ds)
    return loss, acc


def train_epoch(ckpt: Checkpoint, ds: Dataset, on_batch: Callable | None = None) -> float:
    cfg = ckpt.train_config
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    order = rng.permutation(len(ds))
    ckpt.rng_state = rng.bit_generator.state
    ckpt.optimizer.lr = cfg.lr_at(ckpt.epoch)
    params = ckpt.params()
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            loss = batch_loss(ds.images[idx], ds.labels[idx], ckpt)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss at epoch {ckpt.epoch}, batch {start // cfg.batch_size}; "
                f"first non-finite tensor: {_first_non_finite(params)}")
        tape.backward(loss)
        ckpt.optimizer.step(params)
        total += value * len(idx)
        if on_batch is not None:
            on_batch(start // cfg.batch_size, value)
    return total / len(ds)


def train(cfg: TrainConfig, train_set: Dataset | None = None, val_set: Dataset | None = None,
          out_dir: str | Path | None = None, resume: Checkpoint | str | Path | None = None,
          timing: bool = True, stop_after: int | None = None) -> Checkpoint:
    """Train for ``cfg.epochs`` epochs (or until epoch ``stop_after``).

    Writes ``metrics.csv`` and ``checkpoint.feck`` to ``out_dir`` after every
    epoch when given.  With ``timing=False`` the seconds column is written as
    zero so that the CSV is a pure function of seed, config and data.
    """
    if train_set is None:
        train_set = read_archive(cfg.train_path)
    if val_set is None:
        val_set = read_archive(cfg.val_path)
    if resume is None:
        ckpt = initialize(cfg, train_set.images.shape[-1])
    else:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.train_config.to_dict() != cfg.to_dict():
            raise ValueError("resume checkpoint was produced with a different training config")
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(ckpt.rows))

    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while ckpt.epoch < last:
        t0 = time.perf_counter()
        train_loss = train_epoch(ckpt, train_set)
        val_loss, val_acc = validation_loss(ckpt, val_set, max(cfg.batch_size, 32))
        seconds = time.perf_counter() - t0 if timing else 0.0
        ckpt.rows.append(MetricsRow(cfg.label, ckpt.epoch, train_loss, val_loss, val_acc, seconds))
        ckpt.epoch += 1
        log.info("%s epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f (%.1fs)",
                 cfg.label, ckpt.epoch - 1, train_loss, val_loss, val_acc, seconds)
        if out is not None:
            (out / "metrics.csv").write_text(metrics_csv(ckpt.rows))
            save_checkpoint(ckpt, out / "checkpoint.feck")
    if out is not None and not (out / "checkpoint.feck").exists():
        save_checkpoint(ckpt, out / "checkpoint.feck")
    return ckpt


def evaluate_checkpoint(ckpt: Checkpoint, ds: Dataset) -> float:
    return evaluate(ckpt.head, ds.images, ds.labels, ckpt.enhancer, ckpt.enhancer_config)
