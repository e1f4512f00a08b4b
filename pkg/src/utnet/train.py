"""Losses, SGD with momentum, exponential schedule and the training loop."""

from __future__ import annotations

import csv
import io
import json
import math
import shutil
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import synthdata
from . import tensor as T
from .errors import ConfigError, ContractError, DataError, UTNetError
from .metrics import FOREGROUND, dice_score
from .model import UTNet, save_checkpoint
from .tensor import Tensor

DICE_EPS = 1e-5
REPORT_COLUMNS = ["epoch", "lr", "train_loss", "val_dice_LV", "val_dice_MYO", "val_dice_RV", "val_dice_mean"]


class DivergenceError(UTNetError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    lr_gamma: float = 0.98
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        for name in ("epochs", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 < self.lr_gamma < 1:
            raise ConfigError(f"lr_gamma must be in (0, 1), got {self.lr_gamma}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# losses


def _check_labels(logits: Tensor, label: np.ndarray) -> np.ndarray:
    label = np.asarray(label)
    K = logits.shape[1]
    if label.shape != logits.shape[:1] + logits.shape[2:]:
        raise DataError(f"labels {label.shape} do not match logits {logits.shape}")
    if label.size and (label.min() < 0 or label.max() >= K):
        raise DataError(f"label values must lie in [0, {K}), found {label.min()}..{label.max()}")
    return label.astype(np.int64)


def dice_loss(logits: Tensor, label: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over foreground classes of (2 sum(p g) + eps) / (sum p + sum g + eps).

    Sums run over the whole batch; ``p`` is the softmax over the class axis.
    """
    label = _check_labels(logits, label)
    K = logits.shape[1]
    axes = (0, *range(2, logits.ndim))
    onehot = np.moveaxis(np.eye(K)[label], -1, 1)
    probs = T.softmax(logits, axis=1)
    inter = T.sum_(T.mul(probs, onehot), axis=axes)
    denom = T.add(T.sum_(probs, axis=axes), onehot.sum(axis=axes) + eps)
    dice = T.div(T.add(T.mul(inter, 2.0), eps), denom)
    fg = T.take(dice, np.arange(1, K), axis=0)
    return T.sub(1.0, T.mean(fg))


def combined_loss(logits: Tensor, label: np.ndarray) -> Tensor:
    """Dice loss plus cross-entropy with unit weights."""
    label = _check_labels(logits, label)
    return T.add(dice_loss(logits, label), T.cross_entropy_with_logits(logits, label))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()})


def sgd_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
) -> None:
    """v <- momentum v + g + weight_decay theta; theta <- theta - lr v (in place)."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        v = state.velocity[name]
        if v.shape != p.data.shape:
            raise ContractError(f"velocity for {name!r} has shape {v.shape}, parameter {p.data.shape}")
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data = p.data - lr * v
    state.step += 1


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * cfg.lr_gamma**epoch


# --------------------------------------------------------------------------
# loop


def predict_logits(model: UTNet, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return model.forward(Tensor(images), training=False).data


def _permutation(n: int, seed: int) -> np.ndarray:
    return np.argsort(synthdata.SplitMix64(seed).uniform(n), kind="stable")


def _batches(samples, cfg: TrainConfig, epoch: int):
    order = _permutation(len(samples), synthdata.mix_seed(cfg.seed, epoch))
    for i in range(0, len(order), cfg.batch_size):
        chunk = [samples[j] for j in order[i : i + cfg.batch_size]]
        if cfg.augment:
            chunk = [synthdata.augment(s, synthdata.mix_seed(cfg.seed, epoch, s.seed)) for s in chunk]
        yield np.stack([s.image for s in chunk]), np.stack([s.label for s in chunk])


def validation_dice(model: UTNet, samples, batch_size: int = 8) -> dict[int, float]:
    scores = {c: [] for c in FOREGROUND}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        preds = predict_logits(model, np.stack([s.image for s in chunk])).argmax(axis=1)
        for s, p in zip(chunk, preds):
            for c in FOREGROUND:
                scores[c].append(dice_score(p, s.label, c))
    return {c: float(np.mean(v)) for c, v in scores.items()}


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_val_dice: float
    report_path: Path | None
    seconds: float


def _format_row(row: dict) -> dict:
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def report_csv(history: list[dict], header: dict) -> str:
    buf = io.StringIO()
    for k, v in header.items():
        buf.write(f"# {k}: {v}\n")
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow(_format_row(row))
    return buf.getvalue()


def fit(
    model: UTNet,
    manifest: dict,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log=None,
) -> FitResult:
    """Train ``model`` in place on the manifest's train split.

    Writes ``report.csv`` and ``checkpoints/`` under ``out_dir`` when given:
    one checkpoint every ``cfg.checkpoint_every`` epochs, ``best`` (highest
    mean validation Dice, or lowest loss without a validation split) and
    ``last``. Wall-clock times go to ``timing.json`` so the report itself is
    reproducible byte for byte.
    """
    size = manifest["size"]
    if size % model.multiple:
        raise ConfigError(f"manifest size {size} is not a multiple of {model.multiple}")
    train = synthdata.load_split(manifest, "train")
    if not train:
        raise ConfigError("manifest has no training entries")
    val = synthdata.load_split(manifest, "val")
    out = Path(out_dir) if out_dir is not None else None
    state = OptimizerState.zeros_like(model.params)
    history: list[dict] = []
    best = (-math.inf, -1)
    start = time.perf_counter()
    epoch_seconds = []
    header = {
        "model": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "train": json.dumps(cfg.to_dict(), sort_keys=True),
        "batch_size": cfg.batch_size,
        "params": model.census()["total"],
        "n_train": len(train),
        "n_val": len(val),
        "image_size": size,
    }

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        losses = []
        for step, (images, labels) in enumerate(_batches(train, cfg, epoch)):
            model.zero_grad()
            with T.new_graph():
                loss = combined_loss(model.forward(Tensor(images), training=True), labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch} step {step}")
                T.backward(loss)
            sgd_step(model.params, state, lr, cfg.momentum, cfg.weight_decay)
            losses.append(value)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        if val:
            vd = validation_dice(model, val, cfg.batch_size)
            row.update({f"val_dice_{synthdata.CLASS_NAMES[c]}": vd[c] for c in FOREGROUND})
            row["val_dice_mean"] = float(np.mean(list(vd.values())))
            score = row["val_dice_mean"]
        else:
            row.update({k: "" for k in REPORT_COLUMNS[3:]})
            score = -row["train_loss"]
        history.append(row)
        epoch_seconds.append(time.perf_counter() - t0)
        if log:
            log(f"epoch {epoch:3d} lr {lr:.5f} loss {row['train_loss']:.4f} val {row['val_dice_mean']}")
        if out is not None:
            ck = out / "checkpoints"
            if score > best[0]:
                if (ck / "best").exists():
                    shutil.rmtree(ck / "best")
                save_checkpoint(model, ck / "best", epoch, lr, {"val_score": score})
            if (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, ck / f"epoch_{epoch + 1:03d}", epoch, lr)
            (out / "report.csv").write_text(report_csv(history, header))
        if score > best[0]:
            best = (score, epoch)

    seconds = time.perf_counter() - start
    if out is not None:
        save_checkpoint(model, out / "checkpoints" / "last", cfg.epochs - 1, lr_at(cfg.epochs - 1, cfg))
        (out / "timing.json").write_text(json.dumps({"seconds": seconds, "epoch_seconds": epoch_seconds}, indent=1) + "\n")
    return FitResult(history, best[1], best[0], out / "report.csv" if out else None, seconds)
