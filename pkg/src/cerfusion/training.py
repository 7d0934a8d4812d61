"""Supervised training: cross-entropy, Adam, linear warmup, epoch loop, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_pretrained, save_module
from .data import DatasetManifest, ImageBatch, Preprocess, augment, make_batches
from .errors import ConfigError, NumericError
from .evaluation import evaluate
from .fusion import CERClassifier, classifier_from_metadata

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "val_acc", "val_f1", "lr")
BEST_CHECKPOINT = "best.npz"
LAST_CHECKPOINT = "last.npz"
HISTORY_FILE = "history.csv"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    base_lr: float = 5e-5
    warmup_steps: int | None = None  # None: warmup_frac of all steps
    warmup_frac: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    seed: int = 0
    freeze_encoders: bool = True
    flip_prob: float = 0.5
    num_workers: int = 0
    preprocess: Preprocess = Preprocess()

    def validate(self) -> "TrainConfig":
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.base_lr > 0:
            problems.append("base_lr must be > 0")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            problems.append("warmup_steps must be >= 0")
        if not 0 <= self.warmup_frac <= 1:
            problems.append("warmup_frac must be in [0, 1]")
        if not 0 <= self.flip_prob <= 1:
            problems.append("flip_prob must be in [0, 1]")
        if problems:
            raise ConfigError(problems)
        return self

    def resolved(self, steps_per_epoch: int) -> "TrainConfig":
        if self.warmup_steps is not None:
            return self
        return replace(self, warmup_steps=int(round(self.warmup_frac * self.epochs * steps_per_epoch)))


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, then constant."""
    warmup = cfg.warmup_steps or 0
    if step < warmup:
        return cfg.base_lr * step / warmup
    return cfg.base_lr


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[label]``, via log-softmax for stability."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    return F.nll_loss(F.log_softmax(logits, dim=-1), labels)


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def make_optimizer(model: CERClassifier, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.trainable_parameters(), lr=cfg.base_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    current_lr: float = 0.0
    running_loss: float = float("nan")
    best_val_f1: float = float("-inf")
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)
    batch_losses: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def start(cls, model: CERClassifier, cfg: TrainConfig) -> "TrainState":
        return cls(rng=np.random.default_rng(cfg.seed), optimizer=make_optimizer(model, cfg))


def train_epoch(model: CERClassifier, data: Iterable[ImageBatch], cfg: TrainConfig, state: TrainState) -> TrainState:
    """One pass over *data*; one Adam step per batch at ``lr_schedule(step)``."""
    if state.optimizer is None:
        state.optimizer = make_optimizer(model, cfg)
    params = model.trainable_parameters()
    model.train()
    total, count = 0.0, 0
    for i, batch in enumerate(data):
        if cfg.flip_prob > 0:
            batch = augment(batch, state.rng, cfg.flip_prob)
        lr = lr_schedule(cfg, state.step)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        logits = model(batch.pixels)
        loss = cross_entropy(logits, batch.labels)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at batch {i}: loss={loss.item()}, lr={lr}, step={state.step}")
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        state.optimizer.step()
        state.step += 1
        state.current_lr = lr
        value = loss.item()
        state.batch_losses.append(value)
        total += value * len(batch)
        count += len(batch)
    state.epoch += 1
    state.running_loss = total / count if count else float("nan")
    return state


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    history: list[dict]
    state: TrainState


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}}
            for r in csv.DictReader(fh)
        ]


def fit(
    model: CERClassifier,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir,
    progress: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs, keeping the best-val-macro-F1 and last checkpoints."""
    cfg.validate()
    if model.head.num_classes != train_manifest.label_space.size:
        raise ConfigError(
            f"model has {model.head.num_classes} classes, training taxonomy has {train_manifest.label_space.size}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps_per_epoch = math.ceil(len(train_manifest) / cfg.batch_size)
    cfg = cfg.resolved(steps_per_epoch)
    model.set_frozen(cfg.freeze_encoders)
    state = TrainState.start(model, cfg)
    history: list[dict] = []
    best_path, last_path = out / BEST_CHECKPOINT, out / LAST_CHECKPOINT
    base_meta = {**model.metadata(), "preprocess": _preprocess_dict(cfg.preprocess), "seed": cfg.seed}

    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(
            train_manifest, cfg.batch_size, shuffle=True, seed=cfg.seed + epoch,
            preprocess=cfg.preprocess, num_workers=cfg.num_workers,
        )
        train_epoch(model, batches, cfg, state)
        report = evaluate(model, val_manifest, cfg.batch_size, cfg.preprocess, cfg.num_workers)
        row = {
            "epoch": epoch,
            "loss": state.running_loss,
            "val_acc": report.accuracy,
            "val_f1": report.macro_f1,
            "lr": state.current_lr,
        }
        history.append(row)
        meta = {**base_meta, "epoch": epoch, "val_acc": report.accuracy, "val_f1": report.macro_f1}
        if report.macro_f1 > state.best_val_f1:
            state.best_val_f1 = report.macro_f1
            save_module(best_path, model, meta)
        save_module(last_path, model, meta)
        _write_history(out / HISTORY_FILE, history)
        log.info("epoch %d loss %.6f val_acc %.2f val_f1 %.2f lr %.3g", epoch, row["loss"], row["val_acc"], row["val_f1"], row["lr"])
        if progress is not None:
            progress(row)
    return FitResult(best_path, last_path, history, state)


def _preprocess_dict(p: Preprocess) -> dict:
    return {"image_size": p.image_size, "mean": list(p.mean), "std": list(p.std)}


def preprocess_from_metadata(meta: dict) -> Preprocess:
    p = meta.get("preprocess")
    if not p:
        return Preprocess()
    return Preprocess(int(p["image_size"]), tuple(p["mean"]), tuple(p["std"]))


def load_classifier(path) -> tuple[CERClassifier, dict]:
    """Rebuild a classifier from checkpoint metadata and load its weights strictly."""
    _, meta = load_checkpoint(path)
    model = classifier_from_metadata(meta)
    load_pretrained(model, path, strict=True)
    model.eval()
    return model, meta
