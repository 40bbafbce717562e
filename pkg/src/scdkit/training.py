"""Training driver: cosine schedule with warm-up, joint flip augmentation,
frozen-encoder bookkeeping, best-checkpoint selection, and a metric trace.

Batches are assembled by gradient accumulation over single-sample
forwards, which sidesteps caption-length padding while keeping the
effective samples-per-step equal to the configured batch size.
"""

from __future__ import annotations

import csv
import math
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import (
    ChangeDetector,
    DEFAULT_BINARY_WEIGHTS,
    image_to_tensor,
    mask_to_target,
    weighted_pixel_cross_entropy,
)
from .enhancer import TextEncoderAdapter
from .errors import ConfigError, NumericalError
from .evaluation import ConfusionCounts, confusion, f1_iou, macro
from .masks import ChangeMask


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 4
    mixed_precision: bool = False
    hflip_prob: float = 0.5
    class_weights: tuple[float, ...] | None = None
    seed: int = 0
    warmup_frac: float = 0.05

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip_prob must be in [0, 1]")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ConfigError("class weights must be positive")


@dataclass(frozen=True)
class TrainSample:
    image_t0: np.ndarray
    image_t1: np.ndarray
    mask: ChangeMask
    phrases: tuple[str, ...] = ()


@dataclass(frozen=True)
class TraceRow:
    step: int
    lr: float
    loss: float
    val_f1: float
    val_iou: float


@dataclass(frozen=True)
class TrainResult:
    best_checkpoint: Path
    trace: tuple[TraceRow, ...]
    best_val_f1: float
    encoder_fingerprint_before: str
    encoder_fingerprint_after: str


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warm-up to base_lr, then cosine decay to zero."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    warmup = max(1, int(round(warmup_frac * total_steps))) if warmup_frac > 0 else 0
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def resolve_class_weights(
    config: TrainConfig,
    num_classes: int,
    train_masks: Sequence[ChangeMask] | None = None,
) -> tuple[float, ...]:
    """Explicit weights win; otherwise the fixed binary defaults for K=2,
    and inverse pixel frequency over the training split for K=4."""
    if config.class_weights is not None:
        if len(config.class_weights) != num_classes:
            raise ConfigError(
                f"{len(config.class_weights)} weights for {num_classes} classes"
            )
        return config.class_weights
    if num_classes == 2:
        return DEFAULT_BINARY_WEIGHTS
    if not train_masks:
        raise ConfigError(
            "4-class weights default to inverse frequency; pass the training "
            "masks or set class_weights explicitly"
        )
    return inverse_frequency_weights(train_masks, num_classes)


def inverse_frequency_weights(
    masks: Sequence[ChangeMask], num_classes: int
) -> tuple[float, ...]:
    """Per-class weights proportional to inverse pixel frequency, mean 1."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for mask in masks:
        labels = np.asarray(mask.labels)
        counts += np.bincount(labels.ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ConfigError("no pixels to derive weights from")
    freq = counts / total
    # A class absent from the split gets the weight of the rarest present one.
    present = freq > 0
    inv = np.zeros(num_classes)
    inv[present] = 1.0 / freq[present]
    if not present.all():
        inv[~present] = inv[present].max() if present.any() else 1.0
    inv = inv / inv.mean()
    return tuple(float(w) for w in inv)


def _flip_sample(sample: TrainSample) -> TrainSample:
    return TrainSample(
        image_t0=np.ascontiguousarray(sample.image_t0[:, ::-1]),
        image_t1=np.ascontiguousarray(sample.image_t1[:, ::-1]),
        mask=ChangeMask(
            np.ascontiguousarray(np.asarray(sample.mask.labels)[:, ::-1]),
            num_classes=sample.mask.num_classes,
        ),
        phrases=sample.phrases,
    )


def _sample_loss(
    model: ChangeDetector,
    sample: TrainSample,
    weights: Sequence[float],
    text_encoder: TextEncoderAdapter | None,
    autocast: bool,
) -> torch.Tensor:
    img0 = image_to_tensor(sample.image_t0)
    img1 = image_to_tensor(sample.image_t1)
    target = mask_to_target(sample.mask)
    if autocast:
        with torch.autocast("cpu", dtype=torch.bfloat16):
            logits = model(img0, img1, phrases=sample.phrases, text_encoder=text_encoder)
        logits = logits.float()
    else:
        logits = model(img0, img1, phrases=sample.phrases, text_encoder=text_encoder)
    return weighted_pixel_cross_entropy(logits, target, weights)


def evaluate_detector(
    model: ChangeDetector,
    samples: Sequence[TrainSample],
    text_encoder: TextEncoderAdapter | None = None,
) -> tuple[float, float]:
    """Pooled (F1, IoU) over samples: change-class F1 for binary heads,
    macro scores for the 4-class head."""
    if not samples:
        raise ConfigError("no samples to evaluate")
    k = model.spec.num_classes
    total = ConfusionCounts.zeros(k)
    model.eval()
    with torch.no_grad():
        for sample in samples:
            logits = model(
                image_to_tensor(sample.image_t0),
                image_to_tensor(sample.image_t1),
                phrases=sample.phrases,
                text_encoder=text_encoder,
            )
            pred = ChangeMask(
                logits.argmax(dim=1)[0].to(torch.uint8).numpy(), num_classes=k
            )
            total = total + confusion(pred, sample.mask)
    model.train()
    if k == 2:
        return f1_iou(total, 1)
    m = macro(total)
    return m.macro_f1, m.miou


def _atomic_save(model: ChangeDetector, path: Path, extra_header: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    model.save(tmp, extra_header=extra_header)
    os.replace(tmp, path)


def train(
    train_samples: Sequence[TrainSample],
    val_samples: Sequence[TrainSample],
    model: ChangeDetector,
    config: TrainConfig,
    out_dir,
    text_encoder: TextEncoderAdapter | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Optimize enhancer + merge + head; encoder stays frozen throughout.

    One optimizer step consumes ``batch_size`` samples via gradient
    accumulation. Checkpoints the best validation score; a non-finite
    loss aborts with the last good parameters saved next to the best.
    """
    if not train_samples:
        raise ConfigError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = resolve_class_weights(
        config, model.spec.num_classes, [s.mask for s in train_samples]
    )
    fingerprint_before = model.encoder_fingerprint()
    if isinstance(model.encoder, torch.nn.Module):
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    trainable = [p for p in model.trainable_parameters() if p.requires_grad]
    if not trainable:
        raise ConfigError("nothing to train")
    optimizer = torch.optim.Adam(trainable, lr=config.lr)
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)

    best_path = out_dir / "best.ckpt"
    best_f1 = -1.0
    trace: list[TraceRow] = []
    step = 0
    epoch_losses: list[float] = []
    model.train()
    done = False
    for _epoch in range(config.epochs):
        if done:
            break
        order = list(range(len(train_samples)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            lr = lr_at(step, total_steps, config.lr, config.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            batch_loss = 0.0
            for sample in batch:
                if config.hflip_prob and rng.random() < config.hflip_prob:
                    sample = _flip_sample(sample)
                try:
                    loss = _sample_loss(
                        model, sample, weights, text_encoder, config.mixed_precision
                    )
                    if not torch.isfinite(loss):
                        raise NumericalError(f"non-finite loss at step {step}")
                except NumericalError as exc:
                    # parameters have not been stepped since the last good
                    # update, so the current state is the rescue point
                    rescue = out_dir / "last_good.ckpt"
                    _atomic_save(model, rescue, {"aborted_at_step": step})
                    raise NumericalError(
                        f"{exc}; last good parameters saved to {rescue}"
                    ) from exc
                (loss / len(batch)).backward()
                batch_loss += loss.item() / len(batch)
            optimizer.step()
            epoch_losses.append(batch_loss)
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        val_f1, val_iou = evaluate_detector(model, val_samples, text_encoder)
        trace.append(
            TraceRow(
                step=step,
                lr=lr,
                loss=sum(epoch_losses) / len(epoch_losses),
                val_f1=val_f1,
                val_iou=val_iou,
            )
        )
        epoch_losses = []
        if val_f1 > best_f1:
            best_f1 = val_f1
            _atomic_save(model, best_path, {"val_f1": val_f1, "step": step})
    fingerprint_after = model.encoder_fingerprint()
    return TrainResult(
        best_checkpoint=best_path,
        trace=tuple(trace),
        best_val_f1=best_f1,
        encoder_fingerprint_before=fingerprint_before,
        encoder_fingerprint_after=fingerprint_after,
    )


def train_detector(
    train_samples: Sequence[TrainSample],
    val_samples: Sequence[TrainSample],
    spec,
    config: TrainConfig,
    out_dir,
    enhancer=None,
    encoder: object | None = None,
    text_encoder: TextEncoderAdapter | None = None,
    max_steps: int | None = None,
) -> tuple[ChangeDetector, TrainResult]:
    """Build a detector from its spec and run the training loop on it."""
    model = ChangeDetector(spec, enhancer=enhancer, encoder=encoder, seed=config.seed)
    result = train(
        train_samples,
        val_samples,
        model,
        config,
        out_dir,
        text_encoder=text_encoder,
        max_steps=max_steps,
    )
    return model, result


def trace_to_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "val_f1", "val_iou"])
        for row in trace:
            writer.writerow([row.step, row.lr, row.loss, row.val_f1, row.val_iou])
