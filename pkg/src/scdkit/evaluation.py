"""Metrics, threshold sweeps, and latency profiling.

Pixel metrics are computed from pooled confusion counts (micro over the
whole split) by default; a per-image average is available behind a flag.
F1 and IoU come from the same counts, so the identity
``iou == f1 / (2 - f1)`` holds for every class by construction.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .masks import ChangeMask
from .matching import (
    MatchConfig,
    MaskInstance,
    geometric_match,
    match_and_refine,
    semantic_match,
)


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class true-positive / false-positive / false-negative tallies."""

    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]

    def __post_init__(self) -> None:
        k = len(self.tp)
        if len(self.fp) != k or len(self.fn) != k:
            raise ShapeError("tp/fp/fn must have equal length")
        if any(v < 0 for part in (self.tp, self.fp, self.fn) for v in part):
            raise ConfigError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot add counts with different class counts")
        return ConfusionCounts(
            tp=tuple(a + b for a, b in zip(self.tp, other.tp)),
            fp=tuple(a + b for a, b in zip(self.fp, other.fp)),
            fn=tuple(a + b for a, b in zip(self.fn, other.fn)),
        )

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = (0,) * num_classes
        return cls(tp=z, fp=z, fn=z)


def confusion(pred: ChangeMask, gt: ChangeMask) -> ConfusionCounts:
    """Tally per-class TP/FP/FN between a prediction and ground truth."""
    if pred.num_classes != gt.num_classes:
        raise ShapeError(
            f"class count mismatch: {pred.num_classes} vs {gt.num_classes}"
        )
    p = np.asarray(pred.labels)
    g = np.asarray(gt.labels)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {g.shape}")
    k = pred.num_classes
    # Full K x K matrix in one pass; marginals give fp/fn.
    joint = np.bincount(
        (g.astype(np.int64).ravel() * k + p.astype(np.int64).ravel()),
        minlength=k * k,
    ).reshape(k, k)
    diag = np.diag(joint)
    fp = joint.sum(axis=0) - diag
    fn = joint.sum(axis=1) - diag
    return ConfusionCounts(
        tp=tuple(int(v) for v in diag),
        fp=tuple(int(v) for v in fp),
        fn=tuple(int(v) for v in fn),
    )


def f1_iou(counts: ConfusionCounts, class_code: int) -> tuple[float, float]:
    """Single-class F1 and IoU from pooled counts.

    A class absent from both prediction and ground truth has no defined
    score; both values come back 0.0 (callers can test vacuity with
    :func:`is_vacuous` before averaging).
    """
    tp, fp, fn = counts.tp[class_code], counts.fp[class_code], counts.fn[class_code]
    denom_f1 = 2 * tp + fp + fn
    denom_iou = tp + fp + fn
    f1 = (2 * tp) / denom_f1 if denom_f1 else 0.0
    iou = tp / denom_iou if denom_iou else 0.0
    return f1, iou


def is_vacuous(counts: ConfusionCounts, class_code: int) -> bool:
    """True when the class appears in neither prediction nor ground truth."""
    return (
        counts.tp[class_code] == 0
        and counts.fp[class_code] == 0
        and counts.fn[class_code] == 0
    )


def precision_recall(counts: ConfusionCounts, class_code: int) -> tuple[float, float]:
    tp, fp, fn = counts.tp[class_code], counts.fp[class_code], counts.fn[class_code]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


@dataclass(frozen=True)
class MacroMetrics:
    macro_f1: float
    miou: float
    per_class_f1: tuple[float, ...]
    per_class_iou: tuple[float, ...]
    excluded_classes: tuple[int, ...] = ()


def macro(counts: ConfusionCounts) -> MacroMetrics:
    """Unweighted class average of F1 and IoU over non-vacuous classes.

    Classes absent from the entire evaluation (vacuous in the pooled
    counts) are left out of the average and reported in
    ``excluded_classes`` rather than dragging it toward zero.
    """
    k = counts.num_classes
    scored = [c for c in range(k) if not is_vacuous(counts, c)]
    excluded = tuple(c for c in range(k) if c not in scored)
    if not scored:
        raise ConfigError("all classes vacuous; nothing to average")
    pairs = [f1_iou(counts, c) for c in range(k)]
    per_f1 = tuple(p[0] for p in pairs)
    per_iou = tuple(p[1] for p in pairs)
    return MacroMetrics(
        macro_f1=mean_score([per_f1[c] for c in scored]),
        miou=mean_score([per_iou[c] for c in scored]),
        per_class_f1=per_f1,
        per_class_iou=per_iou,
        excluded_classes=excluded,
    )


def mean_score(values: Sequence[float]) -> float:
    """Plain unweighted mean, the aggregation behind every macro number."""
    if not values:
        raise ConfigError("cannot average an empty score list")
    return sum(values) / len(values)


def iou_from_f1(f1: float) -> float:
    """Set-theoretic companion score: IoU expressed through F1."""
    if not 0.0 <= f1 <= 1.0:
        raise ConfigError(f"f1 must be in [0, 1], got {f1}")
    return f1 / (2.0 - f1)


def evaluate_split(
    pairs: Iterable[tuple[ChangeMask, ChangeMask]],
    per_image_average: bool = False,
) -> MacroMetrics:
    """Score (prediction, ground-truth) pairs for a whole split.

    Default pools pixels across images before scoring; the flag averages
    per-image macro scores instead (less stable on rare classes, kept for
    comparison against per-image reporting conventions).
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    if not per_image_average:
        total = ConfusionCounts.zeros(pairs[0][0].num_classes)
        for pred, gt in pairs:
            total = total + confusion(pred, gt)
        return macro(total)
    per_image = [macro(confusion(pred, gt)) for pred, gt in pairs]
    k = pairs[0][0].num_classes
    return MacroMetrics(
        macro_f1=mean_score([m.macro_f1 for m in per_image]),
        miou=mean_score([m.miou for m in per_image]),
        per_class_f1=tuple(
            mean_score([m.per_class_f1[c] for m in per_image]) for c in range(k)
        ),
        per_class_iou=tuple(
            mean_score([m.per_class_iou[c] for m in per_image]) for c in range(k)
        ),
    )


# ---------------------------------------------------------------------------
# Threshold sweeps


@dataclass(frozen=True)
class SweepRecord:
    """One validation pair's inputs to the matching stage."""

    initial: np.ndarray
    geo_candidates: tuple[MaskInstance, ...]
    sem_candidates: tuple[MaskInstance, ...]
    gt: np.ndarray


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    matched_ratio: float
    precision: float
    recall: float
    f1: float
    iou: float


SWEEP_STAGES = ("geometric", "semantic")


def sweep(
    records: Sequence[SweepRecord],
    stage: str,
    grid: Sequence[float],
    fixed_other: float,
    keep_initial: bool = False,
) -> list[SweepRow]:
    """Score the matching stage across a grid of retention thresholds.

    One stage's threshold varies while the other stays at ``fixed_other``;
    rows come back sorted by threshold ascending. ``matched_ratio`` is the
    fraction of the swept stage's candidates retained, pooled over records.
    """
    if stage not in SWEEP_STAGES:
        raise ConfigError(f"stage must be one of {SWEEP_STAGES}, got {stage!r}")
    if not records:
        raise ConfigError("sweep needs at least one record")
    if not grid:
        raise ConfigError("sweep needs a non-empty threshold grid")
    rows = []
    for threshold in sorted(grid):
        if stage == "geometric":
            cfg = MatchConfig(alpha_t=threshold, alpha_g=fixed_other)
        else:
            cfg = MatchConfig(alpha_t=fixed_other, alpha_g=threshold)
        tp = fp = fn = 0
        retained = candidates = 0
        for rec in records:
            result = match_and_refine(
                rec.initial,
                list(rec.geo_candidates),
                list(rec.sem_candidates),
                cfg,
                keep_initial=keep_initial,
            )
            gt = rec.gt.astype(bool)
            pred = result.mask
            tp += int(np.count_nonzero(pred & gt))
            fp += int(np.count_nonzero(pred & ~gt))
            fn += int(np.count_nonzero(~pred & gt))
            if stage == "geometric":
                swept = [m for m in rec.geo_candidates if m.area]
                kept = geometric_match(swept, rec.initial, cfg)
            else:
                swept = [m for m in rec.sem_candidates if m.area]
                kept = semantic_match(swept, rec.initial, cfg)
            candidates += len(swept)
            retained += len(kept)
        counts = ConfusionCounts(tp=(tp,), fp=(fp,), fn=(fn,))
        f1, iou = f1_iou(counts, 0)
        precision, recall = precision_recall(counts, 0)
        rows.append(
            SweepRow(
                threshold=float(threshold),
                matched_ratio=retained / candidates if candidates else 0.0,
                precision=precision,
                recall=recall,
                f1=f1,
                iou=iou,
            )
        )
    return rows


def sweep_to_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "matched_ratio", "precision", "recall", "f1", "iou"])
        for r in rows:
            writer.writerow(
                [r.threshold, r.matched_ratio, r.precision, r.recall, r.f1, r.iou]
            )


def format_sweep_table(rows: Sequence[SweepRow]) -> str:
    header = ("thresh", "ratio", "prec", "recall", "f1", "iou")
    lines = ["  ".join(f"{h:>7}" for h in header)]
    for r in rows:
        lines.append(
            "  ".join(
                f"{v:7.3f}"
                for v in (r.threshold, r.matched_ratio, r.precision, r.recall, r.f1, r.iou)
            )
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Latency profiling


@dataclass(frozen=True)
class LatencyReport:
    per_stage: Mapping[str, tuple[float, float]]
    total: tuple[float, float]
    num_pairs: int


def profile_latency(
    stages: Mapping[str, Callable[[object], object]],
    pairs: Sequence[object],
    clock: Callable[[], float] = time.perf_counter,
) -> LatencyReport:
    """Wall-clock each stage per pair; report mean and sample std.

    Stages run in declaration order and each stage's output feeds the
    next, mirroring the production path. Needs at least two pairs for a
    standard deviation.
    """
    if len(pairs) < 2:
        raise ConfigError("latency profiling needs at least two pairs")
    per_stage: dict[str, list[float]] = {name: [] for name in stages}
    totals: list[float] = []
    for pair in pairs:
        value: object = pair
        pair_total = 0.0
        for name, fn in stages.items():
            start = clock()
            value = fn(value)
            elapsed = clock() - start
            per_stage[name].append(elapsed)
            pair_total += elapsed
        totals.append(pair_total)
    summary = {
        name: (statistics.mean(ts), statistics.stdev(ts))
        for name, ts in per_stage.items()
    }
    return LatencyReport(
        per_stage=summary,
        total=(statistics.mean(totals), statistics.stdev(totals)),
        num_pairs=len(pairs),
    )


def format_latency_table(report: LatencyReport) -> str:
    width = max(len("total"), *(len(n) for n in report.per_stage))
    lines = [f"{'stage':<{width}}  mean (s)  std (s)"]
    for name, (mean, std) in report.per_stage.items():
        lines.append(f"{name:<{width}}  {mean:8.3f}  {std:7.3f}")
    mean, std = report.total
    lines.append(f"{'total':<{width}}  {mean:8.3f}  {std:7.3f}")
    return "\n".join(lines)
