"""Geometric-semantic matching: refine an initial change mask into an
object-complete, semantically validated final mask.

Tracker-derived inconsistent masks are retained when their overlap ratio
with the initial prediction exceeds ``alpha_t`` (spatial completeness);
open-vocabulary segmenter masks are retained above ``alpha_g`` (semantic
relevance). The final mask is the union of retained instances, which
drops initial pixels no instance vouches for.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .masks import (
    ChangeClass,
    ChangeMask,
    MaskInstance,
    as_binary_grid,
    mask_from_instances,
    overlap_ratio,
    union_masks,
)


@dataclass(frozen=True)
class MatchConfig:
    """Retention thresholds for the two matching stages."""

    alpha_t: float = 0.20
    alpha_g: float = 0.10
    strict_inequality: bool = True

    def __post_init__(self) -> None:
        for name in ("alpha_t", "alpha_g"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class ProvenanceEntry:
    instance_id: str
    source: str
    alpha: float
    retained: bool
    phrase: str | None = None

    def to_json(self) -> dict:
        out = {
            "instance_id": self.instance_id,
            "source": self.source,
            "alpha": self.alpha,
            "retained": self.retained,
        }
        if self.phrase is not None:
            out["phrase"] = self.phrase
        return out


@dataclass(frozen=True)
class RefineResult:
    mask: np.ndarray
    provenance: tuple[ProvenanceEntry, ...]
    no_evidence: bool


def _retain(
    candidates: Sequence[MaskInstance],
    initial: np.ndarray,
    threshold: float,
    strict: bool,
) -> list[MaskInstance]:
    initial = as_binary_grid(initial)
    kept = []
    for m in candidates:
        if m.area == 0:
            warnings.warn("skipping empty candidate mask", stacklevel=3)
            continue
        alpha = overlap_ratio(m, initial)
        if (alpha > threshold) if strict else (alpha >= threshold):
            kept.append(m)
    return kept


def geometric_match(
    inconsistent: Sequence[MaskInstance], initial: np.ndarray, cfg: MatchConfig
) -> list[MaskInstance]:
    """Retain tracker-derived masks whose overlap ratio exceeds alpha_t."""
    return _retain(inconsistent, initial, cfg.alpha_t, cfg.strict_inequality)


def semantic_match(
    semantic: Sequence[MaskInstance], initial: np.ndarray, cfg: MatchConfig
) -> list[MaskInstance]:
    """Retain segmenter-derived masks whose overlap ratio exceeds alpha_g."""
    return _retain(semantic, initial, cfg.alpha_g, cfg.strict_inequality)


def _entry(inst: MaskInstance, idx: int, prefix: str, initial: np.ndarray, retained: bool) -> ProvenanceEntry:
    alpha = overlap_ratio(inst, initial) if inst.area else 0.0
    return ProvenanceEntry(
        instance_id=inst.instance_id or f"{prefix}-{idx:03d}",
        source=inst.source,
        alpha=alpha,
        retained=retained,
        phrase=inst.phrase,
    )


def refine(
    initial: np.ndarray,
    geo_retained: Sequence[MaskInstance],
    sem_retained: Sequence[MaskInstance],
    keep_initial: bool = False,
) -> RefineResult:
    """Compose the final binary mask from already-retained instances.

    The default drops initial pixels not covered by any retained instance;
    ``keep_initial`` unions the initial prediction back in (ablation path).
    """
    initial = as_binary_grid(initial)
    shape = initial.shape
    final = union_masks(list(geo_retained), shape) | union_masks(list(sem_retained), shape)
    if keep_initial:
        final = final | initial
    prov = tuple(
        _entry(m, i, "geo", initial, True) for i, m in enumerate(geo_retained)
    ) + tuple(
        _entry(m, i, "sem", initial, True) for i, m in enumerate(sem_retained)
    )
    no_evidence = not (geo_retained or sem_retained)
    final = final.copy()
    final.setflags(write=False)
    return RefineResult(mask=final, provenance=prov, no_evidence=no_evidence)


def match_and_refine(
    initial: np.ndarray,
    geo_candidates: Sequence[MaskInstance],
    sem_candidates: Sequence[MaskInstance],
    cfg: MatchConfig,
    keep_initial: bool = False,
) -> RefineResult:
    """Run both retention stages and compose the final mask.

    Provenance covers every candidate, retained or dropped.
    """
    initial = as_binary_grid(initial)
    geo_kept = geometric_match(geo_candidates, initial, cfg)
    sem_kept = semantic_match(sem_candidates, initial, cfg)
    result = refine(initial, geo_kept, sem_kept, keep_initial=keep_initial)
    geo_ids = {id(m) for m in geo_kept}
    sem_ids = {id(m) for m in sem_kept}
    prov = tuple(
        _entry(m, i, "geo", initial, id(m) in geo_ids)
        for i, m in enumerate(geo_candidates)
        if m.area
    ) + tuple(
        _entry(m, i, "sem", initial, id(m) in sem_ids)
        for i, m in enumerate(sem_candidates)
        if m.area
    )
    return RefineResult(mask=result.mask, provenance=prov, no_evidence=result.no_evidence)


def refine_multiclass(
    initial: ChangeMask,
    per_class_retained: Mapping[int, Sequence[MaskInstance]],
    class3_passthrough: bool = False,
) -> ChangeMask:
    """Rasterize per-class retained sets into a 4-class mask.

    Overlapping pixels resolve with fixed priority 1 > 2 > 3; class 0
    elsewhere. With ``class3_passthrough`` the initial prediction's
    not-in-view pixels survive at the lowest priority (used at inference
    when no common-view mask is available to re-derive them).
    """
    instances: list[MaskInstance] = []
    for code, insts in per_class_retained.items():
        if code not in (1, 2, 3):
            raise ConfigError(f"retained sets keyed by change class 1..3, got {code}")
        for m in insts:
            instances.append(m if m.change_class == code else m.with_class(code))
    passthrough = None
    if class3_passthrough:
        passthrough = np.asarray(initial.labels) == int(ChangeClass.NOT_IN_VIEW)
    shape = (initial.height, initial.width)
    return mask_from_instances(instances, shape, class3_passthrough=passthrough)
