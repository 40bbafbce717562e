"""Canonical domain types and mask algebra shared by every other module.

All masks are dense bitmaps at a single processing resolution. Types are
immutable value objects after construction and every operation here is a
pure function, so everything in this module is safe for concurrent use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DegenerateMaskError, LabelError, ShapeError

#: Default processing resolution (pixels) images are resampled to before
#: any mask math happens.
DEFAULT_RESOLUTION = 504

MASK_SOURCES = ("tracker", "segmenter", "prediction", "manual")


class ChangeClass(IntEnum):
    """The four change classes. Code and name are bijective."""

    NON_CHANGE = 0
    OBJECT_CHANGE = 1
    APPEARANCE_CHANGE = 2
    NOT_IN_VIEW = 3


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


def as_binary_grid(grid: np.ndarray) -> np.ndarray:
    """Coerce an array-like into a read-only 2-D boolean grid."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ShapeError(f"binary grid must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.bool_:
        arr = arr.astype(bool)
    return _freeze(arr)


@dataclass(frozen=True)
class ChangeMask:
    """Dense per-pixel change labels over the T1 image.

    ``labels`` is an H x W uint8 grid; binary masks are the K=2 case.
    """

    labels: np.ndarray
    num_classes: int = 4

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ShapeError(f"labels must be 2-D, got shape {arr.shape}")
        if self.num_classes not in (2, 4):
            raise LabelError(f"num_classes must be 2 or 4, got {self.num_classes}")
        arr = arr.astype(np.uint8, copy=False)
        if arr.size and int(arr.max()) >= self.num_classes:
            raise LabelError(
                f"label {int(arr.max())} out of range for {self.num_classes} classes"
            )
        object.__setattr__(self, "labels", _freeze(arr))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_area(self, code: int) -> int:
        return int(np.count_nonzero(self.labels == code))

    def present_classes(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))


@dataclass(frozen=True)
class MaskInstance:
    """One object-level binary mask with provenance.

    ``change_class`` starts as the candidate class assigned by the stage
    that produced the instance (1 for object candidates, 2 for appearance
    candidates) and may be rewritten to 3 by the view classifier.
    """

    bitmap: np.ndarray
    source: str
    phrase: str | None = None
    change_class: int | None = None
    instance_id: str | None = None
    area: int = field(init=False)

    def __post_init__(self) -> None:
        if self.source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {self.source!r}")
        bitmap = as_binary_grid(self.bitmap)
        object.__setattr__(self, "bitmap", bitmap)
        object.__setattr__(self, "area", int(np.count_nonzero(bitmap)))

    def with_class(self, code: int) -> "MaskInstance":
        return replace(self, change_class=int(code))

    def with_id(self, instance_id: str) -> "MaskInstance":
        return replace(self, instance_id=instance_id)


@dataclass(frozen=True)
class ImagePair:
    """One temporally separated image pair, already at processing resolution."""

    pair_id: str
    image_t0: np.ndarray
    image_t1: np.ndarray
    capture_t0: datetime | None = None
    capture_t1: datetime | None = None
    retrieval_score: float | None = None

    def __post_init__(self) -> None:
        t0 = np.asarray(self.image_t0)
        t1 = np.asarray(self.image_t1)
        if t0.shape != t1.shape:
            raise ShapeError(
                f"pair {self.pair_id}: images must share one processing "
                f"resolution, got {t0.shape} vs {t1.shape}"
            )
        object.__setattr__(self, "image_t0", _freeze(t0))
        object.__setattr__(self, "image_t1", _freeze(t1))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.image_t1.shape[0], self.image_t1.shape[1]


@dataclass(frozen=True)
class CommonViewMask:
    """Binary mask on T1 marking pixels visible in both images."""

    bitmap: np.ndarray
    coverage: float = field(init=False)

    def __post_init__(self) -> None:
        bitmap = as_binary_grid(self.bitmap)
        object.__setattr__(self, "bitmap", bitmap)
        cov = float(np.count_nonzero(bitmap)) / bitmap.size if bitmap.size else 0.0
        object.__setattr__(self, "coverage", cov)


# ---------------------------------------------------------------------------
# Mask algebra
# ---------------------------------------------------------------------------


def overlap_ratio(candidate: MaskInstance, reference: np.ndarray) -> float:
    """Fraction of the candidate mask covered by the reference region.

    The denominator is the candidate's own area, so the ratio answers "how
    much of this object lies inside the reference" and is insensitive to
    the reference's total size.
    """
    ref = as_binary_grid(reference)
    if candidate.bitmap.shape != ref.shape:
        raise ShapeError(
            f"candidate {candidate.bitmap.shape} vs reference {ref.shape}"
        )
    if candidate.area == 0:
        raise DegenerateMaskError("overlap_ratio of an empty candidate mask")
    inter = int(np.count_nonzero(candidate.bitmap & ref))
    return inter / candidate.area


def union_masks(
    masks: Sequence[MaskInstance], shape: tuple[int, int] | None = None
) -> np.ndarray:
    """Pixelwise OR of instance bitmaps. An empty list yields an all-zero grid.

    ``shape`` is required when ``masks`` is empty and must agree with the
    instances otherwise.
    """
    if not masks:
        if shape is None:
            raise ShapeError("union of an empty list needs an explicit shape")
        return _freeze(np.zeros(shape, dtype=bool))
    first = masks[0].bitmap.shape
    if shape is not None and shape != first:
        raise ShapeError(f"requested shape {shape} != instance shape {first}")
    out = np.zeros(first, dtype=bool)
    for m in masks:
        if m.bitmap.shape != first:
            raise ShapeError(f"mixed instance shapes {first} vs {m.bitmap.shape}")
        out |= m.bitmap
    return _freeze(out)


def to_binary(mask: ChangeMask) -> np.ndarray:
    """Collapse a multi-class mask to binary: 1 iff the label is any change class."""
    return _freeze(np.asarray(mask.labels) >= 1)


def mask_from_instances(
    instances: Iterable[MaskInstance],
    shape: tuple[int, int],
    class3_passthrough: np.ndarray | None = None,
) -> ChangeMask:
    """Rasterize classified instances into a 4-class mask.

    Overlapping pixels resolve with fixed priority 1 > 2 > 3; everything
    else is class 0. ``class3_passthrough`` optionally adds extra
    not-in-view pixels at the lowest priority.
    """
    instances = list(instances)
    labels = np.zeros(shape, dtype=np.uint8)
    if class3_passthrough is not None:
        labels[as_binary_grid(class3_passthrough)] = ChangeClass.NOT_IN_VIEW
    for code in (ChangeClass.NOT_IN_VIEW, ChangeClass.APPEARANCE_CHANGE, ChangeClass.OBJECT_CHANGE):
        for inst in instances:
            if inst.change_class != int(code):
                continue
            if inst.bitmap.shape != shape:
                raise ShapeError(f"instance shape {inst.bitmap.shape} != {shape}")
            labels[inst.bitmap] = int(code)
    return ChangeMask(labels, num_classes=4)


# ---------------------------------------------------------------------------
# Serialization: 8-bit PNG masks and JSON instance manifests
# ---------------------------------------------------------------------------


def save_change_mask(mask: ChangeMask, path: str | Path) -> None:
    """Write the label grid as a single-channel 8-bit PNG (values 0..3)."""
    Image.fromarray(np.asarray(mask.labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_change_mask(path: str | Path, num_classes: int = 4) -> ChangeMask:
    with Image.open(path) as img:
        labels = np.asarray(img.convert("L"), dtype=np.uint8)
    return ChangeMask(labels, num_classes=num_classes)


def save_bitmap(bitmap: np.ndarray, path: str | Path) -> None:
    """Write a binary grid as an 8-bit PNG with values {0, 255}."""
    arr = (as_binary_grid(bitmap).astype(np.uint8)) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_bitmap(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return _freeze(arr > 127)


def save_instance_set(
    instances: Sequence[MaskInstance], directory: str | Path, manifest_name: str = "instances.json"
) -> Path:
    """Persist an instance set as a JSON manifest plus per-instance PNG bitmaps.

    Instances without an id get a deterministic position-based one.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, inst in enumerate(instances):
        inst_id = inst.instance_id or f"inst-{idx:03d}"
        png_name = f"{inst_id}.png"
        save_bitmap(inst.bitmap, directory / png_name)
        entries.append(
            {
                "instance_id": inst_id,
                "source": inst.source,
                "phrase": inst.phrase,
                "change_class": inst.change_class,
                "area": inst.area,
                "bitmap_png": png_name,
            }
        )
    manifest = {
        "height": int(instances[0].bitmap.shape[0]) if instances else None,
        "width": int(instances[0].bitmap.shape[1]) if instances else None,
        "instances": entries,
    }
    manifest_path = directory / manifest_name
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_instance_set(manifest_path: str | Path) -> list[MaskInstance]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    out = []
    for entry in manifest["instances"]:
        bitmap = load_bitmap(manifest_path.parent / entry["bitmap_png"])
        out.append(
            MaskInstance(
                bitmap=bitmap,
                source=entry["source"],
                phrase=entry.get("phrase"),
                change_class=entry.get("change_class"),
                instance_id=entry["instance_id"],
            )
        )
    return out
