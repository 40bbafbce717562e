"""Six-stage semi-automatic annotation pipeline.

Stages per pair: caption, open-vocabulary segmentation, tracking,
object matching, common-view estimation, then view classification and
assembly into a reviewable pseudo-annotation. Every stage persists a
numbered artifact in the pair's directory; a rerun loads whatever is
already on disk and executes only the missing tail, so completed audit
records are never rewritten.
"""

from __future__ import annotations

import json
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .captioning import (
    CaptionerAdapter,
    CaptionReport,
    GenerationParams,
    RateLimiter,
    caption_pair,
)
from .errors import (
    AdapterError,
    ConfigError,
    ConflictError,
    MatcherUnavailable,
    SegmenterUnavailable,
    ShapeError,
    TrackerUnavailable,
)
from .masks import (
    ChangeClass,
    ChangeMask,
    CommonViewMask,
    ImagePair,
    MaskInstance,
    as_binary_grid,
    load_bitmap,
    load_change_mask,
    load_instance_set,
    mask_from_instances,
    save_bitmap,
    save_change_mask,
    save_instance_set,
)

ANNOTATION_STATUSES = ("pending_review", "accepted", "discarded")

STAGE_NAMES = (
    "caption",
    "segment",
    "track",
    "object_match",
    "common_view",
    "assemble",
)


@dataclass(frozen=True)
class ViewClassifyConfig:
    """Instance-level in-view rule: majority fraction by default, with a
    flag for the looser any-overlap reading."""

    tau_cv: float = 0.5
    any_overlap: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_cv <= 1.0:
            raise ConfigError(f"tau_cv must be in [0, 1], got {self.tau_cv}")


@dataclass(frozen=True)
class PseudoAnnotation:
    pair_id: str
    mask: ChangeMask
    instances: tuple[MaskInstance, ...]
    common_view: CommonViewMask
    caption: CaptionReport
    status: str = "pending_review"

    def __post_init__(self) -> None:
        if self.status not in ANNOTATION_STATUSES:
            raise ConfigError(f"unknown annotation status {self.status!r}")
        object.__setattr__(self, "instances", tuple(self.instances))

    def with_status(self, status: str) -> "PseudoAnnotation":
        if status not in ANNOTATION_STATUSES:
            raise ConfigError(f"unknown annotation status {status!r}")
        if self.status != "pending_review":
            raise ConflictError(
                f"annotation {self.pair_id} is already {self.status}; "
                "only pending annotations can change status"
            )
        if status == "pending_review":
            raise ConflictError("cannot re-queue a pending annotation")
        return replace(self, status=status)

    @property
    def change_classes(self) -> set[int]:
        return {c for c in self.mask.present_classes() if c != 0}


class SegmenterAdapter(Protocol):
    """Open-vocabulary instance segmentation on a single image."""

    def segment(self, image: np.ndarray, phrase: str) -> list[np.ndarray]:
        """Return one binary mask per instance of the phrase (possibly none)."""
        ...


class TrackerAdapter(Protocol):
    """Cross-image proposal tracking for temporally inconsistent segments."""

    def inconsistent_masks(
        self, image_t0: np.ndarray, image_t1: np.ndarray
    ) -> list[np.ndarray]:
        """Binary masks of T1 segments judged absent in T0."""
        ...


class MatcherAdapter(Protocol):
    """Dense correspondence between the pair's views."""

    def common_view(
        self, image_t0: np.ndarray, image_t1: np.ndarray
    ) -> np.ndarray:
        """Binary T1-frame mask of pixels with a valid match in T0."""
        ...


@dataclass
class AdapterSuite:
    captioner: CaptionerAdapter
    segmenter: SegmenterAdapter
    tracker: TrackerAdapter
    matcher: MatcherAdapter


# ---------------------------------------------------------------------------
# Stage operations
# ---------------------------------------------------------------------------


def segment_open_vocab(
    image_t1: np.ndarray,
    phrases: Sequence[str],
    segmenter: SegmenterAdapter,
    candidate_class: int = int(ChangeClass.OBJECT_CHANGE),
    id_prefix: str = "seg",
) -> list[MaskInstance]:
    """Segment every instance of every phrase on the T1 image.

    Returns all instances of the named category, pre-existing ones
    included; downstream matching is what separates new from old.
    """
    if candidate_class not in (1, 2):
        raise ConfigError("candidate_class must be 1 (object) or 2 (appearance)")
    out: list[MaskInstance] = []
    for phrase in phrases:
        try:
            bitmaps = segmenter.segment(image_t1, phrase)
        except Exception as exc:
            raise SegmenterUnavailable(
                f"segmenter failed on phrase {phrase!r}"
            ) from exc
        for bitmap in bitmaps:
            out.append(
                MaskInstance(
                    bitmap=bitmap,
                    source="segmenter",
                    phrase=phrase,
                    change_class=candidate_class,
                    instance_id=f"{id_prefix}-{len(out):03d}",
                )
            )
    return out


def track_inconsistent(pair: ImagePair, tracker: TrackerAdapter) -> list[MaskInstance]:
    """Collect T1 segments the tracker could not carry back to T0.

    Raw output may still contain distractors; object matching filters
    them against the language-grounded masks.
    """
    try:
        bitmaps = tracker.inconsistent_masks(pair.image_t0, pair.image_t1)
    except Exception as exc:
        raise TrackerUnavailable(f"tracker failed on pair {pair.pair_id}") from exc
    return [
        MaskInstance(
            bitmap=bitmap,
            source="tracker",
            change_class=int(ChangeClass.OBJECT_CHANGE),
            instance_id=f"trk-{idx:03d}",
        )
        for idx, bitmap in enumerate(bitmaps)
    ]


def object_match(
    tracker_masks: Sequence[MaskInstance],
    segmenter_masks: Sequence[MaskInstance],
    min_overlap_pixels: int = 0,
) -> list[MaskInstance]:
    """Keep each tracker mask that overlaps any segmenter mask.

    The default threshold retains a single shared pixel. Order is
    preserved and nothing is ever added, only dropped.
    """
    if min_overlap_pixels < 0:
        raise ConfigError("min_overlap_pixels must be >= 0")
    retained = []
    for inst in tracker_masks:
        for ref in segmenter_masks:
            if inst.bitmap.shape != ref.bitmap.shape:
                raise ShapeError(
                    f"tracker mask {inst.bitmap.shape} vs segmenter "
                    f"mask {ref.bitmap.shape}"
                )
            overlap = int(np.count_nonzero(inst.bitmap & ref.bitmap))
            if overlap > min_overlap_pixels:
                retained.append(inst)
                break
    return retained


def estimate_common_view(pair: ImagePair, matcher: MatcherAdapter) -> CommonViewMask:
    try:
        bitmap = matcher.common_view(pair.image_t0, pair.image_t1)
    except Exception as exc:
        raise MatcherUnavailable(f"matcher failed on pair {pair.pair_id}") from exc
    grid = as_binary_grid(bitmap)
    if grid.shape != pair.resolution:
        raise ShapeError(
            f"common view {grid.shape} does not match pair resolution "
            f"{pair.resolution}"
        )
    return CommonViewMask(grid)


def classify_by_view(
    instances: Sequence[MaskInstance],
    common_view: CommonViewMask,
    cfg: ViewClassifyConfig = ViewClassifyConfig(),
) -> list[MaskInstance]:
    """Assign final classes by in-view fraction.

    An instance mostly inside the common view keeps its candidate class
    (1 or 2); one mostly outside becomes class 3. Empty instances are
    skipped with a warning.
    """
    out = []
    for inst in instances:
        if inst.area == 0:
            warnings.warn(
                f"skipping empty instance {inst.instance_id!r} in view "
                "classification"
            )
            continue
        if inst.change_class not in (1, 2):
            raise ConfigError(
                f"instance {inst.instance_id!r} has no candidate class"
            )
        inside = int(np.count_nonzero(inst.bitmap & common_view.bitmap))
        if cfg.any_overlap:
            in_view = inside > 0
        else:
            in_view = inside / inst.area >= cfg.tau_cv
        out.append(inst if in_view else inst.with_class(int(ChangeClass.NOT_IN_VIEW)))
    return out


def assemble_pseudo(
    pair: ImagePair,
    instances: Sequence[MaskInstance],
    common_view: CommonViewMask,
    caption: CaptionReport,
) -> PseudoAnnotation:
    """Rasterize classified instances (priority 1 > 2 > 3) and queue the
    result for review. No instances still yields a reviewable all-zero
    annotation so a human can confirm or discard the no-change call."""
    mask = mask_from_instances(instances, pair.resolution)
    return PseudoAnnotation(
        pair_id=pair.pair_id,
        mask=mask,
        instances=tuple(instances),
        common_view=common_view,
        caption=caption,
        status="pending_review",
    )


# ---------------------------------------------------------------------------
# Stage persistence
# ---------------------------------------------------------------------------

_INPUT_T0 = "t0.png"
_INPUT_T1 = "t1.png"
_CAPTION_FILE = "01_caption.json"
_SEGMENT_MANIFEST = "02_segment/instances.json"
_TRACK_MANIFEST = "03_track/instances.json"
_MATCH_MANIFEST = "04_object_match/instances.json"
_COMMON_VIEW_FILE = "05_common_view.png"
_MASK_FILE = "06_pseudo/mask.png"
_FINAL_MANIFEST = "06_pseudo/instances.json"
_ANNOTATION_FILE = "06_pseudo/annotation.json"


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_image_png(image: np.ndarray, path: Path) -> None:
    """Persist an image array as PNG; float arrays are taken to be in [0, 1]."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


class PairWorkspace:
    """Artifact store for one pair: numbered stage files under a directory.

    Completed artifacts are never overwritten; ``has``/``load_*`` drive
    resumption.
    """

    def __init__(self, root: str | Path, pair_id: str) -> None:
        self.dir = Path(root) / pair_id
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, rel: str) -> Path:
        return self.dir / rel

    def has(self, rel: str) -> bool:
        return self._path(rel).exists()

    def save_inputs(self, pair: ImagePair) -> None:
        """Snapshot the pair's images so the workspace is self-contained
        for audit and review serving."""
        if not self.has(_INPUT_T0):
            save_image_png(pair.image_t0, self._path(_INPUT_T0))
        if not self.has(_INPUT_T1):
            save_image_png(pair.image_t1, self._path(_INPUT_T1))

    def save_caption(self, report: CaptionReport) -> None:
        if self.has(_CAPTION_FILE):
            return
        _write_text_atomic(self._path(_CAPTION_FILE), _dump_json(report.to_json()))

    def load_caption(self) -> CaptionReport:
        return CaptionReport.from_json(
            json.loads(self._path(_CAPTION_FILE).read_text())
        )

    def save_instances(self, rel_manifest: str, instances: Sequence[MaskInstance]) -> None:
        if self.has(rel_manifest):
            return
        manifest = self._path(rel_manifest)
        save_instance_set(instances, manifest.parent, manifest_name=manifest.name)

    def load_instances(self, rel_manifest: str) -> list[MaskInstance]:
        return load_instance_set(self._path(rel_manifest))

    def save_common_view(self, view: CommonViewMask) -> None:
        if self.has(_COMMON_VIEW_FILE):
            return
        save_bitmap(view.bitmap, self._path(_COMMON_VIEW_FILE))

    def load_common_view(self) -> CommonViewMask:
        return CommonViewMask(load_bitmap(self._path(_COMMON_VIEW_FILE)))

    def save_annotation(self, annotation: PseudoAnnotation) -> None:
        if self.has(_ANNOTATION_FILE):
            return
        save_change_mask(annotation.mask, self._ensure_parent(_MASK_FILE))
        manifest = self._path(_FINAL_MANIFEST)
        save_instance_set(annotation.instances, manifest.parent, manifest_name=manifest.name)
        _write_text_atomic(
            self._path(_ANNOTATION_FILE),
            _dump_json(
                {
                    "pair_id": annotation.pair_id,
                    "status": annotation.status,
                    "change_classes": sorted(annotation.change_classes),
                    "coverage": annotation.common_view.coverage,
                }
            ),
        )

    def _ensure_parent(self, rel: str) -> Path:
        path = self._path(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def load_annotation(self) -> PseudoAnnotation:
        meta = json.loads(self._path(_ANNOTATION_FILE).read_text())
        return PseudoAnnotation(
            pair_id=meta["pair_id"],
            mask=load_change_mask(self._path(_MASK_FILE)),
            instances=tuple(self.load_instances(_FINAL_MANIFEST)),
            common_view=self.load_common_view(),
            caption=self.load_caption(),
            status=meta["status"],
        )


# ---------------------------------------------------------------------------
# Pipeline driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineFailure:
    pair_id: str
    stage: str
    error: str


@dataclass(frozen=True)
class AnnotateRunResult:
    annotations: tuple[PseudoAnnotation, ...]
    failures: tuple[PipelineFailure, ...]


def run_pipeline(
    pair: ImagePair,
    suite: AdapterSuite,
    out_dir: str | Path,
    view_cfg: ViewClassifyConfig = ViewClassifyConfig(),
    caption_params: GenerationParams | None = None,
    limiter: RateLimiter | None = None,
    caption_lock: threading.Lock | None = None,
    min_overlap_pixels: int = 0,
) -> PseudoAnnotation:
    """Run (or resume) all six stages for one pair.

    Each stage first checks the workspace: an existing artifact is loaded
    instead of recomputed, so adapters are only consulted for work that
    has not been persisted yet.
    """
    params = caption_params or GenerationParams()
    ws = PairWorkspace(out_dir, pair.pair_id)

    if ws.has(_ANNOTATION_FILE):
        return ws.load_annotation()
    ws.save_inputs(pair)

    # stage 1: caption (globally serialized when a lock is supplied)
    if ws.has(_CAPTION_FILE):
        caption = ws.load_caption()
    else:
        if caption_lock is not None:
            with caption_lock:
                caption = caption_pair(pair, params, suite.captioner, limiter=limiter)
        else:
            caption = caption_pair(pair, params, suite.captioner, limiter=limiter)
        ws.save_caption(caption)

    # stage 2: open-vocabulary segmentation, objects then vegetation
    if ws.has(_SEGMENT_MANIFEST):
        segmented = ws.load_instances(_SEGMENT_MANIFEST)
    else:
        objects = segment_open_vocab(
            pair.image_t1,
            caption.objects_only_in_b,
            suite.segmenter,
            candidate_class=int(ChangeClass.OBJECT_CHANGE),
            id_prefix="seg-obj",
        )
        vegetation = segment_open_vocab(
            pair.image_t1,
            caption.vegetation_changed_b,
            suite.segmenter,
            candidate_class=int(ChangeClass.APPEARANCE_CHANGE),
            id_prefix="seg-veg",
        )
        segmented = objects + vegetation
        ws.save_instances(_SEGMENT_MANIFEST, segmented)
    object_masks = [i for i in segmented if i.change_class == 1]
    vegetation_masks = [i for i in segmented if i.change_class == 2]

    # stage 3: tracking
    if ws.has(_TRACK_MANIFEST):
        tracked = ws.load_instances(_TRACK_MANIFEST)
    else:
        tracked = track_inconsistent(pair, suite.tracker)
        ws.save_instances(_TRACK_MANIFEST, tracked)

    # stage 4: object matching (pure computation, still persisted for audit)
    if ws.has(_MATCH_MANIFEST):
        matched = ws.load_instances(_MATCH_MANIFEST)
    else:
        matched = object_match(tracked, object_masks, min_overlap_pixels)
        ws.save_instances(_MATCH_MANIFEST, matched)

    # stage 5: common view
    if ws.has(_COMMON_VIEW_FILE):
        view = ws.load_common_view()
    else:
        view = estimate_common_view(pair, suite.matcher)
        ws.save_common_view(view)

    # stage 6: classify and assemble
    classified = classify_by_view(list(matched) + vegetation_masks, view, view_cfg)
    annotation = assemble_pseudo(pair, classified, view, caption)
    ws.save_annotation(annotation)
    return annotation


def _stage_of(error: AdapterError) -> str:
    from .errors import CaptionerUnavailable

    mapping = {
        CaptionerUnavailable: "caption",
        SegmenterUnavailable: "segment",
        TrackerUnavailable: "track",
        MatcherUnavailable: "common_view",
    }
    for exc_type, stage in mapping.items():
        if isinstance(error, exc_type):
            return stage
    return "unknown"


def annotate_pairs(
    pairs: Sequence[ImagePair],
    suite: AdapterSuite,
    out_dir: str | Path,
    view_cfg: ViewClassifyConfig = ViewClassifyConfig(),
    caption_params: GenerationParams | None = None,
    workers: int = 1,
    min_overlap_pixels: int = 0,
) -> AnnotateRunResult:
    """Annotate a batch of pairs, continuing past per-pair adapter failures.

    Pairs are independent work units; the captioner is the one globally
    serialized resource (shared rate limiter plus a lock), honoring its
    sequential-call contract even with multiple workers.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    params = caption_params or GenerationParams()
    limiter = RateLimiter(params.inter_call_pause)
    lock = threading.Lock()
    results: list[PseudoAnnotation | None] = [None] * len(pairs)
    failures: list[PipelineFailure] = []
    failure_lock = threading.Lock()

    def work(idx: int) -> None:
        pair = pairs[idx]
        try:
            results[idx] = run_pipeline(
                pair,
                suite,
                out_dir,
                view_cfg=view_cfg,
                caption_params=params,
                limiter=limiter,
                caption_lock=lock,
                min_overlap_pixels=min_overlap_pixels,
            )
        except AdapterError as exc:
            with failure_lock:
                failures.append(
                    PipelineFailure(
                        pair_id=pair.pair_id, stage=_stage_of(exc), error=str(exc)
                    )
                )

    if workers == 1:
        for idx in range(len(pairs)):
            work(idx)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(len(pairs))))

    done = tuple(a for a in results if a is not None)
    failures.sort(key=lambda f: f.pair_id)
    return AnnotateRunResult(annotations=done, failures=tuple(failures))
