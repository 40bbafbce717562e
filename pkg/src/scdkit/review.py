"""Review store for the manual-inspection stage.

State is event-sourced: the store holds the original pseudo-annotations
plus an append-only JSON-lines decision log, and the current state of
every pair is a pure fold of the log over the seeds. Restarting a store
on the same seeds and log reproduces the state exactly.

Reviewers can only remove masks or whole pairs, never add or paint; a
pair with missing annotations is discarded rather than repaired.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from .annotation import PairWorkspace, PseudoAnnotation
from .curation import SplitSpec, Splits, curation_stats, split
from .errors import ConfigError, ConflictError, NotFoundError
from .masks import mask_from_instances, save_change_mask

DECISION_ACTIONS = ("accept", "discard", "remove_instance")

#: default checkout lease, seconds
DEFAULT_LEASE_TIMEOUT = 15 * 60.0


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class ReviewDecision:
    pair_id: str
    action: str
    reviewer: str
    timestamp: str
    instance_id: str | None = None

    def __post_init__(self) -> None:
        if self.action not in DECISION_ACTIONS:
            raise ConfigError(f"unknown decision action {self.action!r}")
        if self.action == "remove_instance" and not self.instance_id:
            raise ConfigError("remove_instance decisions need an instance_id")

    def to_json(self) -> dict:
        payload = {
            "pair_id": self.pair_id,
            "action": self.action,
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
        }
        if self.instance_id is not None:
            payload["instance_id"] = self.instance_id
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ReviewDecision":
        return cls(
            pair_id=payload["pair_id"],
            action=payload["action"],
            reviewer=payload["reviewer"],
            timestamp=payload["timestamp"],
            instance_id=payload.get("instance_id"),
        )


@dataclass(frozen=True)
class Lease:
    session: str
    expires_at: float


class ReviewStore:
    """Decision log plus lease table over a fixed set of pseudo-annotations.

    All mutations go through :meth:`record`, which appends to the log
    before updating in-memory state. The queue order is the seed order.
    """

    def __init__(
        self,
        annotations: Sequence[PseudoAnnotation],
        log_path: str | Path,
        lease_timeout: float = DEFAULT_LEASE_TIMEOUT,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        if lease_timeout <= 0:
            raise ConfigError("lease_timeout must be positive")
        self._state: dict[str, PseudoAnnotation] = {}
        for ann in annotations:
            if ann.pair_id in self._state:
                raise ConfigError(f"duplicate pair id {ann.pair_id!r}")
            self._state[ann.pair_id] = ann
        self._log_path = Path(log_path)
        self._lease_timeout = lease_timeout
        self._clock = clock
        self._leases: dict[str, Lease] = {}
        self._lock = threading.Lock()
        if self._log_path.exists():
            for line in self._log_path.read_text().splitlines():
                if not line.strip():
                    continue
                decision = ReviewDecision.from_json(json.loads(line))
                self._state[decision.pair_id] = self._fold(decision)

    @classmethod
    def from_workspace(
        cls,
        data_root: str | Path,
        log_name: str = "decisions.jsonl",
        **kwargs,
    ) -> "ReviewStore":
        """Load every completed pair workspace under ``data_root``.

        Queue order is sorted pair id, which is stable across restarts.
        """
        data_root = Path(data_root)
        annotations = []
        for annotation_file in sorted(data_root.glob("*/06_pseudo/annotation.json")):
            pair_dir = annotation_file.parent.parent
            annotations.append(
                PairWorkspace(data_root, pair_dir.name).load_annotation()
            )
        return cls(annotations, data_root / log_name, **kwargs)

    # -- queries -------------------------------------------------------------

    def pair_ids(self) -> tuple[str, ...]:
        return tuple(self._state)

    def annotation(self, pair_id: str) -> PseudoAnnotation:
        try:
            return self._state[pair_id]
        except KeyError:
            raise NotFoundError(f"unknown pair {pair_id!r}") from None

    def progress(self) -> dict[str, int]:
        counts = {"total": len(self._state), "pending": 0, "accepted": 0, "discarded": 0}
        for ann in self._state.values():
            if ann.status == "pending_review":
                counts["pending"] += 1
            else:
                counts[ann.status] += 1
        return counts

    def accepted(self) -> list[PseudoAnnotation]:
        return [a for a in self._state.values() if a.status == "accepted"]

    def all_annotations(self) -> list[PseudoAnnotation]:
        return list(self._state.values())

    # -- leases ----------------------------------------------------------------

    def _prune_leases(self, now: float) -> None:
        expired = [pid for pid, lease in self._leases.items() if lease.expires_at <= now]
        for pid in expired:
            del self._leases[pid]

    def next_pending(self, session: str) -> PseudoAnnotation | None:
        """Check out the oldest pending pair for ``session``.

        A session that already holds a live lease gets the same pair back
        with the lease renewed, so polling doubles as keep-alive. Expired
        leases silently return their pair to the queue.
        """
        with self._lock:
            now = self._clock()
            self._prune_leases(now)
            expiry = now + self._lease_timeout
            for pair_id, ann in self._state.items():
                if ann.status != "pending_review":
                    continue
                lease = self._leases.get(pair_id)
                if lease is not None and lease.session != session:
                    continue
                self._leases[pair_id] = Lease(session=session, expires_at=expiry)
                return ann
            return None

    def lease_holder(self, pair_id: str) -> str | None:
        with self._lock:
            self._prune_leases(self._clock())
            lease = self._leases.get(pair_id)
            return lease.session if lease else None

    # -- mutations ---------------------------------------------------------

    def _fold(self, decision: ReviewDecision) -> PseudoAnnotation:
        """Compute the post-decision annotation; raises instead of writing."""
        ann = self.annotation(decision.pair_id)
        if ann.status != "pending_review":
            raise ConflictError(
                f"pair {decision.pair_id!r} is already {ann.status}"
            )
        if decision.action == "discard":
            return replace(ann, status="discarded")
        if decision.action == "accept":
            mask = mask_from_instances(
                ann.instances, (ann.mask.height, ann.mask.width)
            )
            return replace(ann, mask=mask, status="accepted")
        surviving = tuple(
            i for i in ann.instances if i.instance_id != decision.instance_id
        )
        if len(surviving) == len(ann.instances):
            raise NotFoundError(
                f"pair {decision.pair_id!r} has no instance "
                f"{decision.instance_id!r}"
            )
        mask = mask_from_instances(surviving, (ann.mask.height, ann.mask.width))
        return replace(ann, instances=surviving, mask=mask)

    def record(self, decision: ReviewDecision) -> PseudoAnnotation:
        """Validate, append to the log, then commit the new state."""
        with self._lock:
            updated = self._fold(decision)
            with open(self._log_path, "a") as fh:
                fh.write(json.dumps(decision.to_json(), sort_keys=True) + "\n")
            self._state[decision.pair_id] = updated
            if updated.status != "pending_review":
                self._leases.pop(decision.pair_id, None)
            return updated


# ---------------------------------------------------------------------------
# Dataset export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExportResult:
    manifest_path: Path
    mask_paths: tuple[Path, ...]
    num_pairs: int


def export_dataset(
    store: ReviewStore,
    out_dir: str | Path,
    split_spec: SplitSpec | None = None,
    allow_partial: bool = False,
) -> ExportResult:
    """Write accepted pairs as 4-class PNG masks plus a JSON manifest.

    Exports are deterministic: the same store state always produces the
    same bytes, so re-running an export is a no-op diff-wise.
    """
    progress = store.progress()
    if progress["pending"] and not allow_partial:
        raise ConflictError(
            f"{progress['pending']} pairs still pending review; "
            "pass allow_partial to export anyway"
        )
    out_dir = Path(out_dir)
    masks_dir = out_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    accepted = store.accepted()
    entries = []
    mask_paths = []
    for ann in accepted:
        mask_file = masks_dir / f"{ann.pair_id}.png"
        save_change_mask(ann.mask, mask_file)
        mask_paths.append(mask_file)
        entries.append(
            {
                "pair_id": ann.pair_id,
                "mask": f"masks/{ann.pair_id}.png",
                "change_classes": sorted(ann.change_classes),
            }
        )
    manifest: dict = {
        "pairs": entries,
        "stats": curation_stats(store.all_annotations()).to_json(),
    }
    if split_spec is not None:
        parts: Splits = split(accepted, split_spec)
        manifest["splits"] = {
            name: [a.pair_id for a in members]
            for name, members in parts.as_dict().items()
        }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExportResult(
        manifest_path=manifest_path,
        mask_paths=tuple(mask_paths),
        num_pairs=len(accepted),
    )
