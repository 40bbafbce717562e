"""Dataset curation: retrieval-based pair construction, temporal
constraints, deterministic splits, and curation statistics.

Pairing walks every database image, asks the place-recognition adapter for
its top-1 match in the query pool, and keeps the pair only if the two
captures come from opposing quarters of the year and are at least 90 days
apart. Rejections carry reason codes so curation runs are auditable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from datetime import datetime
from enum import IntEnum
from math import floor
from typing import Iterable, Protocol, Sequence

from .errors import ConfigError, RetrieverUnavailable

REASON_QUARTER = "quarter_constraint"
REASON_GAP = "temporal_gap"
REASON_DUPLICATE = "duplicate_query"

MIN_GAP_DAYS = 90


class Quarter(IntEnum):
    Q1 = 1
    Q2 = 2
    Q3 = 3
    Q4 = 4


def quarter_of(timestamp: datetime) -> Quarter:
    return Quarter((timestamp.month - 1) // 3 + 1)


def opposing_quarter(quarter: Quarter) -> Quarter:
    return Quarter((quarter - 1 + 2) % 4 + 1)


@dataclass(frozen=True)
class ImageRecord:
    """One capture with the metadata curation needs."""

    id: str
    path: str
    gps: tuple[float, float]
    timestamp: datetime
    quarter: Quarter | None = None

    def __post_init__(self) -> None:
        lat, lon = self.gps
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise ConfigError(f"gps out of range: {self.gps}")
        derived = quarter_of(self.timestamp)
        if self.quarter is None:
            object.__setattr__(self, "quarter", derived)
        elif self.quarter != derived:
            raise ConfigError(
                f"quarter {self.quarter!r} inconsistent with timestamp "
                f"{self.timestamp.isoformat()} ({derived!r})"
            )


@dataclass(frozen=True)
class PairRecord:
    """A temporally separated image pair; T0 is always the earlier capture."""

    pair_id: str
    t0_path: str
    t1_path: str
    t0_time: datetime
    t1_time: datetime
    retrieval_score: float | None = None
    t0_id: str | None = None
    t1_id: str | None = None

    def __post_init__(self) -> None:
        if self.t1_time < self.t0_time:
            raise ConfigError(f"pair {self.pair_id}: t1 precedes t0")

    @property
    def gap_days(self) -> int:
        return (self.t1_time - self.t0_time).days

    def to_manifest_entry(self) -> dict:
        return {
            "id": self.pair_id,
            "t0_path": self.t0_path,
            "t1_path": self.t1_path,
            "t0_time": self.t0_time.isoformat(),
            "t1_time": self.t1_time.isoformat(),
        }

    @classmethod
    def from_manifest_entry(cls, entry: dict) -> "PairRecord":
        return cls(
            pair_id=entry["id"],
            t0_path=entry["t0_path"],
            t1_path=entry["t1_path"],
            t0_time=datetime.fromisoformat(entry["t0_time"]),
            t1_time=datetime.fromisoformat(entry["t1_time"]),
        )


def write_pair_manifest(pairs: Sequence[PairRecord], path) -> None:
    payload = [p.to_manifest_entry() for p in pairs]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pair_manifest(path) -> list[PairRecord]:
    with open(path) as fh:
        payload = json.load(fh)
    return [PairRecord.from_manifest_entry(entry) for entry in payload]


def write_image_records(records: Sequence[ImageRecord], path) -> None:
    payload = [
        {
            "id": r.id,
            "path": r.path,
            "gps": list(r.gps),
            "timestamp": r.timestamp.isoformat(),
        }
        for r in records
    ]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_image_records(path) -> list[ImageRecord]:
    with open(path) as fh:
        payload = json.load(fh)
    return [
        ImageRecord(
            id=entry["id"],
            path=entry["path"],
            gps=(float(entry["gps"][0]), float(entry["gps"][1])),
            timestamp=datetime.fromisoformat(entry["timestamp"]),
        )
        for entry in payload
    ]


@dataclass(frozen=True)
class RejectedPair:
    database_id: str
    query_id: str
    reason: str


@dataclass(frozen=True)
class PairBuildResult:
    pairs: tuple[PairRecord, ...]
    rejected: tuple[RejectedPair, ...]


class RetrieverAdapter(Protocol):
    """Visual place recognition: best match for a probe among candidates."""

    def top1(
        self, probe: ImageRecord, pool: Sequence[ImageRecord]
    ) -> tuple[str, float]:
        """Return (record id, similarity) of the pool image most like probe."""
        ...


def temporal_gap_ok(a: datetime, b: datetime) -> bool:
    """True when the captures are at least MIN_GAP_DAYS apart."""
    return abs(a - b).days >= MIN_GAP_DAYS


def _pair_from(db: ImageRecord, q: ImageRecord, score: float) -> PairRecord:
    earlier, later = (db, q) if db.timestamp <= q.timestamp else (q, db)
    return PairRecord(
        pair_id=f"{earlier.id}__{later.id}",
        t0_path=earlier.path,
        t1_path=later.path,
        t0_time=earlier.timestamp,
        t1_time=later.timestamp,
        retrieval_score=score,
        t0_id=earlier.id,
        t1_id=later.id,
    )


def build_pairs(
    database: Sequence[ImageRecord],
    queries: Sequence[ImageRecord],
    retriever: RetrieverAdapter,
    unique_queries: bool = False,
) -> PairBuildResult:
    """Pair each database image with its top-1 retrieval from the queries.

    Candidates violating the minimum temporal gap or the opposing-quarter
    rule (Q1 with Q3, Q2 with Q4) are rejected with reason codes instead
    of silently dropped; the gap is checked first, so a pair breaking both
    rules reports the gap. ``unique_queries`` additionally rejects a query
    already claimed by an earlier database image.
    """
    if not queries:
        raise ConfigError("query pool is empty")
    by_id = {q.id: q for q in queries}
    if len(by_id) != len(queries):
        raise ConfigError("duplicate ids in query pool")
    pairs: list[PairRecord] = []
    rejected: list[RejectedPair] = []
    claimed: set[str] = set()
    for db in database:
        try:
            match_id, score = retriever.top1(db, queries)
        except Exception as exc:
            raise RetrieverUnavailable(
                f"retrieval failed for database image {db.id}"
            ) from exc
        if match_id not in by_id:
            raise RetrieverUnavailable(
                f"retriever returned unknown query id {match_id!r}"
            )
        q = by_id[match_id]
        if not temporal_gap_ok(db.timestamp, q.timestamp):
            rejected.append(RejectedPair(db.id, q.id, REASON_GAP))
            continue
        if q.quarter != opposing_quarter(db.quarter):
            rejected.append(RejectedPair(db.id, q.id, REASON_QUARTER))
            continue
        if unique_queries and q.id in claimed:
            rejected.append(RejectedPair(db.id, q.id, REASON_DUPLICATE))
            continue
        claimed.add(q.id)
        pairs.append(_pair_from(db, q, score))
    return PairBuildResult(pairs=tuple(pairs), rejected=tuple(rejected))


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    """Either fixed counts or fractions; exactly one must be given."""

    seed: int = 0
    counts: tuple[int, int, int] | None = None
    fractions: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if (self.counts is None) == (self.fractions is None):
            raise ConfigError("give exactly one of counts or fractions")
        if self.counts is not None and any(c < 0 for c in self.counts):
            raise ConfigError("counts must be non-negative")
        if self.fractions is not None:
            if any(f < 0 for f in self.fractions):
                raise ConfigError("fractions must be non-negative")
            if abs(sum(self.fractions) - 1.0) > 1e-9:
                raise ConfigError("fractions must sum to 1")

    def resolve_counts(self, total: int) -> tuple[int, int, int]:
        if self.counts is not None:
            if sum(self.counts) > total:
                raise ConfigError(
                    f"split counts sum to {sum(self.counts)} but only "
                    f"{total} pairs exist"
                )
            if sum(self.counts) < total:
                raise ConfigError(
                    f"split counts sum to {sum(self.counts)}, leaving "
                    f"{total - sum(self.counts)} of {total} pairs unassigned"
                )
            return self.counts
        base = [floor(f * total) for f in self.fractions]
        remainders = [f * total - b for f, b in zip(self.fractions, base)]
        for _ in range(total - sum(base)):
            idx = max(range(3), key=lambda i: (remainders[i], -i))
            base[idx] += 1
            remainders[idx] = -1.0
        return tuple(base)  # type: ignore[return-value]


@dataclass(frozen=True)
class Splits:
    train: tuple[PairRecord, ...]
    val: tuple[PairRecord, ...]
    test: tuple[PairRecord, ...]

    def as_dict(self) -> dict[str, tuple[PairRecord, ...]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def split(pairs: Sequence[PairRecord], spec: SplitSpec) -> Splits:
    """Seeded shuffle then partition into train/val/test."""
    n_train, n_val, n_test = spec.resolve_counts(len(pairs))
    order = list(pairs)
    random.Random(spec.seed).shuffle(order)
    return Splits(
        train=tuple(order[:n_train]),
        val=tuple(order[n_train : n_train + n_val]),
        test=tuple(order[n_train + n_val : n_train + n_val + n_test]),
    )


def write_split_ids(splits: Splits, path) -> None:
    payload = {
        name: [p.pair_id for p in part] for name, part in splits.as_dict().items()
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Curation statistics

REVIEW_STATUSES = ("accepted", "discarded", "pending")
#: the annotation pipeline spells its queue state "pending_review"
_PENDING_ALIASES = ("pending", "pending_review")


@dataclass(frozen=True)
class CurationStats:
    total: int
    accepted: int
    discarded: int
    pending: int
    category_counts: tuple[int, int, int]  # pairs containing class 1 / 2 / 3

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "accepted": self.accepted,
            "discarded": self.discarded,
            "pending": self.pending,
            "pairs_with_object_change": self.category_counts[0],
            "pairs_with_appearance_change": self.category_counts[1],
            "pairs_with_not_in_view": self.category_counts[2],
        }

    def format_table(self) -> str:
        rows = [
            ("pairs total", self.total),
            ("accepted", self.accepted),
            ("discarded", self.discarded),
            ("pending", self.pending),
            ("with object change", self.category_counts[0]),
            ("with appearance change", self.category_counts[1]),
            ("with not-in-view", self.category_counts[2]),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:>7}" for name, value in rows)


def curation_stats(annotations: Iterable) -> CurationStats:
    """Tally review statuses and per-class pair counts.

    Each item needs a ``status`` in {accepted, discarded, pending} and a
    ``change_classes`` collection of class codes present in the pair.
    Category counts run over accepted pairs and are not mutually
    exclusive, so their sum can exceed the accepted total.
    """
    total = accepted = discarded = pending = 0
    categories = [0, 0, 0]
    for ann in annotations:
        status = ann.status
        if status in _PENDING_ALIASES:
            status = "pending"
        if status not in REVIEW_STATUSES:
            raise ConfigError(f"unknown review status {status!r}")
        total += 1
        if status == "accepted":
            accepted += 1
            classes = set(ann.change_classes)
            for i, code in enumerate((1, 2, 3)):
                if code in classes:
                    categories[i] += 1
        elif status == "discarded":
            discarded += 1
        else:
            pending += 1
    return CurationStats(
        total=total,
        accepted=accepted,
        discarded=discarded,
        pending=pending,
        category_counts=tuple(categories),  # type: ignore[arg-type]
    )
