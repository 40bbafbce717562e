"""Umbrella command-line interface.

One `scd` entry point with a subcommand per pipeline stage. Every flag
can also come from a section of a TOML/JSON config file named after the
subcommand; an explicit flag wins over the file.

External models never run in-process here. Commands that need them take
either precomputed results (retrieval lists for `pair`) or a dotted
`module:factory` path producing an adapter suite (`annotate`).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import import_module
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from .annotation import AdapterSuite, ViewClassifyConfig, annotate_pairs
from .backbone import BackboneSpec, ChangeDetector
from .captioning import GenerationParams
from .curation import (
    SplitSpec,
    build_pairs,
    curation_stats,
    load_image_records,
    load_pair_manifest,
    split,
    write_pair_manifest,
    write_split_ids,
)
from .errors import ConfigError, ScdError
from .evaluation import (
    SweepRecord,
    evaluate_split,
    format_sweep_table,
    sweep,
    sweep_to_csv,
)
from .masks import (
    ChangeClass,
    ChangeMask,
    ImagePair,
    load_bitmap,
    load_change_mask,
    load_instance_set,
    save_bitmap,
    to_binary,
)
from .matching import MatchConfig, match_and_refine
from .review import ReviewStore, export_dataset
from .server import create_app, resolve_data_root
from .training import TrainConfig, TrainSample, train, train_detector, trace_to_csv

_SWEEP_STAGES = {"geo": "geometric", "sem": "semantic"}


def _parse_numbers(text, cast):
    try:
        return tuple(cast(part) for part in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"could not parse number list {text!r}") from exc


def _on_off(value) -> bool:
    if isinstance(value, bool):
        return value
    if value in ("on", "off"):
        return value == "on"
    raise ConfigError(f"expected on or off, got {value!r}")


def _load_image(path: Path, resolution: int | None = None) -> np.ndarray:
    if not path.is_file():
        raise ConfigError(f"image {path} does not exist")
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8)


def _relative_to_manifest(manifest_path: Path, entry_path: str) -> Path:
    candidate = Path(entry_path)
    if candidate.is_absolute():
        return candidate
    return manifest_path.parent / candidate


def _load_adapter_suite(spec_text: str) -> AdapterSuite:
    """Import `module:factory` and call it for an adapter suite."""
    module_name, sep, attr = spec_text.partition(":")
    if not sep or not module_name or not attr:
        raise ConfigError(
            f"adapter factory must look like package.module:factory, got {spec_text!r}"
        )
    try:
        factory = getattr(import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"could not load adapter factory {spec_text!r}: {exc}") from exc
    suite = factory()
    for role in ("captioner", "segmenter", "tracker", "matcher"):
        if not hasattr(suite, role):
            raise ConfigError(
                f"adapter factory {spec_text!r} returned an object without a {role}"
            )
    return suite


class _ManifestRetriever:
    """Top-1 retrieval read from a precomputed {probe id: query id} table.

    Values may also be [query_id, score] pairs when the upstream model
    exported similarities.
    """

    def __init__(self, table: dict) -> None:
        self._table = dict(table)

    def top1(self, probe, pool):
        try:
            value = self._table[probe.id]
        except KeyError as exc:
            raise LookupError(f"no retrieval entry for probe {probe.id!r}") from exc
        if isinstance(value, (list, tuple)):
            query_id, score = value
            return str(query_id), float(score)
        return str(value), 1.0


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_pair(args, table) -> int:
    database = load_image_records(args.database)
    queries = load_image_records(args.queries)
    retrievals = json.loads(Path(args.retrievals).read_text())
    unique = config_mod.resolve(args.unique_queries, table, "unique_queries", False)
    result = build_pairs(
        database, queries, _ManifestRetriever(retrievals), unique_queries=bool(unique)
    )
    write_pair_manifest(result.pairs, args.out)
    reasons: dict[str, int] = {}
    for rej in result.rejected:
        reasons[rej.reason] = reasons.get(rej.reason, 0) + 1
    if args.rejected:
        payload = [
            {"database_id": r.database_id, "query_id": r.query_id, "reason": r.reason}
            for r in result.rejected
        ]
        Path(args.rejected).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"kept {len(result.pairs)} pairs, rejected {len(result.rejected)}")
    for reason in sorted(reasons):
        print(f"  {reason}: {reasons[reason]}")
    return 0


def _number_tuple(value, cast):
    if value is None:
        return None
    if isinstance(value, str):
        return _parse_numbers(value, cast)
    return tuple(cast(v) for v in value)


def _split_spec(args, table) -> SplitSpec | None:
    counts = _number_tuple(config_mod.resolve(args.counts, table, "counts"), int)
    fractions = _number_tuple(
        config_mod.resolve(args.fractions, table, "fractions"), float
    )
    if counts is None and fractions is None:
        return None
    seed = int(config_mod.resolve(args.seed, table, "seed", 0))
    return SplitSpec(seed=seed, counts=counts, fractions=fractions)


def cmd_split(args, table) -> int:
    pairs = load_pair_manifest(args.pairs)
    spec = _split_spec(args, table)
    if spec is None:
        raise ConfigError("give --counts or --fractions")
    parts = split(pairs, spec)
    write_split_ids(parts, args.out)
    print(
        f"train {len(parts.train)}  val {len(parts.val)}  test {len(parts.test)}"
        f"  (seed {spec.seed})"
    )
    return 0


def cmd_stats(args, table) -> int:
    root = resolve_data_root(config_mod.resolve(args.data, table, "data"))
    store = ReviewStore.from_workspace(root)
    stats = curation_stats(store.all_annotations())
    print(stats.format_table())
    if args.json:
        Path(args.json).write_text(json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_annotate(args, table) -> int:
    factory = config_mod.resolve(args.adapters, table, "adapters")
    if not factory:
        raise ConfigError(
            "annotate needs an adapter suite; pass --adapters package.module:factory"
        )
    suite = _load_adapter_suite(str(factory))
    manifest_path = Path(args.pairs)
    records = load_pair_manifest(manifest_path)
    resolution = config_mod.resolve(args.resolution, table, "resolution")
    resolution = int(resolution) if resolution is not None else None
    pairs = [
        ImagePair(
            pair_id=rec.pair_id,
            image_t0=_load_image(_relative_to_manifest(manifest_path, rec.t0_path), resolution),
            image_t1=_load_image(_relative_to_manifest(manifest_path, rec.t1_path), resolution),
            capture_t0=rec.t0_time,
            capture_t1=rec.t1_time,
        )
        for rec in records
    ]
    view_cfg = ViewClassifyConfig(
        tau_cv=float(config_mod.resolve(args.tau_cv, table, "tau_cv", 0.5)),
        any_overlap=bool(config_mod.resolve(None, table, "any_overlap", False)),
    )
    params = GenerationParams(
        inter_call_pause=float(config_mod.resolve(args.pause, table, "pause", 1.0))
    )
    result = annotate_pairs(
        pairs,
        suite,
        args.out,
        view_cfg=view_cfg,
        caption_params=params,
        workers=int(config_mod.resolve(args.workers, table, "workers", 1)),
        min_overlap_pixels=int(
            config_mod.resolve(args.min_overlap, table, "min_overlap", 0)
        ),
    )
    print(f"annotated {len(result.annotations)}/{len(pairs)} pairs into {args.out}")
    for failure in result.failures:
        print(f"  FAILED {failure.pair_id} at {failure.stage}: {failure.error}")
    return 1 if result.failures else 0


def cmd_refine(args, table) -> int:
    initial = load_bitmap(args.initial)
    geo = tuple(load_instance_set(args.inconsistent)) if args.inconsistent else ()
    sem = tuple(load_instance_set(args.semantic)) if args.semantic else ()
    cfg = MatchConfig(
        alpha_t=float(config_mod.resolve(args.alpha_t, table, "alpha_t", 0.20)),
        alpha_g=float(config_mod.resolve(args.alpha_g, table, "alpha_g", 0.10)),
        strict_inequality=bool(config_mod.resolve(None, table, "strict", True)),
    )
    keep = _on_off(config_mod.resolve(args.keep_initial, table, "keep_initial", "off"))
    result = match_and_refine(initial, geo, sem, cfg, keep_initial=keep)
    save_bitmap(result.mask, args.out)
    if args.report:
        payload = [entry.to_json() for entry in result.provenance]
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    retained = sum(1 for entry in result.provenance if entry.retained)
    print(
        f"retained {retained}/{len(result.provenance)} candidates"
        f"{'; no supporting evidence, kept initial mask' if result.no_evidence else ''}"
    )
    return 0


def _load_train_manifest(path: Path, num_classes: int, resolution: int | None):
    entries = json.loads(path.read_text())
    samples = []
    for entry in entries:
        mask = load_change_mask(
            _relative_to_manifest(path, entry["mask"]), num_classes=num_classes
        )
        samples.append(
            TrainSample(
                image_t0=_load_image(_relative_to_manifest(path, entry["t0"]), resolution),
                image_t1=_load_image(_relative_to_manifest(path, entry["t1"]), resolution),
                mask=mask,
                phrases=tuple(entry.get("phrases", ())),
            )
        )
    if not samples:
        raise ConfigError(f"training manifest {path} lists no samples")
    return samples


def cmd_train(args, table) -> int:
    classes = int(config_mod.resolve(args.classes, table, "classes", 2))
    if classes not in (2, 4):
        raise ConfigError(f"classes must be 2 or 4, got {classes}")
    resolution = int(config_mod.resolve(args.resolution, table, "resolution", 64))
    train_manifest = Path(args.dataset)
    train_samples = _load_train_manifest(train_manifest, classes, resolution)
    if args.val:
        val_samples = _load_train_manifest(Path(args.val), classes, resolution)
    else:
        val_samples = train_samples
    weights = _number_tuple(config_mod.resolve(None, table, "class_weights"), float)
    train_cfg = TrainConfig(
        epochs=int(config_mod.resolve(args.epochs, table, "epochs", 100)),
        lr=float(config_mod.resolve(args.lr, table, "lr", 1e-4)),
        batch_size=int(config_mod.resolve(args.batch, table, "batch", 4)),
        seed=int(config_mod.resolve(args.seed, table, "seed", 0)),
        hflip_prob=float(config_mod.resolve(None, table, "hflip_prob", 0.5)),
        mixed_precision=bool(config_mod.resolve(None, table, "mixed_precision", False)),
        warmup_frac=float(config_mod.resolve(None, table, "warmup_frac", 0.05)),
        class_weights=weights,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model = ChangeDetector.load(args.resume)
        if model.spec.num_classes != classes:
            raise ConfigError(
                f"checkpoint was trained with {model.spec.num_classes} classes, "
                f"asked for {classes}"
            )
        result = train(train_samples, val_samples, model, train_cfg, out_dir)
    else:
        spec = BackboneSpec(
            encoder_id=str(config_mod.resolve(None, table, "encoder", "toy")),
            feature_channels=int(config_mod.resolve(None, table, "feature_channels", 32)),
            num_classes=classes,
            input_resolution=resolution,
        )
        _, result = train_detector(train_samples, val_samples, spec, train_cfg, out_dir)
    trace_to_csv(result.trace, out_dir / "trace.csv")
    print(
        f"best val F1 {result.best_val_f1:.4f}; checkpoint {result.best_checkpoint}; "
        f"trace {out_dir / 'trace.csv'}"
    )
    return 0


def _eval_pairs(pred_dir: Path, gt_dir: Path, classes: int):
    pred_names = sorted(p.name for p in pred_dir.glob("*.png"))
    gt_names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not pred_names:
        raise ConfigError(f"no PNG masks under {pred_dir}")
    if pred_names != gt_names:
        only_pred = sorted(set(pred_names) - set(gt_names))
        only_gt = sorted(set(gt_names) - set(pred_names))
        raise ConfigError(
            f"mask sets differ; only in pred: {only_pred}, only in gt: {only_gt}"
        )
    pairs = []
    for name in pred_names:
        pred = load_change_mask(pred_dir / name)
        gt = load_change_mask(gt_dir / name)
        if classes == 2:
            pred = ChangeMask(to_binary(pred).astype(np.uint8), num_classes=2)
            gt = ChangeMask(to_binary(gt).astype(np.uint8), num_classes=2)
        pairs.append((pred, gt))
    return pairs


def cmd_eval(args, table) -> int:
    classes = int(config_mod.resolve(args.classes, table, "classes", 2))
    if classes not in (2, 4):
        raise ConfigError(f"classes must be 2 or 4, got {classes}")
    per_image = bool(config_mod.resolve(args.per_image, table, "per_image", False))
    pairs = _eval_pairs(Path(args.pred), Path(args.gt), classes)
    metrics = evaluate_split(pairs, per_image_average=per_image)
    rows = []
    if classes == 2:
        rows.append(("change", metrics.per_class_f1[1], metrics.per_class_iou[1]))
        print(f"pairs {len(pairs)}  F1 {rows[0][1]:.4f}  IoU {rows[0][2]:.4f}")
    else:
        for code in range(4):
            rows.append(
                (
                    ChangeClass(code).name.lower(),
                    metrics.per_class_f1[code],
                    metrics.per_class_iou[code],
                )
            )
        width = max(len(r[0]) for r in rows)
        print(f"{'class':<{width}}  {'F1':>7}  {'IoU':>7}")
        for name, f1, iou in rows:
            print(f"{name:<{width}}  {f1:7.4f}  {iou:7.4f}")
        print(f"{'macro':<{width}}  {metrics.macro_f1:7.4f}  {metrics.miou:7.4f}")
        if metrics.excluded_classes:
            print(f"excluded vacuous classes: {list(metrics.excluded_classes)}")
        rows.append(("macro", metrics.macro_f1, metrics.miou))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "f1", "iou"])
            writer.writerows(rows)
    return 0


def _load_sweep_records(records_dir: Path):
    records = []
    for pair_dir in sorted(p for p in records_dir.iterdir() if p.is_dir()):
        initial = pair_dir / "initial.png"
        gt = pair_dir / "gt.png"
        if not initial.is_file() or not gt.is_file():
            raise ConfigError(f"{pair_dir} needs initial.png and gt.png")
        geo_manifest = pair_dir / "geo" / "instances.json"
        sem_manifest = pair_dir / "sem" / "instances.json"
        records.append(
            SweepRecord(
                initial=load_bitmap(initial),
                geo_candidates=tuple(load_instance_set(geo_manifest)) if geo_manifest.is_file() else (),
                sem_candidates=tuple(load_instance_set(sem_manifest)) if sem_manifest.is_file() else (),
                gt=load_bitmap(gt),
            )
        )
    if not records:
        raise ConfigError(f"no record directories under {records_dir}")
    return records


def cmd_sweep(args, table) -> int:
    stage_key = config_mod.resolve(args.stage, table, "stage")
    if stage_key not in _SWEEP_STAGES:
        raise ConfigError(f"stage must be one of {sorted(_SWEEP_STAGES)}, got {stage_key!r}")
    grid_raw = config_mod.resolve(args.grid, table, "grid")
    if grid_raw is None:
        raise ConfigError("give --grid as comma-separated thresholds")
    grid = _parse_numbers(grid_raw, float) if isinstance(grid_raw, str) else tuple(float(g) for g in grid_raw)
    fixed = float(config_mod.resolve(args.fixed_other, table, "fixed_other", 0.5))
    keep = _on_off(config_mod.resolve(args.keep_initial, table, "keep_initial", "off"))
    records = _load_sweep_records(Path(args.records))
    rows = sweep(records, stage=_SWEEP_STAGES[stage_key], grid=grid, fixed_other=fixed, keep_initial=keep)
    print(format_sweep_table(rows))
    if args.csv:
        sweep_to_csv(rows, args.csv)
    return 0


def cmd_serve(args, table) -> int:
    root = resolve_data_root(config_mod.resolve(args.data, table, "data"))
    app = create_app(root)
    host = str(config_mod.resolve(args.host, table, "host", "127.0.0.1"))
    port = int(config_mod.resolve(args.port, table, "port", 8000))
    import uvicorn

    uvicorn.run(app, host=host, port=port)
    return 0


def cmd_export(args, table) -> int:
    root = resolve_data_root(config_mod.resolve(args.data, table, "data"))
    store = ReviewStore.from_workspace(root)
    allow_partial = bool(
        config_mod.resolve(args.allow_partial, table, "allow_partial", False)
    )
    result = export_dataset(
        store, args.out, split_spec=_split_spec(args, table), allow_partial=allow_partial
    )
    print(f"exported {result.num_pairs} accepted pairs; manifest {result.manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scd", description="Scene change detection toolkit"
    )
    parser.add_argument("--config", help="TOML or JSON config file with per-command sections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pair", help="build temporally separated pairs from retrieval results")
    p.add_argument("--database", required=True, help="image records JSON (probe side)")
    p.add_argument("--queries", required=True, help="image records JSON (query side)")
    p.add_argument("--retrievals", required=True, help="JSON {probe id: query id | [id, score]}")
    p.add_argument("--out", required=True, help="pair manifest to write")
    p.add_argument("--rejected", help="also write rejected candidates JSON")
    p.add_argument("--unique-queries", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(handler=cmd_pair)

    p = sub.add_parser("split", help="seeded train/val/test partition of a pair manifest")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True, help="split id-list JSON to write")
    p.add_argument("--counts", help="train,val,test sizes")
    p.add_argument("--fractions", help="train,val,test fractions")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("stats", help="review progress and per-class pair counts")
    p.add_argument("--data", help="annotation run directory (or SCD_DATA_ROOT)")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("annotate", help="run the pseudo-annotation pipeline over a pair manifest")
    p.add_argument("--pairs", required=True, help="pair manifest JSON")
    p.add_argument("--out", required=True, help="run directory (one workspace per pair)")
    p.add_argument("--workers", type=int)
    p.add_argument("--tau-cv", type=float, dest="tau_cv")
    p.add_argument("--min-overlap", type=int, dest="min_overlap")
    p.add_argument("--pause", type=float, help="seconds between captioner calls")
    p.add_argument("--resolution", type=int, help="resample images to this square size")
    p.add_argument("--adapters", help="dotted path module:factory returning the adapter suite")
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("refine", help="match candidate masks against an initial prediction")
    p.add_argument("--initial", required=True, help="initial binary mask PNG")
    p.add_argument("--inconsistent", help="instance-set manifest of tracker candidates")
    p.add_argument("--semantic", help="instance-set manifest of language-grounded candidates")
    p.add_argument("--alpha-t", type=float, dest="alpha_t")
    p.add_argument("--alpha-g", type=float, dest="alpha_g")
    p.add_argument("--keep-initial", choices=["on", "off"], dest="keep_initial")
    p.add_argument("--out", required=True, help="refined binary mask PNG")
    p.add_argument("--report", help="provenance report JSON")
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("train", help="train the change detector")
    p.add_argument("--dataset", required=True, help="training manifest JSON")
    p.add_argument("--val", help="validation manifest JSON (defaults to the training set)")
    p.add_argument("--classes", type=int, choices=[2, 4])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", required=True, help="output directory for checkpoints and trace")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score prediction masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of prediction PNGs")
    p.add_argument("--gt", required=True, help="directory of ground-truth PNGs")
    p.add_argument("--classes", type=int, choices=[2, 4])
    p.add_argument("--per-image", action=argparse.BooleanOptionalAction, default=None, dest="per_image")
    p.add_argument("--csv", help="write per-class scores as CSV")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", help="threshold sweep over the matching stage")
    p.add_argument("--records", required=True, help="directory of sweep record folders")
    p.add_argument("--stage", choices=sorted(_SWEEP_STAGES))
    p.add_argument("--grid", help="comma-separated thresholds")
    p.add_argument("--fixed-other", type=float, dest="fixed_other")
    p.add_argument("--keep-initial", choices=["on", "off"], dest="keep_initial")
    p.add_argument("--csv", help="write sweep rows as CSV")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("serve", help="run the review HTTP service")
    p.add_argument("--data", help="annotation run directory (or SCD_DATA_ROOT)")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("export", help="write the accepted pairs as a labeled dataset")
    p.add_argument("--data", help="annotation run directory (or SCD_DATA_ROOT)")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-partial", action=argparse.BooleanOptionalAction, default=None, dest="allow_partial")
    p.add_argument("--counts", help="train,val,test sizes for the manifest splits")
    p.add_argument("--fractions", help="train,val,test fractions for the manifest splits")
    p.add_argument("--seed", type=int, help="split shuffle seed")
    p.set_defaults(handler=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_config = config_mod.load_config(args.config) if args.config else {}
        table = config_mod.section(file_config, args.command)
        return args.handler(args, table)
    except ScdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
