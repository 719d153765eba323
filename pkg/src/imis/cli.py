"""Batch command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error. Machine-readable output
sits behind --json/--csv so scripts never scrape the human text. The
IMIS_DATA environment variable supplies the default dataset root.
"""
from __future__ import annotations

import argparse
import json
import os
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import granularity, ingest, interact, metrics, storage
from .maskcore import LabeledMask, MaskSource
from .proposer import (
    CandidateMask,
    ClassicalSegmenter,
    GenerationParams,
    OracleSegmenter,
    ProcessSegmenter,
    generate_interactive_masks,
)

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _dataset_arg(parser: _Parser) -> None:
    parser.add_argument(
        "dataset",
        nargs="?",
        default=os.environ.get("IMIS_DATA"),
        help="dataset directory (defaults to $IMIS_DATA)",
    )


def _require_dataset(args) -> Path:
    if not args.dataset:
        raise UsageError("no dataset given and IMIS_DATA is not set")
    return Path(args.dataset)


class UsageError(ValueError):
    pass


def build_parser() -> _Parser:
    parser = _Parser(prog="imis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("ingest", help="standardize a source dataset into canonical layout")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--synonyms", help="synonym table JSON ({raw: canonical})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude", help="JSON array of image ids to exclude")

    p = sub.add_parser("gen-masks", help="generate interactive masks over a dataset")
    _dataset_arg(p)
    p.add_argument("--segmenter", default="ref", help="ref, oracle, or proc:<command>")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--conf", type=float, default=0.85)
    p.add_argument("--nms", type=float, default=0.7)
    p.add_argument("--maxcover", type=float, default=0.8)
    p.add_argument("--tolerance", type=float, default=25.0, help="reference segmenter tolerance")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("qc", help="reconcile generated masks with GT and apply quality policy")
    _dataset_arg(p)
    p.add_argument("--flagged", help="JSON array of flagged dataset ids")
    p.add_argument("--fg-rate", type=float, default=0.005)
    p.add_argument("--overlap", type=float, default=0.95)
    p.add_argument("--overlap-mode", choices=["iou", "over_gt"], default="iou")
    p.add_argument("--policy-mode", choices=["per_mask", "dataset_rate"], default="per_mask")
    p.add_argument("--clean-radius", type=int, default=1)

    p = sub.add_parser("stats", help="dataset statistics")
    _dataset_arg(p)
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true")
    fmt.add_argument("--csv", action="store_true", help="write histogram CSVs next to the manifest")

    p = sub.add_parser("simulate", help="run simulated interaction sessions or a protocol sweep")
    _dataset_arg(p)
    p.add_argument(
        "--strategy",
        default="click",
        choices=["click", "box", "text", "text+click", "box+click"],
    )
    p.add_argument("--rounds", type=int, default=8)
    p.add_argument("--jitter", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--segmenter", default="ref", help="ref, oracle, or proc:<command>")
    p.add_argument(
        "--protocol",
        choices=["interaction_count", "click_position", "bbox_offset"],
        help="run a robustness sweep instead of plain sessions",
    )
    p.add_argument("--out", help="output path (records JSONL or sweep report JSON)")

    p = sub.add_parser("eval", help="aggregate recorded session scores")
    _dataset_arg(p)
    p.add_argument("--group-by", choices=["modality", "anatomy", "strategy", "dataset"])
    p.add_argument("--records", help="records JSONL (default <dataset>/eval_records.jsonl)")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("serve", help="run the interactive session HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--data", default=os.environ.get("IMIS_DATA"), help="dataset dir for category table")
    p.add_argument("--frontend", help="static UI bundle directory to serve at /")
    return parser


def _make_segmenter(spec: str, tolerance: float):
    """Segmenter factory: returns callable(image, gt_targets) -> Segmenter."""
    if spec == "ref":
        seg = ClassicalSegmenter(tolerance=tolerance)
        return lambda image, targets: seg
    if spec == "oracle":
        return lambda image, targets: OracleSegmenter(targets)
    if spec.startswith("proc:"):
        proc = ProcessSegmenter(shlex.split(spec[len("proc:") :]))
        return lambda image, targets: proc
    raise UsageError(f"unknown segmenter {spec!r} (expected ref, oracle, or proc:<command>)")


def cmd_ingest(args) -> int:
    table = ingest.SynonymTable.load(args.synonyms) if args.synonyms else ingest.SynonymTable()
    excluded = frozenset(json.loads(Path(args.exclude).read_text())) if args.exclude else frozenset()
    cfg = ingest.IngestConfig(seed=args.seed, excluded_ids=excluded)
    report = ingest.ingest_dataset(args.src, args.dst, cfg, table)
    print(report.to_json())
    return 0


def cmd_gen_masks(args) -> int:
    dataset = _require_dataset(args)
    manifest = storage.read_manifest(dataset / "manifest.json")
    factory = _make_segmenter(args.segmenter, args.tolerance)
    params = GenerationParams(args.grid, args.conf, args.nms, args.maxcover)

    def work(rec):
        image = storage.read_image(dataset / rec.image_path)
        container = storage.read_container(dataset / rec.mask_path)
        gt = [lm for lm in container.labeled_masks() if lm.source is MaskSource.GROUND_TRUTH]
        segmenter = factory(image, gt)
        result = generate_interactive_masks(image, segmenter, params)
        # regeneration replaces every existing interactive entry
        kept = gt + [LabeledMask(c.mask, 0, MaskSource.INTERACTIVE) for c in result.masks]
        storage.write_container(
            dataset / rec.mask_path,
            storage.MaskContainer.from_masks(container.height, container.width, kept),
        )
        return rec.id, len(result.masks), len(result.points_failed)

    with ThreadPoolExecutor(max_workers=max(args.threads, 1)) as pool:
        rows = list(pool.map(work, manifest.images))
    summary = {
        "dataset": manifest.name,
        "images": len(rows),
        "interactive_masks": sum(r[1] for r in rows),
        "failed_points": sum(r[2] for r in rows),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_qc(args) -> int:
    dataset = _require_dataset(args)
    datasets = granularity.discover_datasets(dataset)
    corrected = 0
    for name, ds_dir in datasets.items():
        manifest = storage.read_manifest(ds_dir / "manifest.json")
        for rec in manifest.images:
            container = storage.read_container(ds_dir / rec.mask_path)
            masks = container.labeled_masks()
            gt = [lm for lm in masks if lm.source is MaskSource.GROUND_TRUTH]
            gen = [lm for lm in masks if lm.source is MaskSource.INTERACTIVE]
            if not gen and not gt:
                continue
            fixed = granularity.correct_with_gt(
                [CandidateMask(lm.mask, 1.0) for lm in gen],
                gt,
                overlap_threshold=args.overlap,
                overlap_mode=args.overlap_mode,
                clean_radius=args.clean_radius,
            )
            storage.write_container(
                ds_dir / rec.mask_path,
                storage.MaskContainer.from_masks(container.height, container.width, gt + fixed),
            )
            corrected += len(fixed)
    flagged = json.loads(Path(args.flagged).read_text()) if args.flagged else []
    report = granularity.apply_quality_policy(
        dataset, flagged, min_fg_rate=args.fg_rate, mode=args.policy_mode
    )
    print(json.dumps({"corrected_masks": corrected, "policy": json.loads(report.to_json())},
                     indent=2, sort_keys=True))
    return 0


def cmd_stats(args) -> int:
    dataset = _require_dataset(args)
    stats = metrics.dataset_stats(dataset)
    if args.json:
        print(json.dumps(stats, indent=2, sort_keys=True))
    elif args.csv:
        for name, text in metrics.stats_to_csvs(stats).items():
            path = dataset / name
            path.write_text(text, encoding="utf-8")
            print(path)
    else:
        print(metrics.stats_to_text(stats), end="")
    return 0


def cmd_simulate(args) -> int:
    dataset = _require_dataset(args)
    factory = _make_segmenter(args.segmenter, tolerance=25.0)
    manifest = storage.read_manifest(dataset / "manifest.json")

    if args.protocol:
        sweep_seg = _FactorySegmenter(factory, dataset)
        report = interact.robustness_sweep(dataset, sweep_seg, args.protocol, seed=args.seed)
        out = Path(args.out) if args.out else dataset / f"sweep_{args.protocol}.json"
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0

    strategy = interact.InteractionStrategy(
        initial=args.strategy, rounds=args.rounds, jitter=args.jitter
    )
    records = []
    for rec in manifest.images:
        image = storage.read_image(dataset / rec.image_path)
        container = storage.read_container(dataset / rec.mask_path)
        targets = [
            lm
            for lm in container.labeled_masks()
            if lm.source is MaskSource.GROUND_TRUTH and not lm.mask.is_empty()
        ]
        segmenter = factory(image, targets)
        for t_index, target in enumerate(targets):
            rng = interact.session_rng(args.seed, rec.id, t_index)
            session = interact.run_session(image, target, segmenter, strategy, rng)
            category = manifest.categories.get(target.category_id, "")
            records.append(
                metrics.EvalRecord(
                    dataset_id=manifest.name,
                    image_id=rec.id,
                    category=category,
                    modality=manifest.modality,
                    anatomy=metrics.anatomy_group_for(category),
                    strategy=args.strategy,
                    dice=session.final_dice,
                )
            )
    out = Path(args.out) if args.out else dataset / "eval_records.jsonl"
    out.write_text(metrics.records_to_jsonl(records), encoding="utf-8")
    summary = metrics.aggregate(records)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


class _FactorySegmenter:
    """Adapts a per-image segmenter factory to the single-segmenter sweep API."""

    def __init__(self, factory, dataset_dir: Path):
        self.factory = factory
        self.pairs = []
        manifest = storage.read_manifest(dataset_dir / "manifest.json")
        for rec in manifest.images:
            image = storage.read_image(dataset_dir / rec.image_path)
            targets = [
                lm
                for lm in storage.read_container(dataset_dir / rec.mask_path).labeled_masks()
                if lm.source is MaskSource.GROUND_TRUTH
            ]
            self.pairs.append((image, factory(image, targets)))

    def predict(self, image, prompts, *, seed=None):
        for img, seg in self.pairs:
            if img == image:
                return seg.predict(image, prompts, seed=seed)
        raise ValueError("image does not belong to the sweep dataset")


def cmd_eval(args) -> int:
    dataset = _require_dataset(args)
    records_path = Path(args.records) if args.records else dataset / "eval_records.jsonl"
    if not records_path.exists():
        raise FileNotFoundError(f"no records at {records_path}; run `imis simulate` first")
    records = metrics.records_from_jsonl(records_path.read_text(encoding="utf-8"))
    report = metrics.aggregate(records, group_by=args.group_by)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        overall = report["overall"]
        print(f"records: {overall['n_records']}  images: {overall['n_images']}")
        print(f"mask-level dice:  {overall['mask_level']:.4f}")
        print(f"image-level dice: {overall['image_level']:.4f}")
        for name, g in (report.get("groups") or {}).items():
            print(f"  {name}: mask {g['mask_level']:.4f}  image {g['image_level']:.4f}  n={g['n_records']}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        data_dir=Path(args.data) if args.data else None,
        frontend_dir=Path(args.frontend) if args.frontend else None,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "gen-masks": cmd_gen_masks,
    "qc": cmd_qc,
    "stats": cmd_stats,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"imis: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (
        FileNotFoundError,
        KeyError,
        ValueError,
        ingest.IngestError,
        storage.ContainerFormatError,
        json.JSONDecodeError,
    ) as exc:
        print(f"imis: data error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
