"""Dataset standardization: turn heterogeneous sources into the canonical
layout, applying exclusion filters, category naming harmonization,
multi-component relabeling, and the train/test split policy.

Two source layouts are accepted:

  raw        dataset.json {"name", "modality", "labels": {value: raw name}}
             plus images/<id>.png and labels/<id>.png (integer label rasters)
  canonical  a dataset directory with manifest.json (re-ingesting the
             pipeline's own output is a no-op, which makes ingest idempotent)
"""
from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import storage
from .maskcore import ImageGrid, BinaryMask, LabeledMask, MaskSource, connected_components, foreground_fraction

MAX_ASPECT_RATIO = 1.5
MIN_FOREGROUND_FRACTION = 0.001
TRAIN_FRACTION = 0.9
TEST_CAP = 3000

_WHITESPACE = re.compile(r"\s+")


class IngestError(RuntimeError):
    """Unreadable or structurally inconsistent source data."""


def normalize_name(raw: str) -> str:
    """Case-folded, whitespace-collapsed form used for category lookups."""
    return _WHITESPACE.sub(" ", raw.strip()).casefold()


@dataclass
class SynonymTable:
    """Raw-to-canonical category mapping plus instance-separability flags."""

    mapping: dict[str, str] = field(default_factory=dict)
    separable: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        self.mapping = {normalize_name(k): normalize_name(v) for k, v in self.mapping.items()}
        self.separable = {normalize_name(s) for s in self.separable}

    @classmethod
    def load(cls, path: str | Path) -> "SynonymTable":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if "synonyms" in doc:
            return cls(doc["synonyms"], set(doc.get("separable", [])))
        return cls(doc)

    def canonicalize(self, raw: str) -> str | None:
        """Canonical name, or None when the raw name does not resolve.

        Canonical names resolve to themselves, so re-ingesting canonical
        output needs no extra table entries.
        """
        key = normalize_name(raw)
        if key in self.mapping:
            return self.mapping[key]
        if key in self.mapping.values():
            return key
        return None

    def is_separable(self, canonical: str) -> bool:
        return normalize_name(canonical) in self.separable


def canonicalize_category(raw: str, table: SynonymTable) -> str | None:
    return table.canonicalize(raw)


@dataclass(frozen=True)
class IngestConfig:
    max_aspect_ratio: float = MAX_ASPECT_RATIO
    min_foreground_fraction: float = MIN_FOREGROUND_FRACTION
    train_fraction: float = TRAIN_FRACTION
    test_cap: int = TEST_CAP
    seed: int = 0
    excluded_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.max_aspect_ratio <= 0 or self.min_foreground_fraction <= 0:
            raise ValueError("thresholds must be positive")


def filter_aspect_ratio(image: ImageGrid, cfg: IngestConfig = IngestConfig()) -> str | None:
    """Drop reason when max(h,w)/min(h,w) is strictly above the limit, else None."""
    ratio = max(image.height, image.width) / min(image.height, image.width)
    if ratio > cfg.max_aspect_ratio:
        return f"aspect_ratio {ratio:.4f} > {cfg.max_aspect_ratio}"
    return None


def filter_foreground(mask: BinaryMask, cfg: IngestConfig = IngestConfig()) -> str | None:
    """Drop reason when the foreground fraction is strictly below the limit."""
    fraction = foreground_fraction(mask)
    if fraction < cfg.min_foreground_fraction:
        return f"foreground_fraction {fraction:.6f} < {cfg.min_foreground_fraction}"
    return None


def split_multicomponent_gt(lm: LabeledMask, separable: bool) -> list[LabeledMask]:
    """Per-component instances for separable categories; pass-through otherwise."""
    if lm.source is not MaskSource.GROUND_TRUTH:
        raise ValueError("component splitting applies to ground-truth masks")
    if not separable:
        return [lm]
    comps = connected_components(lm.mask)
    if len(comps) <= 1:
        return [lm]
    return [
        LabeledMask(c, lm.category_id, lm.source, instance=i + 1) for i, c in enumerate(comps)
    ]


def assign_splits(manifest: storage.Manifest, cfg: IngestConfig = IngestConfig()) -> storage.Manifest:
    """Deterministic per-dataset split: shuffle by seed, floor(train_fraction)
    to train, remainder to test, test truncated to test_cap with the overflow
    returned to train."""
    ids = sorted(r.id for r in manifest.images)
    rng = random.Random(cfg.seed)
    rng.shuffle(ids)
    n_train = int(len(ids) * cfg.train_fraction)
    test_ids = set(ids[n_train:][: cfg.test_cap])
    images = [replace(r, split="test" if r.id in test_ids else "train") for r in manifest.images]
    return storage.Manifest(manifest.name, manifest.modality, dict(manifest.categories), images)


@dataclass
class IngestReport:
    images_in: int = 0
    images_kept: int = 0
    image_drops: dict[str, int] = field(default_factory=dict)
    masks_in: int = 0
    masks_kept: int = 0
    mask_drops: dict[str, int] = field(default_factory=dict)
    masks_out: int = 0  # kept masks after instance splitting
    unresolved: set[str] = field(default_factory=set)
    drops: list[dict] = field(default_factory=list)

    def drop_image(self, image_id: str, reason: str, detail: str = "") -> None:
        key = reason.split(" ")[0]
        self.image_drops[key] = self.image_drops.get(key, 0) + 1
        self.drops.append({"image": image_id, "kind": "image", "reason": reason, "detail": detail})

    def drop_mask(self, image_id: str, reason: str, detail: str = "") -> None:
        key = reason.split(" ")[0]
        self.mask_drops[key] = self.mask_drops.get(key, 0) + 1
        self.drops.append({"image": image_id, "kind": "mask", "reason": reason, "detail": detail})

    def conserved(self) -> bool:
        return (
            self.images_in == self.images_kept + sum(self.image_drops.values())
            and self.masks_in == self.masks_kept + sum(self.mask_drops.values())
        )

    def to_json(self) -> str:
        doc = {
            "images": {"input": self.images_in, "kept": self.images_kept,
                       "dropped": dict(sorted(self.image_drops.items()))},
            "masks": {"input": self.masks_in, "kept": self.masks_kept,
                      "output": self.masks_out,
                      "dropped": dict(sorted(self.mask_drops.items()))},
            "unresolved_categories": sorted(self.unresolved),
            "drops": self.drops,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _load_raw_source(source_root: Path):
    """Yield (image id, ImageGrid, [(raw category name, BinaryMask, source)])."""
    meta = json.loads((source_root / "dataset.json").read_text(encoding="utf-8"))
    labels = {int(k): v for k, v in meta.get("labels", {}).items()}
    image_dir = source_root / "images"
    label_dir = source_root / "labels"
    entries = []
    for image_path in sorted(image_dir.glob("*.png")):
        image_id = image_path.stem
        try:
            image = storage.read_image(image_path)
        except Exception as exc:
            raise IngestError(f"unreadable image {image_path}: {exc}") from exc
        label_path = label_dir / f"{image_id}.png"
        masks: list[tuple[str, BinaryMask, MaskSource]] = []
        if label_path.exists():
            label_map = storage.read_label_map(label_path)
            if label_map.shape != (image.height, image.width):
                raise IngestError(
                    f"label raster {label_path} is {label_map.shape}, image is "
                    f"{(image.height, image.width)}"
                )
            for lm in storage.one_hot_split(label_map):
                raw_name = labels.get(lm.category_id, f"label {lm.category_id}")
                masks.append((raw_name, lm.mask, MaskSource.GROUND_TRUTH))
        entries.append((image_id, image, masks))
    return meta.get("name", source_root.name), meta.get("modality", "unknown"), entries


def _load_canonical_source(source_root: Path):
    manifest = storage.read_manifest(source_root / "manifest.json")
    entries = []
    for rec in manifest.images:
        image = storage.read_image(source_root / rec.image_path)
        container = storage.read_container(source_root / rec.mask_path)
        masks = []
        for lm in container.labeled_masks():
            # category 0 = uncategorized interactive; carries no name
            name = manifest.categories.get(lm.category_id)
            masks.append((name, lm.mask, lm.source))
        entries.append((rec.id, image, masks))
    return manifest.name, manifest.modality, entries


def ingest_dataset(
    source_root: str | Path,
    dest_root: str | Path,
    cfg: IngestConfig = IngestConfig(),
    table: SynonymTable | None = None,
) -> IngestReport:
    """Standardize one source dataset into the canonical layout at dest_root.

    Every exclusion is recorded with its reason; unresolved category names
    are reported and their masks dropped rather than silently passed through.
    """
    source_root, dest_root = Path(source_root), Path(dest_root)
    table = table or SynonymTable()
    if (source_root / "manifest.json").exists():
        name, modality, entries = _load_canonical_source(source_root)
    elif (source_root / "dataset.json").exists():
        name, modality, entries = _load_raw_source(source_root)
    else:
        raise IngestError(f"{source_root} has neither dataset.json nor manifest.json")

    report = IngestReport()
    kept: list[tuple[str, ImageGrid, list[tuple[str, BinaryMask, MaskSource]]]] = []
    canonical_names: set[str] = set()

    for image_id, image, masks in sorted(entries, key=lambda e: e[0]):
        report.images_in += 1
        report.masks_in += len(masks)
        if image_id in cfg.excluded_ids:
            report.drop_image(image_id, "excluded", "listed in exclusion hook")
            for _ in masks:
                report.drop_mask(image_id, "image_dropped excluded")
            continue
        reason = filter_aspect_ratio(image, cfg)
        if reason is not None:
            report.drop_image(image_id, reason)
            for _ in masks:
                report.drop_mask(image_id, "image_dropped " + reason)
            continue
        kept_masks = []
        for raw_name, mask, source in masks:
            if source is MaskSource.GROUND_TRUTH or raw_name is not None:
                canonical = canonicalize_category(raw_name or "", table)
                if canonical is None:
                    report.unresolved.add(raw_name or "")
                    report.drop_mask(image_id, "unresolved_category", raw_name or "")
                    continue
            else:
                canonical = None  # uncategorized interactive mask
            reason = filter_foreground(mask, cfg)
            if reason is not None:
                report.drop_mask(image_id, reason, raw_name)
                continue
            report.masks_kept += 1
            if canonical is not None:
                canonical_names.add(canonical)
            kept_masks.append((canonical, mask, source))
        report.images_kept += 1
        kept.append((image_id, image, kept_masks))

    category_ids = {cname: i + 1 for i, cname in enumerate(sorted(canonical_names))}

    (dest_root / "images").mkdir(parents=True, exist_ok=True)
    (dest_root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, image, masks in kept:
        labeled: list[LabeledMask] = []
        for canonical, mask, source in masks:
            category_id = category_ids[canonical] if canonical is not None else 0
            if source is MaskSource.GROUND_TRUTH:
                lm = LabeledMask(mask, category_id, source)
                labeled.extend(split_multicomponent_gt(lm, table.is_separable(canonical)))
            else:
                labeled.append(LabeledMask(mask, category_id, source))
        report.masks_out += len(labeled)
        storage.write_image(dest_root / "images" / f"{image_id}.png", image)
        storage.write_container(
            dest_root / "masks" / f"{image_id}.imsk",
            storage.MaskContainer.from_masks(image.height, image.width, labeled),
        )
        records.append(
            storage.ImageRecord(
                image_id, f"images/{image_id}.png", f"masks/{image_id}.imsk"
            )
        )

    manifest = storage.Manifest(name, modality, {v: k for k, v in category_ids.items()}, records)
    manifest = assign_splits(manifest, cfg)
    storage.write_manifest(dest_root / "manifest.json", manifest)
    (dest_root / "ingest_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return report
