"""Quality control and granularity management.

Generated candidate masks are reconciled against ground truth: multi-part GT
annotations replace whatever was generated over their extent, single-part GT
regions either adopt a box-matched generated region or are inserted verbatim,
and a foreground-rate policy prunes low-coverage interactive masks inside
reviewer-flagged dataset subsets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage

from . import storage
from .maskcore import (
    BBox,
    BinaryMask,
    LabeledMask,
    MaskSource,
    bbox_of,
    connected_components,
    morph_clean,
)
from .proposer import CandidateMask

BOX_OVERLAP_THRESHOLD = 0.95
MIN_FOREGROUND_RATE = 0.005

OverlapMode = Literal["iou", "over_gt"]
PolicyMode = Literal["per_mask", "dataset_rate"]


def box_overlap_ratio(a: BBox, b: BBox, mode: OverlapMode = "iou") -> float:
    """Overlap of two inclusive boxes treated as pixel sets.

    mode "iou" is intersection over union; "over_gt" divides by the area of
    the second box (the GT side) instead.
    """
    rmin, cmin = max(a.row_min, b.row_min), max(a.col_min, b.col_min)
    rmax, cmax = min(a.row_max, b.row_max), min(a.col_max, b.col_max)
    if rmin > rmax or cmin > cmax:
        return 0.0
    inter = (rmax - rmin + 1) * (cmax - cmin + 1)
    denom = b.area if mode == "over_gt" else a.area + b.area - inter
    return inter / denom


def _component_count(mask: BinaryMask) -> int:
    _, n = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=bool))
    return n


def _gt_order(gt: Sequence[LabeledMask]) -> list[LabeledMask]:
    """Deterministic processing order: category id, then first foreground pixel."""

    def key(lm: LabeledMask):
        first = int(np.flatnonzero(lm.mask.bits.ravel())[0])
        return (lm.category_id, lm.instance, first)

    return sorted((lm for lm in gt if not lm.mask.is_empty()), key=key)


def correct_with_gt(
    generated: Sequence[CandidateMask],
    gt: Sequence[LabeledMask],
    *,
    overlap_threshold: float = BOX_OVERLAP_THRESHOLD,
    overlap_mode: OverlapMode = "iou",
    clean_radius: int = 1,
) -> list[LabeledMask]:
    """Reconcile generated masks with ground truth.

    Rule 1: every GT mask with two or more connected components erases the
    generated content inside its bounding box and is inserted verbatim.
    Rule 2: for each single-component GT mask, a generated region (connected
    component of a generated mask) whose bounding box overlaps the GT box by
    strictly more than overlap_threshold is adopted and tagged with the GT
    category; with no such region the GT mask is inserted verbatim. Ties go
    to the higher overlap, then the larger region.

    Untouched generated content passes through uncategorized. All outputs are
    morphologically cleaned except those pixel-identical to a GT mask, which
    stay verbatim. Inserted copies are tagged as interactive: they join the
    interactive pool, the GT entries they mirror are kept separately.
    """
    shapes = {c.mask.shape for c in generated} | {g.mask.shape for g in gt}
    if len(shapes) > 1:
        raise ValueError(f"masks must share one dimension, got {sorted(shapes)}")

    ordered = _gt_order(gt)
    multi = [g for g in ordered if _component_count(g.mask) >= 2]
    single = [g for g in ordered if _component_count(g.mask) == 1]

    gen_bits = [c.mask.bits.copy() for c in generated]
    outputs: list[LabeledMask] = []

    for g in multi:
        b = bbox_of(g.mask)
        for bits in gen_bits:
            bits[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1] = False
        outputs.append(LabeledMask(g.mask, g.category_id, MaskSource.INTERACTIVE))

    regions: list[tuple[int, BinaryMask, BBox]] = []
    for gi, bits in enumerate(gen_bits):
        for comp in connected_components(BinaryMask(bits)):
            regions.append((gi, comp, bbox_of(comp)))

    claimed: set[int] = set()
    for g in single:
        gbox = bbox_of(g.mask)
        best: int | None = None
        best_key = (0.0, 0)
        for ri, (_, comp, rbox) in enumerate(regions):
            if ri in claimed:
                continue
            ratio = box_overlap_ratio(rbox, gbox, overlap_mode)
            if ratio > overlap_threshold and (ratio, comp.foreground_count) > best_key:
                best, best_key = ri, (ratio, comp.foreground_count)
        if best is None:
            outputs.append(LabeledMask(g.mask, g.category_id, MaskSource.INTERACTIVE))
        else:
            claimed.add(best)
            outputs.append(LabeledMask(regions[best][1], g.category_id, MaskSource.INTERACTIVE))

    for gi in range(len(gen_bits)):
        rest = np.zeros_like(gen_bits[gi])
        keep_any = False
        for ri, (owner, comp, _) in enumerate(regions):
            if owner == gi and ri not in claimed:
                rest |= comp.bits
                keep_any = True
        if keep_any:
            outputs.append(LabeledMask(BinaryMask(rest), 0, MaskSource.INTERACTIVE))

    gt_pixels = {g.mask.bits.tobytes() for g in gt}
    final: list[LabeledMask] = []
    for lm in outputs:
        if lm.mask.bits.tobytes() in gt_pixels:
            final.append(lm)
            continue
        cleaned = morph_clean(lm.mask, clean_radius)
        if not cleaned.is_empty():
            final.append(LabeledMask(cleaned, lm.category_id, lm.source, lm.instance))
    return final


@dataclass
class QualityReport:
    """Per-dataset drop accounting for the foreground-rate policy."""

    min_fg_rate: float
    mode: PolicyMode
    flagged: list[str] = field(default_factory=list)
    datasets: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "min_fg_rate": self.min_fg_rate,
                "mode": self.mode,
                "flagged": sorted(self.flagged),
                "datasets": {k: self.datasets[k] for k in sorted(self.datasets)},
            },
            indent=2,
            sort_keys=True,
        )


def _entry_fraction(entry: storage.MaskEntry, height: int, width: int) -> float:
    return int(entry.row_ptr[-1]) / (height * width)


def discover_datasets(root: str | Path) -> dict[str, Path]:
    """Map dataset name -> directory for a dataset dir or a collection of them."""
    root = Path(root)
    if (root / "manifest.json").exists():
        m = storage.read_manifest(root / "manifest.json")
        return {m.name: root}
    found = {}
    for sub in sorted(root.iterdir()) if root.is_dir() else []:
        if (sub / "manifest.json").exists():
            m = storage.read_manifest(sub / "manifest.json")
            found[m.name] = sub
    if not found:
        raise ValueError(f"no dataset manifest found under {root}")
    return found


def apply_quality_policy(
    root: str | Path,
    flagged_subset_ids: Sequence[str],
    min_fg_rate: float = MIN_FOREGROUND_RATE,
    mode: PolicyMode = "per_mask",
) -> QualityReport:
    """Prune low-coverage interactive masks inside flagged dataset subsets.

    In "per_mask" mode an interactive mask is dropped iff its foreground
    fraction is strictly below min_fg_rate. In "dataset_rate" mode the
    lowest-coverage floor(min_fg_rate * n) interactive masks of the subset
    are dropped. Ground-truth masks are never touched; unflagged subsets are
    left untouched. Containers are rewritten in place.
    """
    datasets = discover_datasets(root)
    unknown = [f for f in flagged_subset_ids if f not in datasets]
    if unknown:
        raise KeyError(f"flagged subset ids not present: {unknown} (have {sorted(datasets)})")

    report = QualityReport(min_fg_rate=min_fg_rate, mode=mode, flagged=list(flagged_subset_ids))
    for name, ds_dir in datasets.items():
        manifest = storage.read_manifest(ds_dir / "manifest.json")
        stats = {"interactive_before": 0, "interactive_dropped": 0, "gt": 0}
        if name not in flagged_subset_ids:
            for rec in manifest.images:
                c = storage.read_container(ds_dir / rec.mask_path)
                for e in c.entries:
                    if e.source is MaskSource.GROUND_TRUTH:
                        stats["gt"] += 1
                    else:
                        stats["interactive_before"] += 1
            report.datasets[name] = stats
            continue

        containers = {}
        interactive: list[tuple[str, int, float]] = []  # (image id, entry idx, fraction)
        for rec in manifest.images:
            c = storage.read_container(ds_dir / rec.mask_path)
            containers[rec.id] = (rec, c)
            for i, e in enumerate(c.entries):
                if e.source is MaskSource.GROUND_TRUTH:
                    stats["gt"] += 1
                else:
                    stats["interactive_before"] += 1
                    interactive.append((rec.id, i, _entry_fraction(e, c.height, c.width)))

        if mode == "per_mask":
            doomed = {(rid, i) for rid, i, frac in interactive if frac < min_fg_rate}
        else:
            n_drop = int(np.floor(min_fg_rate * len(interactive)))
            ranked = sorted(interactive, key=lambda t: (t[2], t[0], t[1]))
            doomed = {(rid, i) for rid, i, _ in ranked[:n_drop]}

        for rec, c in containers.values():
            kept = [
                e
                for i, e in enumerate(c.entries)
                if e.source is MaskSource.GROUND_TRUTH or (rec.id, i) not in doomed
            ]
            if len(kept) != len(c.entries):
                storage.write_container(
                    ds_dir / rec.mask_path, storage.MaskContainer(c.height, c.width, kept)
                )
        stats["interactive_dropped"] = len(doomed)
        report.datasets[name] = stats
    return report
