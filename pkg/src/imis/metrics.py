"""Loss functions, score aggregation, and dataset statistics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import storage
from .maskcore import BinaryMask, MaskSource

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
FOCAL_DICE_RATIO = 20.0  # focal-to-dice weighting of the combined loss
DICE_SMOOTHING = 1.0
PROB_EPS = 1e-7

ANATOMY_GROUPS = ("Head&Neck", "Thorax", "Skeleton", "Abdomen", "Pelvis", "Lesions")

# Fig-2(c)-style resolution buckets by pixel count, and log-spaced coverage bins.
RESOLUTION_BUCKETS = (
    ("below_256sq", 0, 256 * 256),
    ("256sq_to_1024sq", 256 * 256, 1024 * 1024 + 1),
    ("above_1024sq", 1024 * 1024 + 1, None),
)
COVERAGE_EDGES = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel probabilities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("probability map must be 2-D")
        if not np.all(np.isfinite(a)):
            raise ValueError("probability map contains non-finite values")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "values", a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


def _check_dims(p: ProbMap, target: BinaryMask) -> None:
    if p.shape != target.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {target.shape}")


def focal_loss(
    p: ProbMap, target: BinaryMask, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA
) -> float:
    """Mean focal loss: -alpha * (1 - p_t)^gamma * log(p_t), p_t = p on
    foreground and 1-p on background. Probabilities are clamped away from
    0 and 1 so the perfect prediction scores ~0 instead of -0*inf."""
    _check_dims(p, target)
    pv = np.clip(p.values, PROB_EPS, 1.0 - PROB_EPS)
    p_t = np.where(target.bits, pv, 1.0 - pv)
    return float(np.mean(-alpha * (1.0 - p_t) ** gamma * np.log(p_t)))


def dice_loss(p: ProbMap, target: BinaryMask, smoothing: float = DICE_SMOOTHING) -> float:
    """Soft-Dice loss 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)."""
    _check_dims(p, target)
    t = target.bits.astype(np.float64)
    inter = float((p.values * t).sum())
    denom = float(p.values.sum() + t.sum())
    return 1.0 - (2.0 * inter + smoothing) / (denom + smoothing)


def combined_loss(p: ProbMap, target: BinaryMask) -> float:
    """Focal and Dice losses combined with fixed 20:1 weights."""
    return FOCAL_DICE_RATIO * focal_loss(p, target) + dice_loss(p, target)


@lru_cache(maxsize=1)
def anatomy_table() -> dict[str, str]:
    text = resources.files("imis").joinpath("anatomy_groups.json").read_text("utf-8")
    return json.loads(text)


def anatomy_group_for(category_name: str) -> str:
    """Anatomy group for a canonical category name; 'unknown' when unmapped."""
    return anatomy_table().get(category_name.strip().lower(), "unknown")


@dataclass(frozen=True)
class EvalRecord:
    dataset_id: str
    image_id: str
    category: str
    modality: str
    anatomy: str
    strategy: str
    dice: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError("dice must lie in [0, 1]")


def aggregate(records: Sequence[EvalRecord], group_by: str | None = None) -> dict:
    """Two-level score aggregation.

    mask level = mean over all records; image level = mean over per-image
    means (an image is identified by dataset id + image id). group_by may be
    one of "modality", "anatomy", "strategy", "dataset"; empty groups are
    simply absent from the report.
    """
    def field_of(r: EvalRecord) -> str:
        if group_by == "modality":
            return r.modality
        if group_by == "anatomy":
            return r.anatomy
        if group_by == "strategy":
            return r.strategy
        if group_by == "dataset":
            return r.dataset_id
        raise ValueError(f"unknown group_by {group_by!r}")

    def summarize(rs: Sequence[EvalRecord]) -> dict:
        by_image: dict[tuple[str, str], list[float]] = {}
        for r in rs:
            by_image.setdefault((r.dataset_id, r.image_id), []).append(r.dice)
        image_means = [float(np.mean(v)) for v in by_image.values()]
        return {
            "mask_level": float(np.mean([r.dice for r in rs])),
            "image_level": float(np.mean(image_means)),
            "n_records": len(rs),
            "n_images": len(by_image),
        }

    report: dict = {"group_by": group_by, "overall": summarize(records) if records else None}
    if group_by is not None:
        grouped: dict[str, list[EvalRecord]] = {}
        for r in records:
            grouped.setdefault(field_of(r), []).append(r)
        report["groups"] = {k: summarize(v) for k, v in sorted(grouped.items())}
    return report


def records_to_jsonl(records: Sequence[EvalRecord]) -> str:
    return "".join(json.dumps(r.__dict__, sort_keys=True) + "\n" for r in records)


def records_from_jsonl(text: str) -> list[EvalRecord]:
    return [EvalRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]


def _resolution_bucket(pixels: int) -> str:
    for name, lo, hi in RESOLUTION_BUCKETS:
        if pixels >= lo and (hi is None or pixels < hi):
            return name
    raise AssertionError("buckets cover all sizes")


def coverage_bucket_names() -> list[str]:
    names = [f"[{lo:g},{hi:g})" for lo, hi in zip(COVERAGE_EDGES, COVERAGE_EDGES[1:])]
    names[-1] = f"[{COVERAGE_EDGES[-2]:g},1]"  # top bin is closed at 1.0
    return names


def _coverage_bucket(fraction: float) -> str:
    names = coverage_bucket_names()
    for i, (lo, hi) in enumerate(zip(COVERAGE_EDGES, COVERAGE_EDGES[1:])):
        if lo <= fraction < hi:
            return names[i]
    return names[-1]  # fraction == 1.0


def dataset_stats(dataset_dir: str | Path) -> dict:
    """Dataset shape report: mask density, resolution and coverage histograms,
    and ground-truth vs interactive counts."""
    dataset_dir = Path(dataset_dir)
    manifest = storage.read_manifest(dataset_dir / "manifest.json")
    masks_per_image: list[int] = []
    resolution_hist = {name: 0 for name, _, _ in RESOLUTION_BUCKETS}
    exact_resolutions: dict[str, int] = {}
    coverage_hist = {name: 0 for name in coverage_bucket_names()}
    n_gt = n_interactive = 0
    for rec in manifest.images:
        image = storage.read_image(dataset_dir / rec.image_path)
        container = storage.read_container(dataset_dir / rec.mask_path)
        masks_per_image.append(len(container.entries))
        resolution_hist[_resolution_bucket(image.height * image.width)] += 1
        key = f"{image.height}x{image.width}"
        exact_resolutions[key] = exact_resolutions.get(key, 0) + 1
        for entry in container.entries:
            if entry.source is MaskSource.GROUND_TRUTH:
                n_gt += 1
            else:
                n_interactive += 1
            frac = int(entry.row_ptr[-1]) / (container.height * container.width)
            coverage_hist[_coverage_bucket(frac)] += 1
    return {
        "dataset": manifest.name,
        "modality": manifest.modality,
        "n_images": len(manifest.images),
        "n_masks": n_gt + n_interactive,
        "n_gt": n_gt,
        "n_interactive": n_interactive,
        "masks_per_image_mean": float(np.mean(masks_per_image)) if masks_per_image else 0.0,
        "resolution_histogram": resolution_hist,
        "exact_resolutions": dict(sorted(exact_resolutions.items())),
        "coverage_histogram": coverage_hist,
    }


def stats_to_csvs(stats: dict) -> dict[str, str]:
    """Histogram CSVs for external plotting, keyed by file name."""
    out: dict[str, str] = {}
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["bucket", "images"])
    for name, count in stats["resolution_histogram"].items():
        w.writerow([name, count])
    out["resolution_histogram.csv"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["coverage", "masks"])
    for name, count in stats["coverage_histogram"].items():
        w.writerow([name, count])
    out["coverage_histogram.csv"] = buf.getvalue()
    return out


def stats_to_text(stats: dict) -> str:
    lines = [
        f"dataset: {stats['dataset']} ({stats['modality']})",
        f"images: {stats['n_images']}",
        f"masks: {stats['n_masks']} (gt {stats['n_gt']}, interactive {stats['n_interactive']})",
        f"masks per image: {stats['masks_per_image_mean']:.2f}",
        "resolution histogram:",
    ]
    lines += [f"  {k}: {v}" for k, v in stats["resolution_histogram"].items()]
    lines.append("coverage histogram:")
    lines += [f"  {k}: {v}" for k, v in stats["coverage_histogram"].items()]
    return "\n".join(lines) + "\n"
