"""Segmenter contract, the classical reference segmenter, and grid-prompted
candidate-mask generation (confidence filter, then NMS, then background filter).
"""
from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from . import storage
from .maskcore import (
    BBox,
    BinaryMask,
    ImageGrid,
    LabeledMask,
    bbox_of,
    foreground_fraction,
    iou,
)

TEXT_PROMPT_TEMPLATE = "A segmentation area of a {category}"

# Default knobs of the generation pipeline.
GRID_SIDE = 32
CONFIDENCE_THRESHOLD = 0.85
NMS_IOU_THRESHOLD = 0.7
BACKGROUND_MAX_COVER = 0.8

LOW_RES_SIDE = 256  # prior masks travel at this fixed resolution


@dataclass(frozen=True)
class Click:
    row: int
    col: int
    positive: bool = True


@dataclass(frozen=True)
class Box:
    bbox: BBox


@dataclass(frozen=True)
class TextPrompt:
    category_id: int


Prompt = Click | Box | TextPrompt


@dataclass(frozen=True)
class PromptSet:
    """Ordered user interactions plus an optional low-resolution prior mask."""

    prompts: tuple[Prompt, ...] = ()
    prior: BinaryMask | None = None

    def __post_init__(self) -> None:
        if self.prior is not None and self.prior.shape != (LOW_RES_SIDE, LOW_RES_SIDE):
            raise ValueError(f"prior mask must be {LOW_RES_SIDE}x{LOW_RES_SIDE}")

    def added(self, prompt: Prompt) -> "PromptSet":
        return PromptSet(self.prompts + (prompt,), self.prior)

    def with_prior(self, prior: BinaryMask | None) -> "PromptSet":
        return PromptSet(self.prompts, prior)

    def validate_bounds(self, height: int, width: int) -> None:
        for p in self.prompts:
            if isinstance(p, Click):
                if not (0 <= p.row < height and 0 <= p.col < width):
                    raise ValueError(f"click ({p.row}, {p.col}) outside {height}x{width} image")
            elif isinstance(p, Box):
                if not p.bbox.within(height, width):
                    raise ValueError(f"box {p.bbox} outside {height}x{width} image")


def render_text_prompt(category_name: str) -> str:
    return TEXT_PROMPT_TEMPLATE.format(category=category_name)


@dataclass(frozen=True)
class CandidateMask:
    mask: BinaryMask
    confidence: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.confidence) or not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be a finite value in [0, 1], got {self.confidence}")


class UnsupportedPromptError(ValueError):
    """The segmenter cannot act on this prompt combination (e.g. text-only)."""


class Segmenter(Protocol):
    """Pluggable segmenter: (image, prompts) -> candidates, deterministic per seed."""

    def predict(
        self, image: ImageGrid, prompts: PromptSet, *, seed: int | None = None
    ) -> list[CandidateMask]: ...


def grid_points(height: int, width: int, n: int = GRID_SIDE) -> list[tuple[int, int]]:
    """n x n prompt points at cell centers, in row-major order."""
    if n < 1:
        raise ValueError("grid side must be >= 1")
    rows = [int((i + 0.5) * height / n) for i in range(n)]
    cols = [int((j + 0.5) * width / n) for j in range(n)]
    return [(r, c) for r in rows for c in cols]


def confidence_filter(
    candidates: Sequence[CandidateMask], threshold: float = CONFIDENCE_THRESHOLD
) -> list[CandidateMask]:
    """Keep candidates whose confidence is strictly above the threshold."""
    return [c for c in candidates if c.confidence > threshold]


def nms(
    candidates: Sequence[CandidateMask], iou_threshold: float = NMS_IOU_THRESHOLD
) -> list[CandidateMask]:
    """Greedy mask-level non-maximum suppression.

    Candidates are visited by descending confidence (ties: larger area first,
    then earlier input index) and kept iff their IoU with every already-kept
    mask is <= iou_threshold. Output preserves the kept order.
    """
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-candidates[i].confidence, -candidates[i].mask.foreground_count, i),
    )
    kept: list[CandidateMask] = []
    for i in order:
        c = candidates[i]
        if all(iou(c.mask, k.mask) <= iou_threshold for k in kept):
            kept.append(c)
    return kept


def background_filter(
    candidates: Sequence[CandidateMask], max_cover: float = BACKGROUND_MAX_COVER
) -> list[CandidateMask]:
    """Drop candidates covering strictly more than max_cover of the image."""
    return [c for c in candidates if foreground_fraction(c.mask) <= max_cover]


@dataclass(frozen=True)
class GenerationParams:
    grid_side: int = GRID_SIDE
    confidence_threshold: float = CONFIDENCE_THRESHOLD
    nms_iou_threshold: float = NMS_IOU_THRESHOLD
    background_max_cover: float = BACKGROUND_MAX_COVER


@dataclass
class GenerationResult:
    masks: list[CandidateMask]
    points_queried: int = 0
    points_failed: list[tuple[int, int]] = field(default_factory=list)


def generate_interactive_masks(
    image: ImageGrid,
    segmenter: Segmenter,
    params: GenerationParams = GenerationParams(),
    *,
    seed: int | None = None,
) -> GenerationResult:
    """Query the segmenter with one positive click per grid point, pool the
    candidates, and apply confidence filtering, NMS, and background removal
    in that order. A failing point is recorded and skipped, never fatal.
    """
    pooled: list[CandidateMask] = []
    failed: list[tuple[int, int]] = []
    points = grid_points(image.height, image.width, params.grid_side)
    for row, col in points:
        prompt = PromptSet((Click(row, col, positive=True),))
        try:
            pooled.extend(segmenter.predict(image, prompt, seed=seed))
        except Exception:
            failed.append((row, col))
    masks = confidence_filter(pooled, params.confidence_threshold)
    masks = nms(masks, params.nms_iou_threshold)
    masks = background_filter(masks, params.background_max_cover)
    return GenerationResult(masks=masks, points_queried=len(points), points_failed=failed)


def _otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over 8-bit values (maximizes inter-class variance)."""
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    omega = np.cumsum(hist) / total
    mu = np.cumsum(hist * np.arange(256)) / total
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = 0.0
    return float(np.argmax(sigma_b)) + 0.5


def _grow(gray: np.ndarray, row: int, col: int, tolerance: float) -> np.ndarray:
    """8-connected flood of pixels within tolerance of the seed intensity."""
    seed_val = float(gray[row, col])
    within = np.abs(gray.astype(np.float64) - seed_val) <= tolerance
    labels, _ = ndimage.label(within, structure=np.ones((3, 3), dtype=bool))
    return labels == labels[row, col]


def region_grow_segment(
    image: ImageGrid, click: Click, tolerance: float = 25.0
) -> CandidateMask:
    """Seeded region growing with a stability-score confidence.

    The mask is the 8-connected flood of pixels whose intensity lies within
    `tolerance` of the seed pixel. Confidence is the IoU between masks grown
    at tolerance*(1-delta) and tolerance*(1+delta) with delta = 0.25.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    gray = image.luminance()
    if not (0 <= click.row < image.height and 0 <= click.col < image.width):
        raise ValueError("click outside image bounds")
    mask = _grow(gray, click.row, click.col, tolerance)
    lo = BinaryMask(_grow(gray, click.row, click.col, tolerance * 0.75))
    hi = BinaryMask(_grow(gray, click.row, click.col, tolerance * 1.25))
    return CandidateMask(BinaryMask(mask), iou(lo, hi))


def box_segment(image: ImageGrid, box: BBox) -> CandidateMask:
    """Otsu-threshold segmentation inside a box.

    The interior is split at Otsu's threshold; the class whose mean intensity
    differs most from the mean of the one-pixel ring around the box is taken
    as foreground. The largest 8-connected foreground component is returned,
    clipped to the box, with confidence = its area fraction of the class.
    A uniform interior degenerates to the full box at confidence 0.5.
    """
    if not box.within(image.height, image.width):
        raise ValueError("box outside image bounds")
    gray = image.luminance()
    interior = gray[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1]
    if interior.min() == interior.max():
        bits = np.zeros(gray.shape, dtype=bool)
        bits[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1] = True
        return CandidateMask(BinaryMask(bits), 0.5)

    thr = _otsu_threshold(interior)
    above = interior.astype(np.float64) > thr

    ring = np.zeros(gray.shape, dtype=bool)
    r0, c0 = max(box.row_min - 1, 0), max(box.col_min - 1, 0)
    r1, c1 = min(box.row_max + 1, image.height - 1), min(box.col_max + 1, image.width - 1)
    ring[r0 : r1 + 1, c0 : c1 + 1] = True
    ring[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1] = False
    if ring.any():
        ring_mean = float(gray[ring].mean())
    else:  # box spans the whole image; fall back to its own border
        ring_mean = float(
            np.concatenate([interior[0], interior[-1], interior[:, 0], interior[:, -1]]).mean()
        )

    means = {True: float(interior[above].mean()), False: float(interior[~above].mean())}
    fg_class = max(means, key=lambda k: abs(means[k] - ring_mean))
    fg = above if fg_class else ~above

    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=bool))
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    comp = labels == best
    bits = np.zeros(gray.shape, dtype=bool)
    bits[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1] = comp
    confidence = float(comp.sum() / fg.sum())
    return CandidateMask(BinaryMask(bits), confidence)


def upsample_prior(prior: BinaryMask, height: int, width: int) -> BinaryMask:
    """Nearest-neighbor upsampling of a low-resolution prior to image size."""
    rows = (np.arange(height) * prior.height // height).clip(0, prior.height - 1)
    cols = (np.arange(width) * prior.width // width).clip(0, prior.width - 1)
    return BinaryMask(prior.bits[np.ix_(rows, cols)])


class ClassicalSegmenter:
    """Reference segmenter built from region growing and Otsu box cuts.

    Combination rule for a prompt history: union of regions grown at positive
    clicks and of box segmentations, plus the upsampled prior when present,
    minus regions grown at negative clicks. Confidence is the mean of the
    per-prompt confidences. Text prompts are answered only when a category
    oracle (category_id -> mask) was attached, since a classical segmenter
    has no semantics.
    """

    def __init__(
        self,
        tolerance: float = 25.0,
        text_oracle: dict[int, BinaryMask] | None = None,
    ) -> None:
        self.tolerance = tolerance
        self.text_oracle = text_oracle

    def predict(
        self, image: ImageGrid, prompts: PromptSet, *, seed: int | None = None
    ) -> list[CandidateMask]:
        prompts.validate_bounds(image.height, image.width)
        positive = np.zeros((image.height, image.width), dtype=bool)
        negative = np.zeros_like(positive)
        confidences: list[float] = []
        for p in prompts.prompts:
            if isinstance(p, Click):
                cand = region_grow_segment(image, p, self.tolerance)
                if p.positive:
                    positive |= cand.mask.bits
                    confidences.append(cand.confidence)
                else:
                    negative |= cand.mask.bits
            elif isinstance(p, Box):
                cand = box_segment(image, p.bbox)
                positive |= cand.mask.bits
                confidences.append(cand.confidence)
            elif isinstance(p, TextPrompt):
                if self.text_oracle is None or p.category_id not in self.text_oracle:
                    raise UnsupportedPromptError(
                        "classical segmenter cannot resolve text prompts without an oracle"
                    )
                positive |= self.text_oracle[p.category_id].bits
                confidences.append(1.0)
        if not confidences and prompts.prior is None:
            raise UnsupportedPromptError("prompt set contains no usable prompt")
        if prompts.prior is not None:
            positive |= upsample_prior(prompts.prior, image.height, image.width).bits
            if not confidences:
                confidences.append(0.5)
        mask = BinaryMask(positive & ~negative)
        return [CandidateMask(mask, float(np.mean(confidences)))]


class OracleSegmenter:
    """Perfect segmenter over a known set of target masks (test harness aid).

    Clicks return the target containing the click; boxes the target whose
    bbox best matches; text the target of that category. Confidence is 1.
    The *last* resolving prompt wins, mirroring a user steering the current
    object; a prompt set resolving no target yields no candidates.
    """

    def __init__(self, targets: Sequence[LabeledMask]) -> None:
        if not targets:
            raise ValueError("oracle needs at least one target")
        self.targets = list(targets)

    def _by_click(self, click: Click) -> BinaryMask | None:
        for t in self.targets:
            if t.mask.bits[click.row, click.col]:
                return t.mask
        return None

    def _by_box(self, box: BBox) -> BinaryMask:
        def overlap(t: LabeledMask) -> float:
            if t.mask.is_empty():
                return -1.0
            b = bbox_of(t.mask)
            rmin, cmin = max(b.row_min, box.row_min), max(b.col_min, box.col_min)
            rmax, cmax = min(b.row_max, box.row_max), min(b.col_max, box.col_max)
            if rmin > rmax or cmin > cmax:
                return 0.0
            inter = (rmax - rmin + 1) * (cmax - cmin + 1)
            return inter / (b.area + box.area - inter)

        return max(self.targets, key=overlap).mask

    def predict(
        self, image: ImageGrid, prompts: PromptSet, *, seed: int | None = None
    ) -> list[CandidateMask]:
        prompts.validate_bounds(image.height, image.width)
        result: BinaryMask | None = None
        for p in prompts.prompts:
            if isinstance(p, Click):
                hit = self._by_click(p)
                if p.positive and hit is not None:
                    result = hit
            elif isinstance(p, Box):
                result = self._by_box(p)
            elif isinstance(p, TextPrompt):
                for t in self.targets:
                    if t.category_id == p.category_id:
                        result = t.mask
                        break
        if result is None:
            return []
        return [CandidateMask(result, 1.0)]


def _prompt_to_json(p: Prompt) -> dict:
    if isinstance(p, Click):
        return {"type": "click", "row": p.row, "col": p.col, "positive": p.positive}
    if isinstance(p, Box):
        b = p.bbox
        return {
            "type": "box",
            "row_min": b.row_min,
            "col_min": b.col_min,
            "row_max": b.row_max,
            "col_max": b.col_max,
        }
    return {"type": "text", "category_id": p.category_id}


def _csr_payload(mask: BinaryMask) -> dict:
    row_ptr, col_idx = storage.encode_csr(mask)
    return {
        "height": mask.height,
        "width": mask.width,
        "row_ptr": row_ptr.tolist(),
        "col_idx": col_idx.tolist(),
    }


class ProcessSegmenter:
    """External segmenter speaking line-delimited JSON on stdio.

    Each request line is {"image_ref": <png path>, "height": h, "width": w,
    "prompts": [...], "prior": <CSR payload or null>, "seed": <int or null>};
    the response line is {"masks": [<CSR payload>...], "confidences": [...]}
    or {"error": "..."}. The child process is started lazily and reused.
    """

    def __init__(self, command: Sequence[str]) -> None:
        self.command = list(command)
        self._proc: subprocess.Popen | None = None
        self._workdir = Path(tempfile.mkdtemp(prefix="imis-segmenter-"))
        self._counter = 0

    def _ensure_started(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def predict(
        self, image: ImageGrid, prompts: PromptSet, *, seed: int | None = None
    ) -> list[CandidateMask]:
        prompts.validate_bounds(image.height, image.width)
        proc = self._ensure_started()
        self._counter += 1
        image_ref = self._workdir / f"query-{self._counter}.png"
        storage.write_image(image_ref, image)
        request = {
            "image_ref": str(image_ref),
            "height": image.height,
            "width": image.width,
            "prompts": [_prompt_to_json(p) for p in prompts.prompts],
            "prior": _csr_payload(prompts.prior) if prompts.prior is not None else None,
            "seed": seed,
        }
        assert proc.stdin is not None and proc.stdout is not None
        proc.stdin.write(json.dumps(request) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        image_ref.unlink(missing_ok=True)
        if not line:
            raise RuntimeError("segmenter process closed its stdout")
        response = json.loads(line)
        if "error" in response:
            raise RuntimeError(f"segmenter process error: {response['error']}")
        masks = [
            storage.decode_csr(m["height"], m["width"], m["row_ptr"], m["col_idx"])
            for m in response["masks"]
        ]
        return [
            CandidateMask(m, float(c))
            for m, c in zip(masks, response["confidences"], strict=True)
        ]

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()  # type: ignore[union-attr]
            self._proc.wait(timeout=5)
