"""Simulated interactive segmentation.

Synthesizes user prompts from targets, runs the K-round correction loop
(initial prompt, then one corrective click per round aimed at the largest
error component, with the previous prediction fed back as a low-resolution
prior), and drives the robustness protocols over a dataset.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import storage
from .maskcore import (
    BBox,
    BinaryMask,
    ImageGrid,
    LabeledMask,
    MaskSource,
    bbox_of,
    centroid,
    connected_components,
    dice,
)
from .proposer import (
    LOW_RES_SIDE,
    Box,
    CandidateMask,
    Click,
    Prompt,
    PromptSet,
    Segmenter,
    TextPrompt,
)

DEFAULT_ROUNDS = 8
DEFAULT_BOX_JITTER = 5

InitialPrompt = Literal["click", "box", "text", "text+click", "box+click"]
ClickPlacement = Literal["uniform", "centroid"]


@dataclass(frozen=True)
class InteractionStrategy:
    initial: InitialPrompt = "click"
    rounds: int = DEFAULT_ROUNDS
    jitter: int = DEFAULT_BOX_JITTER
    click_placement: ClickPlacement = "uniform"

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


@dataclass(frozen=True)
class ErrorRegion:
    false_neg: BinaryMask  # target minus prediction
    false_pos: BinaryMask  # prediction minus target

    def is_empty(self) -> bool:
        return self.false_neg.is_empty() and self.false_pos.is_empty()


@dataclass
class InteractionSession:
    """Completed simulation record: prompts, per-round predictions, Dice trace."""

    image: ImageGrid
    target: LabeledMask
    strategy: InteractionStrategy
    prompts: list[Prompt] = field(default_factory=list)
    predictions: list[BinaryMask] = field(default_factory=list)
    dice_trace: list[float] = field(default_factory=list)
    early_stop_round: int | None = None

    @property
    def final_dice(self) -> float:
        return self.dice_trace[-1]


def sample_initial_click(target: BinaryMask, rng: np.random.Generator) -> Click:
    """Positive click drawn uniformly from the target foreground."""
    rows, cols = np.nonzero(target.bits)
    if rows.size == 0:
        raise ValueError("cannot sample a click from an empty target")
    i = int(rng.integers(rows.size))
    return Click(int(rows[i]), int(cols[i]), positive=True)


def centroid_click(target: BinaryMask) -> Click:
    """Positive click at the foreground pixel nearest the target centroid."""
    r0, c0 = centroid(target)
    rows, cols = np.nonzero(target.bits)
    d2 = (rows - r0) ** 2 + (cols - c0) ** 2
    i = int(np.argmin(d2))  # ties resolve to the first pixel in row-major order
    return Click(int(rows[i]), int(cols[i]), positive=True)


def sample_bbox(
    target: BinaryMask, rng: np.random.Generator, jitter: int = DEFAULT_BOX_JITTER
) -> Box:
    """Tight target box with each coordinate shifted by a uniform integer in
    [-jitter, +jitter], clamped to the grid and re-ordered if inverted."""
    tight = bbox_of(target)
    coords = np.array([tight.row_min, tight.col_min, tight.row_max, tight.col_max])
    if jitter > 0:
        coords = coords + rng.integers(-jitter, jitter + 1, size=4)
    r0, c0, r1, c1 = coords
    r0, r1 = sorted((int(np.clip(r0, 0, target.height - 1)), int(np.clip(r1, 0, target.height - 1))))
    c0, c1 = sorted((int(np.clip(c0, 0, target.width - 1)), int(np.clip(c1, 0, target.width - 1))))
    return Box(BBox(r0, c0, r1, c1))


def error_region(pred: BinaryMask, target: BinaryMask) -> ErrorRegion:
    if pred.shape != target.shape:
        raise ValueError("prediction and target dimensions differ")
    return ErrorRegion(
        false_neg=BinaryMask(target.bits & ~pred.bits),
        false_pos=BinaryMask(pred.bits & ~target.bits),
    )


def sample_correction_click(err: ErrorRegion, rng: np.random.Generator) -> Click:
    """Corrective click inside the larger error side (ties favor false
    negatives), placed uniformly within that side's largest component.
    Positive over false negatives, negative over false positives."""
    n_fn, n_fp = err.false_neg.foreground_count, err.false_pos.foreground_count
    if n_fn == 0 and n_fp == 0:
        raise ValueError("error region is empty; segmentation is already perfect")
    fix_false_neg = n_fn >= n_fp
    side = err.false_neg if fix_false_neg else err.false_pos
    comps = connected_components(side)
    largest = max(comps, key=lambda c: c.foreground_count)
    click = sample_initial_click(largest, rng)
    return Click(click.row, click.col, positive=fix_false_neg)


def downsample_mask(
    mask: BinaryMask, out_height: int = LOW_RES_SIDE, out_width: int = LOW_RES_SIDE
) -> BinaryMask:
    """Block-majority downsampling to a fixed resolution, ties to foreground.

    Inputs smaller than the output fall back to nearest-row/column sampling,
    so any input size maps onto the fixed low-resolution grid.
    """
    h, w = mask.shape
    row_idx = (np.arange(out_height) * h // out_height).astype(np.intp)
    col_idx = (np.arange(out_width) * w // out_width).astype(np.intp)
    sums = np.add.reduceat(np.add.reduceat(mask.bits.astype(np.int64), row_idx, axis=0),
                           col_idx, axis=1)
    row_counts = np.maximum(np.diff(np.append(row_idx, h)), 1)
    col_counts = np.maximum(np.diff(np.append(col_idx, w)), 1)
    counts = np.outer(row_counts, col_counts)
    return BinaryMask(2 * sums >= counts)


def augment_intensity(
    image: ImageGrid,
    rng: np.random.Generator,
    probability: float = 0.2,
    factor: float = 0.2,
) -> ImageGrid:
    """With the given probability, scale and shift intensities:
    pixel' = clamp(pixel * (1 + s) + o * 255) with s, o ~ U[-factor, factor].
    Masks are never altered by augmentation."""
    if rng.random() >= probability:
        return image
    s = rng.uniform(-factor, factor)
    o = rng.uniform(-factor, factor)
    out = np.clip(np.round(image.pixels.astype(np.float64) * (1.0 + s) + o * 255.0), 0, 255)
    return ImageGrid(out.astype(np.uint8))


def sample_targets(
    gt: Sequence[LabeledMask],
    interactive: Sequence[LabeledMask],
    n: int = 5,
    rng: np.random.Generator | None = None,
) -> list[LabeledMask]:
    """Draw n supervision targets from the combined pool: without replacement
    when the pool is large enough, otherwise repeated draws fill up to n."""
    pool = list(gt) + list(interactive)
    if not pool:
        raise ValueError("target pool is empty")
    rng = rng or np.random.default_rng()
    if len(pool) >= n:
        idx = rng.choice(len(pool), size=n, replace=False)
    else:
        idx = rng.integers(0, len(pool), size=n)
    return [pool[int(i)] for i in idx]


def _initial_prompts(
    target: LabeledMask, strategy: InteractionStrategy, rng: np.random.Generator
) -> list[Prompt]:
    def click() -> Click:
        if strategy.click_placement == "centroid":
            return centroid_click(target.mask)
        return sample_initial_click(target.mask, rng)

    if strategy.initial == "click":
        return [click()]
    if strategy.initial == "box":
        return [sample_bbox(target.mask, rng, strategy.jitter)]
    if strategy.initial == "text":
        return [TextPrompt(target.category_id)]
    if strategy.initial == "text+click":
        return [TextPrompt(target.category_id), click()]
    if strategy.initial == "box+click":
        return [sample_bbox(target.mask, rng, strategy.jitter), click()]
    raise ValueError(f"unknown initial prompt kind {strategy.initial!r}")


def _best_candidate(candidates: list[CandidateMask], height: int, width: int) -> BinaryMask:
    if not candidates:
        return BinaryMask.zeros(height, width)
    return max(candidates, key=lambda c: c.confidence).mask


def run_session(
    image: ImageGrid,
    target: LabeledMask,
    segmenter: Segmenter,
    strategy: InteractionStrategy,
    rng: np.random.Generator,
    *,
    seed: int | None = None,
) -> InteractionSession:
    """Run K rounds of simulated interaction against one target.

    Round 1 issues the strategy's initial prompt(s). Every later round adds
    exactly one corrective click inside the current error region and feeds
    the previous prediction back as the low-resolution prior. When the error
    region empties, the session stops early and the Dice trace is padded with
    its final value so it always has exactly K entries.
    """
    if target.mask.is_empty():
        raise ValueError("target mask is empty")
    session = InteractionSession(image=image, target=target, strategy=strategy)
    session.prompts = _initial_prompts(target, strategy, rng)
    prior: BinaryMask | None = None
    prediction: BinaryMask | None = None
    for round_no in range(1, strategy.rounds + 1):
        if round_no > 1:
            assert prediction is not None
            err = error_region(prediction, target.mask)
            if err.is_empty():
                session.early_stop_round = round_no - 1
                break
            session.prompts.append(sample_correction_click(err, rng))
            prior = downsample_mask(prediction)
        prompt_set = PromptSet(tuple(session.prompts), prior)
        candidates = segmenter.predict(image, prompt_set, seed=seed)
        prediction = _best_candidate(candidates, image.height, image.width)
        session.predictions.append(prediction)
        session.dice_trace.append(dice(prediction, target.mask))
    while len(session.dice_trace) < strategy.rounds:
        session.dice_trace.append(session.dice_trace[-1])
    return session


def session_rng(global_seed: int, image_id: str, target_index: int) -> np.random.Generator:
    """Per-session generator derived from (global seed, image id, target index)."""
    key = zlib.crc32(image_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([global_seed, key, target_index]))


Protocol = Literal["interaction_count", "click_position", "bbox_offset"]


@dataclass
class SweepArm:
    name: str
    dices: list[float] = field(default_factory=list)
    image_ids: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        by_image: dict[str, list[float]] = {}
        for img, d in zip(self.image_ids, self.dices):
            by_image.setdefault(img, []).append(d)
        image_means = [float(np.mean(v)) for v in by_image.values()]
        return {
            "name": self.name,
            "mean_dice_mask_level": float(np.mean(self.dices)) if self.dices else None,
            "mean_dice_image_level": float(np.mean(image_means)) if image_means else None,
            "n": len(self.dices),
        }


def _dataset_targets(dataset_dir: str | Path):
    dataset_dir = Path(dataset_dir)
    manifest = storage.read_manifest(dataset_dir / "manifest.json")
    for rec in manifest.images:
        image = storage.read_image(dataset_dir / rec.image_path)
        container = storage.read_container(dataset_dir / rec.mask_path)
        targets = [
            lm
            for lm in container.labeled_masks()
            if lm.source is MaskSource.GROUND_TRUTH and not lm.mask.is_empty()
        ]
        yield rec, image, targets


def robustness_sweep(
    dataset_dir: str | Path,
    segmenter: Segmenter,
    protocol: Protocol,
    *,
    seed: int = 0,
    max_rounds: int = 9,
    jitters: Sequence[int] = (0, 5, 10),
) -> dict:
    """Mean Dice per protocol arm, aggregated at image and mask level.

    interaction_count runs one max_rounds session per target and reads arm K
    from round K of the trace; click_position and bbox_offset run paired
    single-round sessions per arm on identical targets and seeds.
    """
    if protocol == "interaction_count":
        arms = [SweepArm(f"K={k}") for k in range(1, max_rounds + 1)]
    elif protocol == "click_position":
        arms = [SweepArm("uniform"), SweepArm("centroid")]
    elif protocol == "bbox_offset":
        arms = [SweepArm(f"jitter={j}") for j in jitters]
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    n_targets = 0
    for rec, image, targets in _dataset_targets(dataset_dir):
        for t_index, target in enumerate(targets):
            n_targets += 1
            if protocol == "interaction_count":
                rng = session_rng(seed, rec.id, t_index)
                s = run_session(
                    image, target, segmenter, InteractionStrategy(rounds=max_rounds), rng
                )
                for k, arm in enumerate(arms):
                    arm.dices.append(s.dice_trace[k])
                    arm.image_ids.append(rec.id)
            elif protocol == "click_position":
                for arm, placement in zip(arms, ("uniform", "centroid")):
                    rng = session_rng(seed, rec.id, t_index)
                    s = run_session(
                        image,
                        target,
                        segmenter,
                        InteractionStrategy(rounds=1, click_placement=placement),  # type: ignore[arg-type]
                        rng,
                    )
                    arm.dices.append(s.final_dice)
                    arm.image_ids.append(rec.id)
            else:
                for arm, jitter in zip(arms, jitters):
                    rng = session_rng(seed, rec.id, t_index)
                    s = run_session(
                        image,
                        target,
                        segmenter,
                        InteractionStrategy(initial="box", rounds=1, jitter=jitter),
                        rng,
                    )
                    arm.dices.append(s.final_dice)
                    arm.image_ids.append(rec.id)
    if n_targets == 0:
        raise ValueError("dataset has no nonempty ground-truth targets")
    return {"protocol": protocol, "arms": [arm.summary() for arm in arms]}
