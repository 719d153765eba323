"""Shared test fixtures: synthetic segmenters and on-disk blob datasets."""
import numpy as np

_acceptance_outcomes: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" in report.nodeid and report.when == "call":
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        _acceptance_outcomes[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name, outcome in _acceptance_outcomes.items():
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  {mark}  {name.replace('_', '-')}")

from imis.maskcore import BinaryMask, ImageGrid, LabeledMask, MaskSource
from imis.proposer import Box, CandidateMask, Click
from imis.storage import (
    ImageRecord,
    Manifest,
    MaskContainer,
    write_container,
    write_image,
    write_manifest,
)


class BlockStampSegmenter:
    """Deterministic, deliberately imperfect segmenter for loop testing.

    Prediction = union of (2r+1)-squares stamped at positive clicks and of
    box interiors, minus squares stamped at negative clicks. It converges
    only by accumulating clicks, which keeps error regions nonempty for
    several rounds.
    """

    def __init__(self, radius: int = 2, confidence: float = 0.9):
        self.radius = radius
        self.confidence = confidence

    def predict(self, image, prompts, *, seed=None):
        prompts.validate_bounds(image.height, image.width)
        bits = np.zeros((image.height, image.width), dtype=bool)
        r = self.radius
        for p in prompts.prompts:
            if isinstance(p, Click):
                r0, r1 = max(p.row - r, 0), min(p.row + r, image.height - 1)
                c0, c1 = max(p.col - r, 0), min(p.col + r, image.width - 1)
                if p.positive:
                    bits[r0 : r1 + 1, c0 : c1 + 1] = True
                else:
                    bits[r0 : r1 + 1, c0 : c1 + 1] = False
            elif isinstance(p, Box):
                b = p.bbox
                bits[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1] = True
        return [CandidateMask(BinaryMask(bits), self.confidence)]


class EmptySegmenter:
    """Always predicts an empty mask."""

    def predict(self, image, prompts, *, seed=None):
        return [CandidateMask(BinaryMask.zeros(image.height, image.width), 0.9)]


class DatasetOracle:
    """Perfect oracle for a whole on-disk dataset, dispatching on image content."""

    def __init__(self, dataset_dir):
        from imis import storage
        from imis.proposer import OracleSegmenter

        self.pairs = []
        manifest = storage.read_manifest(dataset_dir / "manifest.json")
        for rec in manifest.images:
            image = storage.read_image(dataset_dir / rec.image_path)
            targets = storage.read_container(dataset_dir / rec.mask_path).labeled_masks()
            self.pairs.append((image, OracleSegmenter(targets)))

    def predict(self, image, prompts, *, seed=None):
        for img, oracle in self.pairs:
            if img == image:
                return oracle.predict(image, prompts, seed=seed)
        raise ValueError("image not part of the oracle's dataset")


def blob_image(shape, rects, bg=10, fg=200):
    """Flat background with flat rectangular blobs; returns (ImageGrid, masks)."""
    img = np.full(shape, bg, dtype=np.uint8)
    masks = []
    for r0, c0, r1, c1 in rects:
        img[r0 : r1 + 1, c0 : c1 + 1] = fg
        bits = np.zeros(shape, dtype=bool)
        bits[r0 : r1 + 1, c0 : c1 + 1] = True
        masks.append(BinaryMask(bits))
    return ImageGrid(img), masks


def write_blob_dataset(root, images, name="demo", modality="CT", categories=None):
    """Write a dataset of flat-blob images with one GT mask per blob.

    images: list of (image_id, shape, [blob rects], split)
    """
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    categories = categories or {1: "organ"}
    records = []
    for image_id, shape, rects, split in images:
        img, masks = blob_image(shape, rects)
        labeled = [
            LabeledMask(m, 1 + (i % len(categories)), MaskSource.GROUND_TRUTH)
            for i, m in enumerate(masks)
        ]
        write_image(root / "images" / f"{image_id}.png", img)
        write_container(
            root / "masks" / f"{image_id}.imsk",
            MaskContainer.from_masks(shape[0], shape[1], labeled),
        )
        records.append(
            ImageRecord(image_id, f"images/{image_id}.png", f"masks/{image_id}.imsk", split)
        )
    write_manifest(
        root / "manifest.json",
        Manifest(name=name, modality=modality, categories=categories, images=records),
    )
    return root
