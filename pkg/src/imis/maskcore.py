"""Binary-mask, geometry, and morphology primitives shared by the whole toolkit.

Conventions used everywhere (including the HTTP API): coordinates are
(row, col) with the origin at the top-left corner, rasters are row-major,
foreground is 8-connected, background (hole filling) is 4-connected.
All types are immutable values; all operations are pure functions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

# 8-connected structuring element for foreground labeling.
_CONN8 = np.ones((3, 3), dtype=bool)


class MaskSource(enum.Enum):
    GROUND_TRUTH = 0
    INTERACTIVE = 1


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """8-bit image raster, grayscale (h, w) or RGB (h, w, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.pixels, dtype=np.uint8)
        if a.ndim == 2:
            pass
        elif a.ndim == 3 and a.shape[2] == 3:
            pass
        else:
            raise ValueError(f"image must be (h, w) or (h, w, 3), got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError("image must have height >= 1 and width >= 1")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "pixels", a)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def luminance(self) -> np.ndarray:
        """Grayscale intensities as a (h, w) uint8 array (ITU-R 601 luma for RGB)."""
        if self.channels == 1:
            return self.pixels
        rgb = self.pixels.astype(np.float64)
        y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        return np.clip(np.round(y), 0, 255).astype(np.uint8)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(
            self.pixels, other.pixels
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Single-object binary raster; one bool per pixel, row-major."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.bits)
        if a.dtype != np.bool_:
            a = a.astype(bool)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"mask must be a 2-D raster with h, w >= 1, got shape {a.shape}")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "bits", a)

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # type: ignore[return-value]

    @cached_property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return self.foreground_count == 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel-index bounding box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self) -> None:
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"inverted box {self}")
        if min(self.row_min, self.col_min) < 0:
            raise ValueError(f"negative box index {self}")

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)

    def within(self, height: int, width: int) -> bool:
        return self.row_max < height and self.col_max < width


@dataclass(frozen=True)
class LabeledMask:
    """Mask with a canonical category and provenance tag.

    category_id 0 is reserved for uncategorized interactive objects; instance
    distinguishes components split off one multi-part annotation.
    """

    mask: BinaryMask
    category_id: int
    source: MaskSource
    instance: int = field(default=0)

    def __post_init__(self) -> None:
        if self.category_id < 0:
            raise ValueError("category_id must be >= 0")
        if self.source is MaskSource.GROUND_TRUTH and self.category_id == 0:
            raise ValueError("ground-truth masks must carry a nonzero category_id")


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch: {a.shape} vs {b.shape}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    _check_same_shape(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return inter / union


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice coefficient 2|a∩b| / (|a|+|b|); 1.0 when both masks are empty."""
    _check_same_shape(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    total = a.foreground_count + b.foreground_count
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def bbox_of(mask: BinaryMask) -> BBox:
    """Tightest inclusive box containing all foreground pixels."""
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise ValueError("bbox of an empty mask is undefined")
    return BBox(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def connected_components(mask: BinaryMask) -> list[BinaryMask]:
    """Split foreground into maximal 8-connected regions.

    Components are returned in ascending order of their first foreground
    pixel in a row-major scan, so the decomposition is deterministic.
    """
    labels, n = ndimage.label(mask.bits, structure=_CONN8)
    if n == 0:
        return []
    flat = labels.ravel()
    first_seen: dict[int, int] = {}
    for idx in np.flatnonzero(flat):
        lab = int(flat[idx])
        if lab not in first_seen:
            first_seen[lab] = int(idx)
            if len(first_seen) == n:
                break
    order = sorted(first_seen, key=first_seen.__getitem__)
    return [BinaryMask(labels == lab) for lab in order]


def morph_clean(mask: BinaryMask, radius: int = 1) -> BinaryMask:
    """Morphological opening with a (2*radius+1)-square element, then hole fill.

    Erosion treats pixels beyond the grid border as foreground, so objects
    cut off by the border are not eaten from outside. Holes are background
    components not 4-connected to the grid border. radius 0 disables cleanup
    entirely and returns the input unchanged.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask
    side = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    eroded = ndimage.binary_erosion(mask.bits, structure=side, border_value=1)
    opened = ndimage.binary_dilation(eroded, structure=side)
    filled = ndimage.binary_fill_holes(opened)
    return BinaryMask(filled)


def centroid(mask: BinaryMask) -> tuple[float, float]:
    """Arithmetic mean (row, col) of the foreground pixel coordinates."""
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise ValueError("centroid of an empty mask is undefined")
    return float(rows.mean()), float(cols.mean())


def foreground_fraction(mask: BinaryMask) -> float:
    """Set bits divided by total pixel count."""
    return mask.foreground_count / (mask.height * mask.width)
