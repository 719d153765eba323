"""Bit-exact persistent dataset representation.

Masks are stored per entry in compressed-sparse-row form inside a binary
".imsk" container; images are lossless PNG; the manifest is deterministic
JSON (sorted keys, no timestamps). File layout of a dataset directory:

    <dataset>/
      manifest.json
      images/<id>.png
      masks/<id>.imsk

Container format (little-endian):
    header : magic "IMSK" | version u16 (=1) | height u32 | width u32
             | entry_count u32 | reserved u32 (=0)            -> 22 bytes
    entry  : category_id u32 | source u8 (0=GT, 1=interactive) | reserved u8
             | row_ptr (height+1) x u32 | col_idx n x u32
    footer : CRC32 u32 of all preceding bytes
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .maskcore import BinaryMask, ImageGrid, LabeledMask, MaskSource

MAGIC = b"IMSK"
VERSION = 1
HEADER = struct.Struct("<4sHIIII")


class ContainerFormatError(ValueError):
    """Raised for malformed .imsk bytes: bad magic, version, structure, or CRC."""


def encode_csr(mask: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    """Encode a mask as (row_ptr, col_idx) index arrays.

    row_ptr has length height+1 with row_ptr[0] = 0 and row_ptr[h] = set-bit
    count; row r's columns are col_idx[row_ptr[r]:row_ptr[r+1]], strictly
    increasing within each row.
    """
    rows, cols = np.nonzero(mask.bits)  # row-major -> sorted by (row, col)
    counts = np.bincount(rows, minlength=mask.height)
    row_ptr = np.zeros(mask.height + 1, dtype=np.uint32)
    np.cumsum(counts, out=row_ptr[1:])
    return row_ptr, cols.astype(np.uint32)


def decode_csr(height: int, width: int, row_ptr, col_idx) -> BinaryMask:
    """Exact inverse of encode_csr; validates structural invariants."""
    row_ptr = np.asarray(row_ptr, dtype=np.int64)
    col_idx = np.asarray(col_idx, dtype=np.int64)
    if height < 1 or width < 1:
        raise ContainerFormatError("mask dimensions must be >= 1")
    if row_ptr.shape != (height + 1,):
        raise ContainerFormatError(
            f"row_ptr must have length height+1 = {height + 1}, got {row_ptr.shape}"
        )
    if row_ptr[0] != 0 or np.any(np.diff(row_ptr) < 0):
        raise ContainerFormatError("row_ptr must be non-decreasing and start at 0")
    if row_ptr[-1] != col_idx.size:
        raise ContainerFormatError(
            f"row_ptr[-1] = {row_ptr[-1]} does not match col_idx length {col_idx.size}"
        )
    if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= width):
        raise ContainerFormatError("col_idx out of range")
    for r in range(height):
        row = col_idx[row_ptr[r] : row_ptr[r + 1]]
        if row.size > 1 and np.any(np.diff(row) <= 0):
            raise ContainerFormatError(f"columns not strictly increasing in row {r}")
    bits = np.zeros((height, width), dtype=bool)
    row_of = np.repeat(np.arange(height), np.diff(row_ptr))
    bits[row_of, col_idx] = True
    return BinaryMask(bits)


@dataclass(frozen=True)
class MaskEntry:
    """One stored mask: category, provenance, and its CSR payload."""

    category_id: int
    source: MaskSource
    row_ptr: np.ndarray
    col_idx: np.ndarray

    def to_labeled(self, height: int, width: int) -> LabeledMask:
        mask = decode_csr(height, width, self.row_ptr, self.col_idx)
        return LabeledMask(mask, self.category_id, self.source)

    @classmethod
    def from_labeled(cls, lm: LabeledMask) -> "MaskEntry":
        row_ptr, col_idx = encode_csr(lm.mask)
        return cls(lm.category_id, lm.source, row_ptr, col_idx)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskEntry):
            return NotImplemented
        return (
            self.category_id == other.category_id
            and self.source == other.source
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class MaskContainer:
    height: int
    width: int
    entries: list[MaskEntry] = field(default_factory=list)

    def labeled_masks(self) -> list[LabeledMask]:
        return [e.to_labeled(self.height, self.width) for e in self.entries]

    def append(self, lm: LabeledMask) -> None:
        if lm.mask.shape != (self.height, self.width):
            raise ValueError("mask dimensions do not match container")
        self.entries.append(MaskEntry.from_labeled(lm))

    @classmethod
    def from_masks(cls, height: int, width: int, masks: list[LabeledMask]) -> "MaskContainer":
        c = cls(height, width)
        for lm in masks:
            c.append(lm)
        return c


def container_bytes(container: MaskContainer) -> bytes:
    parts = [
        HEADER.pack(
            MAGIC, VERSION, container.height, container.width, len(container.entries), 0
        )
    ]
    for e in container.entries:
        parts.append(struct.pack("<IBB", e.category_id, e.source.value, 0))
        parts.append(np.asarray(e.row_ptr, dtype="<u4").tobytes())
        parts.append(np.asarray(e.col_idx, dtype="<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_container(path: str | Path, container: MaskContainer) -> None:
    Path(path).write_bytes(container_bytes(container))


def read_container(path: str | Path) -> MaskContainer:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size + 4:
        raise ContainerFormatError("truncated container: missing header or checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ContainerFormatError("checksum mismatch")
    magic, version, height, width, entry_count, _ = HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise ContainerFormatError(f"magic mismatch: {magic!r}")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    offset = HEADER.size
    entries = []
    for _ in range(entry_count):
        if offset + 6 > len(body):
            raise ContainerFormatError("truncated entry header")
        category_id, source_flag, _ = struct.unpack_from("<IBB", body, offset)
        offset += 6
        try:
            source = MaskSource(source_flag)
        except ValueError:
            raise ContainerFormatError(f"unknown source flag {source_flag}") from None
        n_ptr = height + 1
        if offset + 4 * n_ptr > len(body):
            raise ContainerFormatError("truncated row_ptr payload")
        row_ptr = np.frombuffer(body, dtype="<u4", count=n_ptr, offset=offset).copy()
        offset += 4 * n_ptr
        n_col = int(row_ptr[-1])
        if offset + 4 * n_col > len(body):
            raise ContainerFormatError("truncated col_idx payload")
        col_idx = np.frombuffer(body, dtype="<u4", count=n_col, offset=offset).copy()
        offset += 4 * n_col
        entries.append(MaskEntry(int(category_id), source, row_ptr, col_idx))
    if offset != len(body):
        raise ContainerFormatError(f"{len(body) - offset} trailing bytes after entries")
    container = MaskContainer(int(height), int(width), entries)
    for e in entries:  # validate CSR structure eagerly
        e.to_labeled(container.height, container.width)
    return container


def one_hot_split(label_map: np.ndarray) -> list[LabeledMask]:
    """Split an integer label raster into one ground-truth mask per nonzero label."""
    a = np.asarray(label_map)
    if a.ndim != 2:
        raise ValueError("label map must be 2-D")
    if a.size and a.min() < 0:
        raise ValueError("label values must be non-negative")
    labels = np.unique(a)
    return [
        LabeledMask(BinaryMask(a == lab), int(lab), MaskSource.GROUND_TRUTH)
        for lab in labels
        if lab != 0
    ]


@dataclass
class ImageRecord:
    id: str
    image_path: str
    mask_path: str
    split: str = "train"  # "train" | "test"


@dataclass
class Manifest:
    """Dataset index: category table plus per-image file records."""

    name: str
    modality: str
    categories: dict[int, str] = field(default_factory=dict)
    images: list[ImageRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = sorted(self.categories)
        if ids and (0 in self.categories or ids != list(range(1, len(ids) + 1))):
            raise ValueError("category ids must be dense from 1 (0 is reserved)")

    def category_id(self, name: str) -> int | None:
        for cid, cname in self.categories.items():
            if cname == name:
                return cid
        return None


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    doc = {
        "name": manifest.name,
        "modality": manifest.modality,
        "categories": {str(cid): name for cid, name in sorted(manifest.categories.items())},
        "images": [
            {"id": r.id, "image_path": r.image_path, "mask_path": r.mask_path, "split": r.split}
            for r in manifest.images
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Manifest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Manifest(
        name=doc["name"],
        modality=doc["modality"],
        categories={int(k): v for k, v in doc["categories"].items()},
        images=[
            ImageRecord(r["id"], r["image_path"], r["mask_path"], r.get("split", "train"))
            for r in doc["images"]
        ],
    )


def validate_manifest(manifest: Manifest, root: str | Path) -> list[str]:
    """Return a list of problems (missing files, bad splits); empty means valid."""
    root = Path(root)
    problems = []
    for rec in manifest.images:
        if rec.split not in ("train", "test"):
            problems.append(f"{rec.id}: unknown split {rec.split!r}")
        for p in (rec.image_path, rec.mask_path):
            if not (root / p).exists():
                problems.append(f"{rec.id}: missing file {p}")
    return problems


def write_image(path: str | Path, image: ImageGrid) -> None:
    Image.fromarray(image.pixels).save(path, format="PNG")


def read_image(path: str | Path) -> ImageGrid:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return ImageGrid(np.asarray(im, dtype=np.uint8))


def read_label_map(path: str | Path) -> np.ndarray:
    """Integer label raster from an 8/16-bit grayscale PNG."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16"):
            raise ValueError(f"label raster must be integer grayscale, got mode {im.mode}")
        return np.asarray(im).astype(np.int64)


def dataset_paths(root: str | Path) -> tuple[Path, Path, Path]:
    """(manifest path, images dir, masks dir) for a dataset directory."""
    root = Path(root)
    return root / "manifest.json", root / "images", root / "masks"
