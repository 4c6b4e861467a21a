"""MNIST IDX file handling and ingestion into network-ready images.

The IDX container is a tiny big-endian binary format: a 4-byte magic
(0x00000803 for image tensors, 0x00000801 for label vectors), 4-byte
dimension fields, then unsigned bytes in row-major order.  Ingestion maps
pixel intensities 0..255 to reals in [-1, 1] and rescales the 28x28 digits
to 29x29 so every image has a true center pixel.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_SIDE = 28
INPUT_SIDE = 29

BACKGROUND = -1.0  # canonical background value; all out-of-bounds reads return this

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxError(ValueError):
    """Raised when an IDX byte stream is malformed; message names the offset."""


@dataclass
class RawDigit:
    """A digit exactly as stored on disk: 28x28 uint8 intensities plus label."""

    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if self.pixels.shape != (MNIST_SIDE, MNIST_SIDE):
            raise ValueError(f"expected {MNIST_SIDE}x{MNIST_SIDE} pixels, got {self.pixels.shape}")
        if not 0 <= self.label <= 9:
            raise ValueError(f"label {self.label} out of range")


@dataclass
class Image:
    """A square image of real intensities in [-1, 1] with its class label."""

    pixels: np.ndarray
    label: int

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


class Dataset:
    """An ordered collection of same-sized images, stored as stacked arrays."""

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, name: str = ""):
        pixels = np.asarray(pixels, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if pixels.ndim != 3 or pixels.shape[1] != pixels.shape[2]:
            raise ValueError(f"pixels must be (n, side, side), got {pixels.shape}")
        if len(pixels) == 0:
            raise ValueError("dataset must not be empty")
        if len(labels) != len(pixels):
            raise ValueError(f"{len(pixels)} images but {len(labels)} labels")
        self.pixels = pixels
        self.labels = labels
        self.name = name

    @property
    def side(self) -> int:
        return self.pixels.shape[1]

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> Image:
        return Image(self.pixels[i], int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_images(cls, images: list[Image], name: str = "") -> "Dataset":
        return cls(np.stack([im.pixels for im in images]),
                   np.array([im.label for im in images]), name)


def _read_be_u32(data: bytes, offset: int) -> int:
    if offset + 4 > len(data):
        raise IdxError(f"truncated stream: need 4 bytes at offset {offset}, have {len(data) - offset}")
    return struct.unpack_from(">I", data, offset)[0]


def parse_idx_images(data: bytes, expect_side: int | None = MNIST_SIDE) -> np.ndarray:
    """Parse an IDX image stream into a (count, rows, cols) uint8 array.

    ``expect_side`` pins the row/column counts (28 for official MNIST);
    pass None to accept any square size.
    """
    magic = _read_be_u32(data, 0)
    if magic != IMAGE_MAGIC:
        raise IdxError(f"wrong image magic 0x{magic:08x} at offset 0, expected 0x{IMAGE_MAGIC:08x}")
    count = _read_be_u32(data, 4)
    rows = _read_be_u32(data, 8)
    cols = _read_be_u32(data, 12)
    if expect_side is not None and (rows, cols) != (expect_side, expect_side):
        raise IdxError(f"dimension mismatch at offset 8: got {rows}x{cols}, expected {expect_side}x{expect_side}")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise IdxError(f"truncated stream at offset {len(data)}: expected {need} bytes total")
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols).copy()


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Parse an IDX label stream into a (count,) uint8 array of digits 0..9."""
    magic = _read_be_u32(data, 0)
    if magic != LABEL_MAGIC:
        raise IdxError(f"wrong label magic 0x{magic:08x} at offset 0, expected 0x{LABEL_MAGIC:08x}")
    count = _read_be_u32(data, 4)
    if len(data) < 8 + count:
        raise IdxError(f"truncated stream at offset {len(data)}: expected {8 + count} bytes total")
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=8)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise IdxError(f"label byte {labels[bad[0]]} > 9 at offset {8 + int(bad[0])}")
    return labels.copy()


def serialize_idx_images(grids: np.ndarray) -> bytes:
    """Inverse of parse_idx_images; parse -> serialize round-trips byte-identically."""
    grids = np.ascontiguousarray(grids, dtype=np.uint8)
    n, rows, cols = grids.shape
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + grids.tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes()


def read_idx_file(path: str | Path) -> bytes:
    """Read an IDX file, transparently decompressing .gz files."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def intensities_to_values(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 intensities 0..255 to reals in [-1, 1]: x / 127.5 - 1."""
    return (np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)


def values_to_intensities(values: np.ndarray) -> np.ndarray:
    """Quantize [-1, 1] values back to uint8; exact inverse on unresampled pixels."""
    return np.clip(np.round((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _rescale_bilinear(stack: np.ndarray, out_side: int) -> np.ndarray:
    """Corner-aligned bilinear resample of a (n, s, s) stack to (n, out, out).

    Written in lerp form so constant images stay exactly constant and
    integer-coordinate samples copy pixels bit-for-bit.
    """
    n, side, _ = stack.shape
    t = np.arange(out_side, dtype=np.float64)
    src = t * (side - 1) / (out_side - 1)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, side - 1)

    fy = frac[:, None]
    fx = frac[None, :]
    v00 = stack[:, i0][:, :, i0]
    v01 = stack[:, i0][:, :, i1]
    v10 = stack[:, i1][:, :, i0]
    v11 = stack[:, i1][:, :, i1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _rescale_pad(stack: np.ndarray, out_side: int) -> np.ndarray:
    """Alternative 28->29 rescale: pad one background row/column (bottom, right)."""
    n, side, _ = stack.shape
    out = np.full((n, out_side, out_side), BACKGROUND, dtype=np.float32)
    out[:, :side, :side] = stack
    return out


RESCALE_METHODS = ("bilinear", "pad")


def to_input(raw: RawDigit, rescale: str = "bilinear") -> Image:
    """Convert one RawDigit to a 29x29 Image in [-1, 1]."""
    stack = ingest_pixels(raw.pixels[None, :, :], rescale=rescale)
    return Image(stack[0], raw.label)


def ingest_pixels(grids: np.ndarray, rescale: str = "bilinear") -> np.ndarray:
    """Map a (n, 28, 28) uint8 stack to a (n, 29, 29) float32 stack in [-1, 1]."""
    values = intensities_to_values(grids)
    if rescale == "bilinear":
        return _rescale_bilinear(values, INPUT_SIDE)
    if rescale == "pad":
        return _rescale_pad(values, INPUT_SIDE)
    raise ValueError(f"unknown rescale method {rescale!r}; choose from {RESCALE_METHODS}")


def load_dataset(images_path: str | Path, labels_path: str | Path,
                 name: str = "", rescale: str = "bilinear") -> Dataset:
    """Load an IDX image/label file pair into a 29x29 Dataset."""
    grids = parse_idx_images(read_idx_file(images_path))
    labels = parse_idx_labels(read_idx_file(labels_path))
    if len(grids) != len(labels):
        raise IdxError(f"{len(grids)} images but {len(labels)} labels")
    return Dataset(ingest_pixels(grids, rescale=rescale), labels, name=name)


def resolve_mnist_paths(data_dir: str | Path) -> dict[str, Path]:
    """Locate the four official MNIST files (plain or .gz) under a directory."""
    data_dir = Path(data_dir)
    found = {}
    for key, stem in MNIST_FILES.items():
        for candidate in (data_dir / stem, data_dir / (stem + ".gz")):
            if candidate.exists():
                found[key] = candidate
                break
        else:
            raise FileNotFoundError(f"missing MNIST file {stem}[.gz] in {data_dir}")
    return found


def load_mnist(data_dir: str | Path, rescale: str = "bilinear") -> tuple[Dataset, Dataset]:
    """Load the official train/test pair from a directory as 29x29 datasets."""
    paths = resolve_mnist_paths(data_dir)
    train = load_dataset(paths["train_images"], paths["train_labels"], name="train", rescale=rescale)
    test = load_dataset(paths["test_images"], paths["test_labels"], name="test", rescale=rescale)
    return train, test


def dump_dataset_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write a dataset back to IDX files, re-quantizing values to 0..255.

    Paths ending in .gz are gzip-compressed.
    """
    img_bytes = serialize_idx_images(values_to_intensities(ds.pixels))
    lbl_bytes = serialize_idx_labels(ds.labels.astype(np.uint8))
    for path, payload in ((Path(images_path), img_bytes), (Path(labels_path), lbl_bytes)):
        if path.suffix == ".gz":
            payload = gzip.compress(payload)
        path.write_bytes(payload)
