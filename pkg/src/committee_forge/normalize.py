"""Bounding-box width normalization and the family of preprocessed training sets.

Width normalization rescales a digit horizontally so its ink bounding box
is a chosen number of pixels wide, keeping height and box center fixed.
Applied with targets 10..20 (step 2) it yields six preprocessed variants
of a dataset, which together with the untouched original make the seven
training sets the committee experiments use.  Digit 1 is exempt: its box
is so narrow that stretching it distorts the stroke, so ones pass through
unchanged under every width spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mnist_io import BACKGROUND, Dataset, Image

ALLOWED_WIDTHS = (10, 12, 14, 16, 18, 20)
EXEMPT_LABEL = 1


class BlankImageError(ValueError):
    """Raised when an operation needs ink but the image is all background."""


@dataclass(frozen=True)
class BoundingBox:
    left: int
    right: int
    top: int
    bottom: int

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1


@dataclass(frozen=True)
class WidthSpec:
    """Either a target box width from ALLOWED_WIDTHS or None for pass-through."""

    target: int | None = None

    def __post_init__(self):
        if self.target is not None and self.target not in ALLOWED_WIDTHS:
            raise ValueError(f"target width {self.target} not in {ALLOWED_WIDTHS} (or None for ORIG)")

    @property
    def name(self) -> str:
        return "ORIG" if self.target is None else f"WN{self.target}"

    @classmethod
    def parse(cls, text: str) -> "WidthSpec":
        text = text.strip().upper()
        if text in ("ORIG", "ORIGINAL"):
            return cls(None)
        if text.startswith("WN"):
            text = text[2:]
        return cls(int(text))


ORIG = WidthSpec(None)


def bounding_box(img: Image | np.ndarray, threshold: float = 0.0) -> BoundingBox:
    """Tightest box around pixels brighter than background + threshold."""
    pixels = img.pixels if isinstance(img, Image) else img
    mask = pixels > BACKGROUND + threshold
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        raise BlankImageError("no foreground")
    return BoundingBox(int(cols[0]), int(cols[-1]), int(rows[0]), int(rows[-1]))


def _rescale_rows(pixels: np.ndarray, box: BoundingBox, target: int) -> np.ndarray:
    """Horizontally rescale ink about the box center so its width becomes target."""
    side = pixels.shape[1]
    center = (box.left + box.right) / 2.0
    factor = box.width / float(target)
    x = np.arange(side, dtype=np.float64)
    src = center + (x - center) * factor
    x0 = np.floor(src).astype(np.int64)
    fx = src - x0
    x1 = x0 + 1

    def column(xx):
        valid = (xx >= 0) & (xx < side)
        vals = pixels[:, np.clip(xx, 0, side - 1)]
        return np.where(valid[None, :], vals, BACKGROUND)

    v0 = column(x0)
    v1 = column(x1)
    out = v0 + fx[None, :] * (v1 - v0)
    return np.clip(out, -1.0, 1.0).astype(pixels.dtype)


def width_normalize(img: Image, spec: WidthSpec) -> Image:
    """Normalize one image's box width to the spec; ORIG and digit 1 pass through."""
    if spec.target is None or img.label == EXEMPT_LABEL:
        return img
    box = bounding_box(img)
    if box.width == spec.target:
        return img
    return Image(_rescale_rows(img.pixels, box, spec.target), img.label)


def normalize_dataset(ds: Dataset, spec: WidthSpec) -> Dataset:
    """Apply a width spec to every image; the ORIG spec returns ds itself."""
    if spec.target is None:
        return ds
    out = np.empty_like(ds.pixels)
    for i in range(len(ds)):
        out[i] = width_normalize(ds[i], spec).pixels
    return Dataset(out, ds.labels.copy(), name=f"WN{spec.target}")


def build_normalized_sets(ds: Dataset) -> list[Dataset]:
    """The seven training sets: WN10, WN12, ..., WN20, then the original."""
    sets = [normalize_dataset(ds, WidthSpec(w)) for w in ALLOWED_WIDTHS]
    sets.append(Dataset(ds.pixels.copy(), ds.labels.copy(), name="ORIG"))
    return sets
