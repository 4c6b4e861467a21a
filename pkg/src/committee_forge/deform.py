"""Per-epoch random elastic and affine deformation of digit datasets.

Displacement fields for 100 images at a time are laid out on one padded
batch grid (10x10 cells of 29x29 pixels = 290x290 interior, zero-padded to
310x310) and smoothed with a single Gaussian convolution pass, so cell
borders see their neighbours' noise instead of an artificial margin.  The
smoothing kernel is applied by a blocked routine that splits the interior
into 10-output column segments, each accumulated as 21 vertical strips;
blocks are independent, so the loop parallelizes without changing results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .config import apply_numba_thread_cap, rng_for
from .mnist_io import BACKGROUND, Dataset, Image

CELL_SIDE = 29          # one digit image
GRID_CELLS = 10         # cells per grid axis
INTERIOR_SIDE = CELL_SIDE * GRID_CELLS   # 290
PAD = 10                # zero band on each side
EXTENT = INTERIOR_SIDE + 2 * PAD         # 310
KERNEL_SIDE = 21
KERNEL_RADIUS = KERNEL_SIDE // 2         # 10 == PAD, so interior reads never leave the grid
BLOCK_ROWS = 10         # outputs per convolution block

GRID_IMAGES = GRID_CELLS * GRID_CELLS    # 100

FIELD_DISTRIBUTIONS = ("uniform", "normal")

# stream tags keeping the per-grid and per-image draws disjoint
_FIELD_TAG = 0x0F1E1D
_AFFINE_TAG = 0x0AFF1E


@dataclass
class DeformationParams:
    """One epoch's random-deformation settings.

    sigma/alpha shape the elastic part: a random field smoothed by a
    Gaussian of std-dev ``sigma`` pixels and scaled by ``alpha``.  The
    affine part draws rotation-or-shear angles bounded by
    ``max_angle_deg`` (``similar_angle_deg`` for the easily-confused
    digits in ``similar_labels``) and axis scalings within
    ``max_scale_pct`` percent.
    """

    sigma: float = 6.0
    alpha: float = 36.0
    max_angle_deg: float = 15.0
    similar_angle_deg: float = 7.5
    similar_labels: tuple[int, ...] = (1, 7)
    max_scale_pct: float = 15.0
    rng_seed: int = 0
    field_distribution: str = "uniform"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("max_angle_deg", "similar_angle_deg"):
            angle = getattr(self, name)
            if not 0 <= angle < 90:
                raise ValueError(f"{name} must be in [0, 90), got {angle}")
        if not 0 <= self.max_scale_pct < 100:
            raise ValueError(f"max_scale_pct must be in [0, 100), got {self.max_scale_pct}")
        if self.field_distribution not in FIELD_DISTRIBUTIONS:
            raise ValueError(f"field_distribution must be one of {FIELD_DISTRIBUTIONS}")


@dataclass
class GaussianKernel:
    values: np.ndarray  # (21, 21), non-negative, sums to 1
    sigma: float


@dataclass
class BatchGrid:
    """Displacement planes (dx, dy) for one 10x10 batch of images.

    Cell (i, j) of the batch owns the 29x29 window at interior offset
    (29*i, 29*j); the PAD-wide outer band stays zero.
    """

    dx: np.ndarray  # (310, 310) float64
    dy: np.ndarray

    def __post_init__(self):
        for plane in (self.dx, self.dy):
            if plane.shape != (EXTENT, EXTENT):
                raise ValueError(f"plane must be {EXTENT}x{EXTENT}, got {plane.shape}")


@dataclass
class DisplacementField:
    """Per-pixel (dx, dy) displacements, in pixels, for one image."""

    dx: np.ndarray
    dy: np.ndarray


@dataclass
class AffineMap:
    """2x2 linear map applied about the image center in (x, y) pixel offsets."""

    matrix: np.ndarray

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.eye(2))


def gaussian_kernel(sigma: float) -> GaussianKernel:
    """21x21 Gaussian on integer offsets -10..10, normalized to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    offsets = np.arange(-KERNEL_RADIUS, KERNEL_RADIUS + 1, dtype=np.float64)
    sq = offsets[:, None] ** 2 + offsets[None, :] ** 2
    values = np.exp(-sq / (2.0 * sigma * sigma))
    values /= values.sum()
    return GaussianKernel(values, float(sigma))


def random_field(rng: np.random.Generator, distribution: str = "uniform") -> BatchGrid:
    """Raw displacement planes: i.i.d. noise in the interior, zero padding band.

    dx is drawn before dy so a given generator state always yields the
    same grid.
    """
    dx = np.zeros((EXTENT, EXTENT))
    dy = np.zeros((EXTENT, EXTENT))
    interior = (INTERIOR_SIDE, INTERIOR_SIDE)
    if distribution == "uniform":
        dx[PAD:-PAD, PAD:-PAD] = rng.uniform(-1.0, 1.0, interior)
        dy[PAD:-PAD, PAD:-PAD] = rng.uniform(-1.0, 1.0, interior)
    elif distribution == "normal":
        dx[PAD:-PAD, PAD:-PAD] = rng.standard_normal(interior)
        dy[PAD:-PAD, PAD:-PAD] = rng.standard_normal(interior)
    else:
        raise ValueError(f"distribution must be one of {FIELD_DISTRIBUTIONS}")
    return BatchGrid(dx, dy)


@njit(cache=True)
def _conv_plane_naive(src, kernel, out):
    # plain four-loop reference: every interior output walks the full window
    pad = (kernel.shape[0] - 1) // 2
    n = src.shape[0]
    for r in range(pad, n - pad):
        for c in range(pad, n - pad):
            acc = 0.0
            for i in range(kernel.shape[0]):
                for j in range(kernel.shape[1]):
                    acc += kernel[i, j] * src[r + i - pad, c + j - pad]
            out[r, c] = acc


@njit(cache=True, parallel=True)
def _conv_plane_blocked(src, kernel, out):
    # one block = BLOCK_ROWS consecutive outputs in a single column; each
    # output sums kernel-width vertical strips, one per kernel column
    ksize = kernel.shape[0]
    pad = (ksize - 1) // 2
    interior = src.shape[0] - 2 * pad
    bands = interior // BLOCK_ROWS
    for block in prange(bands * interior):
        col = block // bands
        band = block % bands
        c = pad + col
        r0 = pad + band * BLOCK_ROWS
        for t in range(BLOCK_ROWS):
            r = r0 + t
            acc = 0.0
            for j in range(ksize):
                strip = 0.0
                for i in range(ksize):
                    strip += kernel[i, j] * src[r + i - pad, c + j - pad]
                acc += strip
            out[r, c] = acc


def _convolve(grid: BatchGrid, kernel: GaussianKernel, fn) -> BatchGrid:
    out_dx = np.zeros_like(grid.dx)
    out_dy = np.zeros_like(grid.dy)
    fn(grid.dx, kernel.values, out_dx)
    fn(grid.dy, kernel.values, out_dy)
    return BatchGrid(out_dx, out_dy)


def convolve_blocked(grid: BatchGrid, kernel: GaussianKernel) -> BatchGrid:
    """Smooth both displacement planes; interior replaced, band stays zero."""
    apply_numba_thread_cap()
    return _convolve(grid, kernel, _conv_plane_blocked)


def convolve_naive(grid: BatchGrid, kernel: GaussianKernel) -> BatchGrid:
    """Single-threaded four-loop convolution; the benchmarking baseline."""
    return _convolve(grid, kernel, _conv_plane_naive)


_CONV_BACKENDS = {"blocked": convolve_blocked, "naive": convolve_naive}


def smoothed_displacements(rng: np.random.Generator, params: DeformationParams,
                           backend: str = "blocked") -> BatchGrid:
    """Elastic displacement planes for one batch: alpha * smoothed noise."""
    grid = random_field(rng, params.field_distribution)
    smoothed = _CONV_BACKENDS[backend](grid, gaussian_kernel(params.sigma))
    return BatchGrid(params.alpha * smoothed.dx, params.alpha * smoothed.dy)


def cell_window(cell_index: int) -> tuple[int, int]:
    """Top-left (row, col) of a cell's 29x29 window in the padded planes."""
    gi, gj = divmod(cell_index, GRID_CELLS)
    return PAD + gi * CELL_SIDE, PAD + gj * CELL_SIDE


def cell_field(grid: BatchGrid, cell_index: int) -> DisplacementField:
    r0, c0 = cell_window(cell_index)
    return DisplacementField(grid.dx[r0:r0 + CELL_SIDE, c0:c0 + CELL_SIDE],
                             grid.dy[r0:r0 + CELL_SIDE, c0:c0 + CELL_SIDE])


def elastic_field(rng: np.random.Generator, sigma: float, alpha: float,
                  cell_index: int = 0, backend: str = "blocked") -> DisplacementField:
    """One image's elastic field, sliced out of a freshly smoothed batch grid."""
    params = DeformationParams(sigma=sigma, alpha=alpha)
    return cell_field(smoothed_displacements(rng, params, backend), cell_index)


def draw_affine(rng: np.random.Generator, label: int, params: DeformationParams) -> AffineMap:
    """Random rotation-or-shear plus axis scaling, as a target->source map.

    Draw order is fixed (mode, angle, x scale, y scale) so a seeded stream
    always produces the same transform.  The angle bound is
    ``similar_angle_deg`` for labels in ``similar_labels``, else
    ``max_angle_deg``; shearing displaces x proportionally to y with ratio
    tan(angle).
    """
    rotate = rng.integers(0, 2) == 0
    bound = params.similar_angle_deg if label in params.similar_labels else params.max_angle_deg
    theta = math.radians(rng.uniform(-bound, bound))
    spread = params.max_scale_pct / 100.0
    sx = rng.uniform(1.0 - spread, 1.0 + spread)
    sy = rng.uniform(1.0 - spread, 1.0 + spread)
    if rotate:
        mode = np.array([[math.cos(theta), -math.sin(theta)],
                         [math.sin(theta), math.cos(theta)]])
    else:
        mode = np.array([[1.0, math.tan(theta)],
                         [0.0, 1.0]])
    return AffineMap(mode @ np.diag([sx, sy]))


def warp_cells(cells: np.ndarray, dx: np.ndarray, dy: np.ndarray,
               matrices: np.ndarray, fill: float = BACKGROUND) -> np.ndarray:
    """Warp a stack of images by per-image affine maps plus displacement fields.

    For each target pixel the source position is affine(target) + (dx, dy);
    sampling is bilinear in lerp form (exact on integer coordinates), reads
    outside the frame return ``fill``, and outputs are clipped to [-1, 1].
    """
    k, side, _ = cells.shape
    center = (side - 1) / 2.0
    coords = np.arange(side, dtype=np.float64) - center
    ox = np.broadcast_to(coords[None, :], (side, side))   # x offset per target pixel
    oy = np.broadcast_to(coords[:, None], (side, side))   # y offset

    m = matrices.reshape(k, 2, 2)
    src_x = m[:, 0, 0, None, None] * ox + m[:, 0, 1, None, None] * oy + center + dx
    src_y = m[:, 1, 0, None, None] * ox + m[:, 1, 1, None, None] * oy + center + dy

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    x1 = x0 + 1
    y1 = y0 + 1

    def sample(yy, xx):
        valid = (yy >= 0) & (yy < side) & (xx >= 0) & (xx < side)
        idx_n = np.arange(k)[:, None, None]
        vals = cells[idx_n, np.clip(yy, 0, side - 1), np.clip(xx, 0, side - 1)]
        return np.where(valid, vals, fill)

    v00 = sample(y0, x0)
    v01 = sample(y0, x1)
    v10 = sample(y1, x0)
    v11 = sample(y1, x1)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    return np.clip(out, -1.0, 1.0).astype(cells.dtype)


def warp(image: Image, field: DisplacementField, affine: AffineMap,
         fill: float = BACKGROUND) -> Image:
    """Warp one image; see warp_cells for the sampling rules."""
    if field.dx.shape != image.pixels.shape:
        raise ValueError(f"field shape {field.dx.shape} != image shape {image.pixels.shape}")
    warped = warp_cells(image.pixels[None], field.dx[None], field.dy[None],
                        affine.matrix[None], fill=fill)
    return Image(warped[0], image.label)


def deform_dataset(ds: Dataset, params: DeformationParams, epoch_seed: int,
                   backend: str = "blocked") -> Dataset:
    """Deform every image: one smoothed batch grid per 100 images.

    Fully deterministic given (params.rng_seed, epoch_seed, image index):
    the elastic grid stream is keyed by batch index and the affine stream
    by image index, so scheduling or batch-level parallelism cannot change
    the result.
    """
    if ds.side != CELL_SIDE:
        raise ValueError(f"deformation expects {CELL_SIDE}x{CELL_SIDE} images, got side {ds.side}")
    n = len(ds)
    out = np.empty_like(ds.pixels)
    n_grids = (n + GRID_IMAGES - 1) // GRID_IMAGES
    for g in range(n_grids):
        field_rng = rng_for(params.rng_seed, epoch_seed, _FIELD_TAG, g)
        planes = smoothed_displacements(field_rng, params, backend)
        start = g * GRID_IMAGES
        count = min(GRID_IMAGES, n - start)
        dxs = np.empty((count, CELL_SIDE, CELL_SIDE))
        dys = np.empty((count, CELL_SIDE, CELL_SIDE))
        mats = np.empty((count, 2, 2))
        for j in range(count):
            r0, c0 = cell_window(j)
            dxs[j] = planes.dx[r0:r0 + CELL_SIDE, c0:c0 + CELL_SIDE]
            dys[j] = planes.dy[r0:r0 + CELL_SIDE, c0:c0 + CELL_SIDE]
            affine_rng = rng_for(params.rng_seed, epoch_seed, _AFFINE_TAG, start + j)
            mats[j] = draw_affine(affine_rng, int(ds.labels[start + j]), params).matrix
        out[start:start + count] = warp_cells(ds.pixels[start:start + count], dxs, dys, mats)
    return Dataset(out, ds.labels.copy(), name=f"{ds.name}/deformed" if ds.name else "deformed")


def batch_grid_count(n_images: int) -> int:
    """Number of batch grids needed to deform n images (100 per grid)."""
    return (n_images + GRID_IMAGES - 1) // GRID_IMAGES
