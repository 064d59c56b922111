"""Slide ingestion, HSV tissue masking, patch-grid extraction and augmentation.

Slides here are flat 8-bit RGB images with a declared microns-per-pixel;
pyramidal WSI containers are out of scope. Masking finds patch-grid cells
whose pixels look like stained tissue in HSV space, rejecting white
background (low saturation) and black artifacts (low value).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .numerics import RngStream

DEFAULT_PATCH_SIZE = 224
DEFAULT_MICRONS_PER_PIXEL = 0.5

# Tissue predicate defaults: a pixel counts as tissue iff its saturation is
# at least S_MIN and its value lies in [V_MIN, V_MAX]. A grid cell is
# eligible iff at least MIN_TISSUE_FRAC of its pixels are tissue.
S_MIN = 0.07
V_MIN = 0.10
V_MAX = 0.95
MIN_TISSUE_FRAC = 0.5


@dataclass
class SlideImage:
    """A desk-scale stand-in for a whole-slide image."""

    pixels: np.ndarray  # (height, width, 3) uint8, row-major
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL
    slide_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"slide pixels must be (h, w, 3), got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"slide pixels must be uint8, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("slide must have positive width and height")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchRef:
    """Location of one square patch inside a slide (top-left corner)."""

    slide_id: str
    x: int
    y: int
    size: int

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("patch size must be > 0")
        if self.x < 0 or self.y < 0:
            raise ValueError("patch coordinates must be >= 0")


def load_slide(path, microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL,
               slide_id: str | None = None) -> SlideImage:
    """Read an 8-bit RGB PNG (any PIL-readable raster, converted to RGB)."""
    p = Path(path)
    with Image.open(p) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return SlideImage(arr, microns_per_pixel, slide_id if slide_id is not None else p.stem)


def save_slide(slide: SlideImage, path) -> None:
    Image.fromarray(slide.pixels, mode="RGB").save(Path(path), format="PNG")


def rgb_to_hsv(r, g, b):
    """8-bit RGB to (hue degrees [0, 360), saturation [0, 1], value [0, 1]).

    Accepts scalars or equally shaped arrays. Hue is 0 wherever saturation
    is 0 (achromatic pixels).
    """
    scalar = np.ndim(r) == 0 and np.ndim(g) == 0 and np.ndim(b) == 0
    rf = np.asarray(r, dtype=np.float64) / 255.0
    gf = np.asarray(g, dtype=np.float64) / 255.0
    bf = np.asarray(b, dtype=np.float64) / 255.0
    mx = np.maximum(np.maximum(rf, gf), bf)
    mn = np.minimum(np.minimum(rf, gf), bf)
    diff = mx - mn
    v = mx
    s = np.where(mx > 0, np.divide(diff, mx, out=np.zeros_like(mx), where=mx > 0), 0.0)
    safe = np.where(diff > 0, diff, 1.0)
    h = np.select(
        [diff == 0, mx == rf, mx == gf],
        [0.0,
         60.0 * (((gf - bf) / safe) % 6.0),
         60.0 * (((bf - rf) / safe) + 2.0)],
        default=60.0 * (((rf - gf) / safe) + 4.0),
    )
    h = np.where(h >= 360.0, h - 360.0, h)
    if scalar:
        return float(h), float(s), float(v)
    return h, s, v


def hsv_to_rgb(h, s, v):
    """Inverse of rgb_to_hsv; returns float channels in [0, 1]."""
    h = np.asarray(h, dtype=np.float64) % 360.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = v * s
    x = c * (1.0 - np.abs((h / 60.0) % 2.0 - 1.0))
    m = v - c
    sector = np.floor(h / 60.0).astype(np.int64) % 6
    zeros = np.zeros_like(c)
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    return r + m, g + m, b + m


@dataclass
class TissueMask:
    """Boolean eligibility grid over non-overlapping patch cells."""

    grid: np.ndarray  # (grid_h, grid_w) bool
    stride: int
    patch_size: int

    def eligible_coords(self) -> np.ndarray:
        """(k, 2) array of eligible patch top-left (x, y), sorted by (y, x)."""
        cells = np.argwhere(self.grid)  # rows of (gy, gx), already (y, x)-sorted
        return cells[:, ::-1] * self.stride

    def eligible_refs(self, slide_id: str) -> list[PatchRef]:
        return [PatchRef(slide_id, int(x), int(y), self.patch_size)
                for x, y in self.eligible_coords()]


def tissue_mask(slide: SlideImage, patch_size: int = DEFAULT_PATCH_SIZE, *,
                stride: int | None = None, s_min: float = S_MIN,
                v_min: float = V_MIN, v_max: float = V_MAX,
                min_tissue_frac: float = MIN_TISSUE_FRAC) -> TissueMask:
    """Grid-cell eligibility from HSV thresholds. Deterministic.

    The grid has floor(width/stride) x floor(height/stride) cells; each
    cell's window is the patch_size square at (gx*stride, gy*stride).
    Windows that would overhang the slide (possible when stride <
    patch_size) are ineligible so every eligible cell can be extracted.
    """
    if patch_size <= 0:
        raise ValueError("patch size must be > 0")
    if patch_size > min(slide.width, slide.height):
        raise ValueError(
            f"patch size {patch_size} exceeds slide dimensions "
            f"{slide.width}x{slide.height}")
    stride = patch_size if stride is None else int(stride)
    if stride <= 0:
        raise ValueError("stride must be > 0")

    px = slide.pixels
    _, s, v = rgb_to_hsv(px[:, :, 0], px[:, :, 1], px[:, :, 2])
    tissue = (s >= s_min) & (v >= v_min) & (v <= v_max)

    # Summed-area table makes per-window pixel counts O(1) per cell.
    ii = np.zeros((slide.height + 1, slide.width + 1), dtype=np.int64)
    ii[1:, 1:] = tissue.cumsum(0).cumsum(1)

    grid_w = slide.width // stride
    grid_h = slide.height // stride
    grid = np.zeros((grid_h, grid_w), dtype=bool)
    need = min_tissue_frac * patch_size * patch_size
    for gy in range(grid_h):
        y0 = gy * stride
        y1 = y0 + patch_size
        if y1 > slide.height:
            continue
        for gx in range(grid_w):
            x0 = gx * stride
            x1 = x0 + patch_size
            if x1 > slide.width:
                continue
            count = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
            grid[gy, gx] = count >= need
    return TissueMask(grid=grid, stride=stride, patch_size=patch_size)


def save_mask_png(mask: TissueMask, path) -> None:
    """One pixel per grid cell, white = eligible."""
    img = (mask.grid.astype(np.uint8)) * 255
    Image.fromarray(img, mode="L").save(Path(path), format="PNG")


def save_mask_csv(mask: TissueMask, path) -> None:
    """Eligible patch top-left coordinates as CSV rows of x,y."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for x, y in mask.eligible_coords():
            writer.writerow([int(x), int(y)])


def extract_patch(slide: SlideImage, ref: PatchRef) -> np.ndarray:
    """Exact pixel copy of the square region addressed by ``ref``."""
    if ref.x + ref.size > slide.width or ref.y + ref.size > slide.height:
        raise ValueError(
            f"patch at ({ref.x}, {ref.y}) size {ref.size} exceeds slide "
            f"bounds {slide.width}x{slide.height}")
    return slide.pixels[ref.y:ref.y + ref.size, ref.x:ref.x + ref.size].copy()


@dataclass
class AugmentConfig:
    """Ranges for color jitter, affine warps and additive Gaussian noise.

    Every range is (low, high) sampled uniformly. The defaults are mild:
    factor jitter around 1, small geometric distortions, full rotations and
    light 8-bit noise.
    """

    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)
    hue_degrees: tuple[float, float] = (-18.0, 18.0)
    rotation_degrees: tuple[float, float] = (-180.0, 180.0)
    shear_degrees: tuple[float, float] = (-5.0, 5.0)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    scale: tuple[float, float] = (0.9, 1.1)
    noise_sigma: float = 2.5

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue_degrees",
                     "rotation_degrees", "shear_degrees", "translate_frac", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is not well-ordered")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """Degenerate config under which augment_patch is the identity."""
        return cls(brightness=(1.0, 1.0), contrast=(1.0, 1.0), saturation=(1.0, 1.0),
                   hue_degrees=(0.0, 0.0), rotation_degrees=(0.0, 0.0),
                   shear_degrees=(0.0, 0.0), translate_frac=(0.0, 0.0),
                   scale=(1.0, 1.0), noise_sigma=0.0)


def _luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


def augment_patch(patch: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """Color jitter, then affine warp, then Gaussian noise, on one patch.

    Output has the same shape and dtype as the input. Deterministic given
    (patch, cfg, stream): draws happen in a fixed order regardless of which
    transforms end up active.
    """
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"expected a square RGB patch, got shape {patch.shape}")
    size = patch.shape[0]

    b = float(rng.uniform(*cfg.brightness))
    c = float(rng.uniform(*cfg.contrast))
    s = float(rng.uniform(*cfg.saturation))
    dh = float(rng.uniform(*cfg.hue_degrees))
    theta = float(rng.uniform(*cfg.rotation_degrees))
    shear = float(rng.uniform(*cfg.shear_degrees))
    tx = float(rng.uniform(*cfg.translate_frac)) * size
    ty = float(rng.uniform(*cfg.translate_frac)) * size
    k = float(rng.uniform(*cfg.scale))

    img = patch.astype(np.float64)

    img = np.clip(img * b, 0.0, 255.0)
    img = np.clip(c * img + (1.0 - c) * _luminance(img).mean(), 0.0, 255.0)
    img = np.clip(s * img + (1.0 - s) * _luminance(img)[:, :, None], 0.0, 255.0)
    if dh != 0.0:
        h, sat, val = rgb_to_hsv(img[:, :, 0], img[:, :, 1], img[:, :, 2])
        r, g, bl = hsv_to_rgb((h + dh) % 360.0, sat, val)
        img = np.stack([r, g, bl], axis=2) * 255.0

    if theta != 0.0 or shear != 0.0 or k != 1.0 or tx != 0.0 or ty != 0.0:
        rad = np.deg2rad(theta)
        cos_t, sin_t = np.cos(rad), np.sin(rad)
        rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
        sh = np.array([[1.0, 0.0], [np.tan(np.deg2rad(shear)), 1.0]])  # horizontal shear
        fwd = rot @ sh @ (k * np.eye(2))  # acts on (row, col) offsets from center
        center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
        shift = np.array([ty, tx])
        pull = np.linalg.inv(fwd)
        offset = center - pull @ (center + shift)
        warped = np.empty_like(img)
        for ch in range(3):
            warped[:, :, ch] = ndimage.affine_transform(
                img[:, :, ch], pull, offset=offset, order=1, mode="reflect")
        img = warped

    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
