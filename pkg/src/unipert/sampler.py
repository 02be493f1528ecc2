"""Image pools and crop sampling.

Crops are axis-aligned windows bilinearly resized (half-pixel centers) back
to the canonical encoder input size. The attention-guided crop is the
deterministic anchor view: a square centered on the encoder's attention
peak, sized to cover every grid cell at >= half the peak activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ImageTooSmallError, PoolTooSmallError, ShapeMismatchError
from .tensorops import SeededRng, as_tensor

DEFAULT_SCALE_MIN = 0.5


@dataclass(frozen=True)
class CropSpec:
    """Pixel window: top-left (x0, y0), extents (w, h)."""

    x0: int
    y0: int
    w: int
    h: int

    def validate(self, img_h: int, img_w: int, patch: int) -> "CropSpec":
        ok = (
            0 <= self.x0
            and 0 <= self.y0
            and self.x0 + self.w <= img_w
            and self.y0 + self.h <= img_h
            and self.w >= patch
            and self.h >= patch
        )
        if not ok:
            raise ShapeMismatchError(f"{self} invalid for {img_h}x{img_w} image, patch {patch}")
        return self

    def as_row(self) -> list:
        return [self.x0, self.y0, self.w, self.h]


@dataclass
class ImagePool:
    """Stack of same-shape H x W x C images in [0, 1]."""

    images: np.ndarray  # (n, H, W, C)
    role: str = "source"

    def __post_init__(self):
        arr = as_tensor(self.images, rank=4)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pool images must lie in [0, 1]")
        self.images = arr

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.images[i]


def crop_resize(image: np.ndarray, spec: CropSpec, out_h: int, out_w: int) -> np.ndarray:
    return kernels.bilinear_resize(image, spec.y0, spec.x0, spec.h, spec.w, out_h, out_w)


def crop_resize_vjp(cotangent: np.ndarray, spec: CropSpec, full_h: int, full_w: int) -> np.ndarray:
    return kernels.bilinear_resize_vjp(cotangent, spec.y0, spec.x0, spec.h, spec.w, full_h, full_w)


def sample_sources(pool: ImagePool, n: int, rng: SeededRng):
    """Uniform sample of n images without replacement (order shuffled).

    Returns (indices, images); indices feed the seen/unseen bookkeeping.
    """
    if n > len(pool):
        raise PoolTooSmallError(f"asked for {n} of {len(pool)} images")
    if n == 0:
        return np.empty(0, dtype=np.int64), []
    idx = rng.generator().choice(len(pool), size=n, replace=False)
    return idx, [pool[i] for i in idx]


def _draw_extent(gen: np.random.Generator, full: int, patch: int, scale_min: float) -> int:
    scale = gen.uniform(scale_min, 1.0)
    return max(patch, int(round(scale * full)))


def _draw_offset(gen: np.random.Generator, full: int, extent: int) -> int:
    return int(gen.integers(0, full - extent + 1))


def random_crop(image, rng: SeededRng, *, patch: int, out_h: int, out_w: int,
                scale_min: float = DEFAULT_SCALE_MIN):
    """Crop with per-axis scale ~ U[scale_min, 1], uniform offsets, then
    bilinear resize to the canonical size. Draw order: sh, sw, y0, x0."""
    image = as_tensor(image, rank=3)
    img_h, img_w = image.shape[0], image.shape[1]
    if img_h < patch or img_w < patch:
        raise ImageTooSmallError(f"{img_h}x{img_w} image smaller than patch {patch}")
    gen = rng.generator()
    h = _draw_extent(gen, img_h, patch, scale_min)
    w = _draw_extent(gen, img_w, patch, scale_min)
    y0 = _draw_offset(gen, img_h, h)
    x0 = _draw_offset(gen, img_w, w)
    spec = CropSpec(x0, y0, w, h).validate(img_h, img_w, patch)
    return spec, crop_resize(image, spec, out_h, out_w)


def attention_guided_crop(image, enc):
    """Deterministic salient crop.

    Center: pixel center of the argmax attention cell (ties -> lowest
    row-major index). Side: the smallest square covering all cells with
    attention >= 0.5 * max, floored at the patch size and clipped to the
    image. Resized to the encoder's canonical input size.
    """
    image = as_tensor(image, rank=3)
    dims = enc.dims
    att = enc.forward(image).attention_map
    flat = int(np.argmax(att))
    gi, gj = divmod(flat, dims.grid_w)
    patch = dims.patch
    cy = (gi + 0.5) * patch
    cx = (gj + 0.5) * patch

    mask = att >= 0.5 * att.max()
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    span_h = (rows.max() - rows.min() + 1) * patch
    span_w = (cols.max() - cols.min() + 1) * patch
    img_h, img_w = image.shape[0], image.shape[1]
    side = int(max(span_h, span_w, patch))
    side = min(side, img_h, img_w)
    y0 = int(np.clip(round(cy - side / 2), 0, img_h - side))
    x0 = int(np.clip(round(cx - side / 2), 0, img_w - side))
    spec = CropSpec(x0, y0, side, side).validate(img_h, img_w, patch)
    return spec, crop_resize(image, spec, dims.height, dims.width)


def build_crop_set(target, m: int, enc, rng: SeededRng, *, scale_min: float = DEFAULT_SCALE_MIN,
                   with_attention: bool = True):
    """m random crops plus (by default) the attention-guided crop, attention
    crop last. Returns (specs, crops)."""
    dims = enc.dims
    specs = []
    crops = []
    for i in range(m):
        spec, crop = random_crop(
            target, rng.spawn("crop", i),
            patch=dims.patch, out_h=dims.height, out_w=dims.width, scale_min=scale_min,
        )
        specs.append(spec)
        crops.append(crop)
    if with_attention:
        spec, crop = attention_guided_crop(target, enc)
        specs.append(spec)
        crops.append(crop)
    return specs, crops


def enumerate_grid_crops(img_h: int, img_w: int, *, patch: int,
                         scales=(0.5, 1.0), lattice: int = 4):
    """Finite crop family for the unbiasedness check: square windows at the
    listed scales with offsets on a pixel lattice."""
    specs = []
    for scale in scales:
        h = max(patch, int(round(scale * img_h)))
        w = max(patch, int(round(scale * img_w)))
        for y0 in range(0, img_h - h + 1, lattice):
            for x0 in range(0, img_w - w + 1, lattice):
                specs.append(CropSpec(x0, y0, w, h).validate(img_h, img_w, patch))
    return specs
