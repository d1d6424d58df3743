"""Deterministic image preparation shared by both feature pipelines.

The local-feature path masks the background to black before keypoint
detection; the global-feature path crops to the bounding box, zooms on the
center, square-crops and resizes before embedding.  All functions are pure:
the same input yields a bit-identical output.

Resampling is bilinear with the half-pixel-center convention: output pixel o
samples source coordinate (o + 0.5) * scale - 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from spotmatch.model import CaptureImage, ImageRaster, SpotmatchError, ValidationError


@dataclass(frozen=True)
class PreprocessConfig:
    """Geometry and normalization knobs for the global-feature path."""

    target_size: int = 440
    zoom_factor: float = 2.0
    normalize_mean: tuple[float, ...] = (0.0,)
    normalize_std: tuple[float, ...] = (1.0,)
    mask_fill: float = 0.0

    def __post_init__(self) -> None:
        if self.target_size < 16:
            raise ValidationError(f"target_size must be >= 16, got {self.target_size}")
        if self.zoom_factor < 1.0:
            raise ValidationError(f"zoom_factor must be >= 1, got {self.zoom_factor}")
        if len(self.normalize_mean) != len(self.normalize_std):
            raise ValidationError("normalize_mean and normalize_std must have equal arity")
        if any(s <= 0 for s in self.normalize_std):
            raise ValidationError("normalize_std components must be > 0")
        if not 0.0 <= self.mask_fill <= 1.0:
            raise ValidationError("mask_fill must lie in [0, 1]")


def apply_orientation(capture: CaptureImage) -> ImageRaster:
    """Rotate the raster by 90 degrees x turns counterclockwise (head up)."""
    turns = capture.rotation_quarter_turns % 4
    if turns == 0:
        return capture.raster
    return ImageRaster(np.rot90(capture.raster.pixels, k=turns, axes=(0, 1)).copy())


def orient_mask(mask: np.ndarray, rotation_quarter_turns: int) -> np.ndarray:
    """Rotate a mask with the same convention as apply_orientation."""
    turns = rotation_quarter_turns % 4
    if turns == 0:
        return mask
    return np.rot90(mask, k=turns, axes=(0, 1)).copy()


def apply_mask(raster: ImageRaster, mask: np.ndarray, fill: float = 0.0) -> ImageRaster:
    """Keep foreground pixels, replace background with ``fill``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (raster.height, raster.width):
        raise SpotmatchError(
            f"mask shape {mask.shape} does not match raster "
            f"{(raster.height, raster.width)}"
        )
    out = np.where(mask[:, :, None], raster.pixels, np.float32(fill))
    return ImageRaster(out)


def sample_bilinear(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (h, w[, c]) ``pixels`` at float coordinates, clamped at edges."""
    h, w = pixels.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(pixels.dtype)
    fy = (ys - y0).astype(pixels.dtype)
    if pixels.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; returns the same dtype family."""
    h, w = pixels.shape[:2]
    sy = h / out_h
    sx = w / out_w
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return sample_bilinear(pixels, grid_x, grid_y)


def crop_zoom_resize(
    raster: ImageRaster,
    bbox: Optional[tuple[int, int, int, int]],
    config: PreprocessConfig,
) -> ImageRaster:
    """Crop to bbox, zoom on its center, square-crop, resize to target size.

    The zoomed region has sides bbox_side / zoom_factor centered in the bbox;
    the square crop is the largest centered square of that region.
    """
    px = raster.pixels
    if bbox is None:
        bbox = (0, 0, raster.width, raster.height)
    x, y, w, h = (int(v) for v in bbox)
    if w < 2 or h < 2:
        raise SpotmatchError(f"bbox too small: {w}x{h}")
    if x < 0 or y < 0 or x + w > raster.width or y + h > raster.height:
        raise SpotmatchError(f"bbox {bbox} exceeds raster bounds")
    region = px[y : y + h, x : x + w]

    zw = max(2, int(round(w / config.zoom_factor)))
    zh = max(2, int(round(h / config.zoom_factor)))
    zx = (w - zw) // 2
    zy = (h - zh) // 2
    region = region[zy : zy + zh, zx : zx + zw]

    side = min(zw, zh)
    sx = (zw - side) // 2
    sy = (zh - side) // 2
    region = region[sy : sy + side, sx : sx + side]

    if side == config.target_size:
        out = region.astype(np.float32)
    else:
        out = resize_bilinear(region.astype(np.float64), config.target_size, config.target_size)
    return ImageRaster(np.clip(out, 0.0, 1.0).astype(np.float32))


def normalize_pixels(raster: ImageRaster, config: PreprocessConfig) -> np.ndarray:
    """Per-channel (value - mean) / std; returns a float32 tensor, not a raster."""
    mean = np.asarray(config.normalize_mean, dtype=np.float32)
    std = np.asarray(config.normalize_std, dtype=np.float32)
    if mean.size != raster.channels:
        raise SpotmatchError(
            f"normalization arity {mean.size} does not match {raster.channels} channels"
        )
    return (raster.pixels - mean[None, None, :]) / std[None, None, :]


def to_grayscale(raster: ImageRaster) -> np.ndarray:
    """Rec. 601 luma as a (h, w) float32 array; identity for 1-channel input."""
    px = raster.pixels
    if px.shape[2] == 1:
        return px[:, :, 0]
    return (0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]).astype(np.float32)


# ---------------------------------------------------------------------------
# File I/O: 8-bit PNG/JPEG decoded to [0, 1]; masks are single-channel 0/255.


def load_image(path: str | Path) -> ImageRaster:
    with Image.open(path) as im:
        if im.mode in ("L", "I;16"):
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageRaster(arr)


def save_image(raster: ImageRaster, path: str | Path) -> None:
    arr = np.clip(np.rint(raster.pixels * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        im = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        im = Image.fromarray(arr, mode="RGB")
    im.save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
