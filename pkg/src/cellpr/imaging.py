"""Grayscale image container, PGM/PPM I/O and bilinear resampling.

All resampling uses the half-pixel-center convention: pixel ``i`` covers the
continuous interval ``[i, i + 1)`` and is sampled at ``i + 0.5``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .boxes import BoundingBox, DegenerateBoxError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class GrayImage:
    """Row-major 8-bit intensities held as float64, shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D pixel array, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 255 or not np.all(np.isfinite(px))):
            raise ValueError("pixel intensities must lie in [0, 255]")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, value: float) -> "GrayImage":
        return cls(np.full((height, width), float(value)))


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            break
        if c == b"#":
            f.readline()
            if tok:
                break
            continue
        if c.isspace():
            if tok:
                break
            continue
        tok += c
    return tok


def read_pnm(path: str | os.PathLike) -> GrayImage:
    """Read a binary PGM (P5) or PPM (P6); color is reduced to luma."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: unsupported image format {magic!r}")
        width, height, maxval = (int(_read_token(f)) for _ in range(3))
        if maxval <= 0 or maxval > 65535:
            raise ValueError(f"{path}: bad maxval {maxval}")
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        channels = 3 if magic == b"P6" else 1
        count = width * height * channels
        data = np.frombuffer(f.read(count * np.dtype(dtype).itemsize), dtype=dtype, count=count)
    arr = data.astype(float).reshape(height, width, channels) * (255.0 / maxval)
    if channels == 3:
        arr = arr @ LUMA
    else:
        arr = arr[..., 0]
    return GrayImage(np.clip(arr, 0.0, 255.0))


def write_pgm(path: str | os.PathLike, image: GrayImage) -> None:
    data = np.clip(np.rint(image.pixels), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (image.width, image.height))
        f.write(data.tobytes())


def _axis_weights(start: float, extent: float, n_in: int, n_out: int):
    """Source indices and weights for sampling ``n_out`` points across [start, start+extent)."""
    pos = start + (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resample(pixels: np.ndarray, region: tuple[float, float, float, float],
             out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly sample ``region`` = (w_l, h_l, w_r, h_r) of ``pixels`` onto an out_h x out_w grid."""
    w_l, h_l, w_r, h_r = region
    n_rows, n_cols = pixels.shape
    r_lo, r_hi, r_f = _axis_weights(h_l, h_r - h_l, n_rows, out_h)
    c_lo, c_hi, c_f = _axis_weights(w_l, w_r - w_l, n_cols, out_w)
    rows = pixels[r_lo] * (1 - r_f)[:, None] + pixels[r_hi] * r_f[:, None]
    return rows[:, c_lo] * (1 - c_f)[None, :] + rows[:, c_hi] * c_f[None, :]


def resize(image: GrayImage, width: int, height: int) -> GrayImage:
    out = resample(image.pixels, (0.0, 0.0, float(image.width), float(image.height)), height, width)
    return GrayImage(np.clip(out, 0.0, 255.0))


def crop_patch(image: GrayImage, box: BoundingBox, out_size: tuple[int, int] = (224, 224)) -> GrayImage:
    """Crop ``box`` (clamped to the image) and resize it to ``out_size`` = (width, height)."""
    c = box.clamp(image.width, image.height)
    if c.width <= 0 or c.height <= 0:
        raise DegenerateBoxError(f"box {box} has zero area inside a {image.width}x{image.height} image")
    out_w, out_h = out_size
    out = resample(image.pixels, (c.w_l, c.h_l, c.w_r, c.h_r), out_h, out_w)
    return GrayImage(np.clip(out, 0.0, 255.0))


VECTOR_CROP_MAX_PIXELS = 64 * 64


def _axis_weights_many(start: np.ndarray, extent: np.ndarray, n_in: int, n_out: int):
    pos = start[:, None] + (np.arange(n_out) + 0.5)[None, :] * (extent / n_out)[:, None] - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def crop_patches(image: GrayImage, coords: np.ndarray, out_size: tuple[int, int] = (224, 224)) -> np.ndarray:
    """Vectorized ``crop_patch`` for an (n, 4) array of box coordinates; returns (n, out_h, out_w).

    Arithmetic follows ``resample`` step for step, so each slice equals the single-box crop exactly.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 4)
    out_w, out_h = out_size
    px = image.pixels
    n_rows, n_cols = px.shape
    w_l = np.clip(coords[:, 0], 0.0, image.width)
    h_l = np.clip(coords[:, 1], 0.0, image.height)
    w_r = np.clip(coords[:, 2], 0.0, image.width)
    h_r = np.clip(coords[:, 3], 0.0, image.height)
    if np.any(w_r - w_l <= 0) or np.any(h_r - h_l <= 0):
        raise DegenerateBoxError("a box has zero area inside the image")
    if out_h * out_w > VECTOR_CROP_MAX_PIXELS:
        # large patches are memory bound; the per-box path is faster there
        return np.stack([np.clip(resample(px, (a, b, c, d), out_h, out_w), 0.0, 255.0)
                         for a, b, c, d in zip(w_l, h_l, w_r, h_r)]) if len(coords) else np.zeros((0, out_h, out_w))
    r_lo, r_hi, r_f = _axis_weights_many(h_l, h_r - h_l, n_rows, out_h)
    c_lo, c_hi, c_f = _axis_weights_many(w_l, w_r - w_l, n_cols, out_w)
    rf = r_f[:, :, None]
    cf = c_f[:, None, :]
    rl, rh = r_lo[:, :, None], r_hi[:, :, None]
    cl, ch = c_lo[:, None, :], c_hi[:, None, :]
    left = px[rl, cl] * (1 - rf) + px[rh, cl] * rf
    right = px[rl, ch] * (1 - rf) + px[rh, ch] * rf
    return np.clip(left * (1 - cf) + right * cf, 0.0, 255.0)


def block_downsample(pixels: np.ndarray, size: int) -> np.ndarray:
    """Area-average an (H, W) array down to (size, size); H and W must be multiples of ``size``."""
    h, w = pixels.shape
    if h % size or w % size:
        return resample(pixels, (0.0, 0.0, float(w), float(h)), size, size)
    return pixels.reshape(size, h // size, size, w // size).mean(axis=(1, 3))
