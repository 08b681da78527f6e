"""Grayscale image handling and slice selection.

Images are plain 2-D float32 numpy arrays with intensities in [0, 1]
(row-major, ``img[row, col]``).  All operations here are pure and keep
that invariant.

The slice-selection algorithm scores each slice of a patient by the
number of dark pixels inside a centred inner rectangle, then keeps the
slices whose count is at least the patient's mean count.  Slices of a
healthy lung have a large dark region, so low-count slices are the ones
with little or no visible lung.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError

GrayImage = np.ndarray  # 2-D float32 array, values in [0, 1]


def as_gray(arr) -> GrayImage:
    """Validate and convert an array-like to a GrayImage.

    Raises DimensionError for non-2-D input and DataError when values
    fall outside [0, 1].
    """
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"expected a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError(
            f"image values outside [0, 1]: min={img.min():.4g} max={img.max():.4g}"
        )
    return img


@dataclass(frozen=True)
class SelectionParams:
    """Parameters of the dark-pixel slice selection.

    inner_fraction: per-dimension size of the centred inner rectangle,
        in (0, 1].
    dark_threshold: intensity below which a pixel counts as dark.
    """

    inner_fraction: float = 0.6
    dark_threshold: float = 0.3

    def __post_init__(self):
        if not (0.0 < self.inner_fraction <= 1.0):
            raise DataError(f"inner_fraction must be in (0, 1], got {self.inner_fraction}")
        if not (0.0 <= self.dark_threshold <= 1.0):
            raise DataError(f"dark_threshold must be in [0, 1], got {self.dark_threshold}")


def rescale_u8(raw: np.ndarray) -> GrayImage:
    """Map 8-bit intensities onto [0, 1] by dividing by 255."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise DimensionError(f"expected a 2-D byte grid, got shape {raw.shape}")
    return raw.astype(np.float32) / np.float32(255.0)


def to_u8(img: GrayImage) -> np.ndarray:
    """Quantize a [0, 1] image back to 8-bit (round to nearest)."""
    return np.rint(np.asarray(img, dtype=np.float64) * 255.0).astype(np.uint8)


def resize(img: GrayImage, side: int) -> GrayImage:
    """Bilinear resize to ``side`` x ``side``.

    Sampling is half-pixel centred: output pixel (i, j) samples the
    source at ``(i + 0.5) * H / side - 0.5`` (same for columns), with
    coordinates clamped to the source grid, then interpolates the four
    neighbouring pixels.  This convention must not change; generated
    datasets depend on it being reproducible.
    """
    if side < 1:
        raise DataError(f"target side must be >= 1, got {side}")
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape

    ys = np.clip((np.arange(side) + 0.5) * (h / side) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(side) + 0.5) * (w / side) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]

    top = img[np.ix_(y0, x0)] * (1.0 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1.0 - fx) + img[np.ix_(y1, x1)] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def hflip(img: GrayImage) -> GrayImage:
    """Mirror left-right: column j maps to column width-1-j."""
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


def inner_rect(height: int, width: int, inner_fraction: float):
    """Centred inner rectangle as (top, left, rect_h, rect_w).

    Side lengths are round-half-up of ``inner_fraction * dim``; the
    leftover border is split evenly with the extra pixel going to the
    bottom/right.
    """
    rh = int(np.floor(inner_fraction * height + 0.5))
    rw = int(np.floor(inner_fraction * width + 0.5))
    top = (height - rh) // 2
    left = (width - rw) // 2
    return top, left, rh, rw


def dark_pixel_count(img: GrayImage, p: SelectionParams) -> int:
    """Count pixels strictly below the dark threshold in the inner rectangle."""
    img = np.asarray(img)
    top, left, rh, rw = inner_rect(img.shape[0], img.shape[1], p.inner_fraction)
    window = img[top : top + rh, left : left + rw]
    return int(np.count_nonzero(window < p.dark_threshold))


def select_large_lung_slices(slices: list[GrayImage], p: SelectionParams) -> list[int]:
    """Indices of slices worth keeping for a patient, in original order.

    The per-patient threshold is the mean dark-pixel count over all the
    patient's slices; slices at or above the mean are kept.  The result
    is never empty (the maximum of a nonempty set is >= its mean).
    """
    if len(slices) == 0:
        raise DataError("cannot select slices from an empty list")
    counts = np.array([dark_pixel_count(s, p) for s in slices], dtype=np.float64)
    threshold = counts.mean()
    return [i for i, c in enumerate(counts) if c >= threshold]


# --- PGM (P5) files ----------------------------------------------------------
#
# Only 8-bit binary PGM with maxval 255 is supported, which is all the
# generator emits. Header tokens may be separated by whitespace and '#'
# comment lines.

# match() anchors at pos, so no ^ here (^ would only ever match at byte 0)
_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_token(buf: bytes, pos: int):
    m = _PGM_TOKEN.match(buf, pos)
    if not m:
        raise DataError("malformed PGM header")
    return m.group(1), m.end()


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file into a uint8 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = buf[pos : pos + width * height]
    if len(raster) != width * height:
        raise DataError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, img: np.ndarray) -> None:
    """Write a uint8 array (or [0,1] image, quantized) as binary PGM."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_u8(as_gray(arr))
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {arr.shape}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def load_gray_pgm(path) -> GrayImage:
    """Read a PGM file and rescale it to a [0, 1] GrayImage."""
    return rescale_u8(read_pgm(path))
