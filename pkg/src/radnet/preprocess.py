"""HU windowing and in-plane resampling of CT volumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, KindError

KINDS = ("hu", "normalized", "mask")

BRAIN_WINDOW_CENTER = 40.0
BRAIN_WINDOW_WIDTH = 80.0
TARGET_SPACING_MM = 1.0
FOV_MM = 250.0


@dataclass
class Volume:
    """A slice stack ``voxels[z, y, x]`` with its voxel spacing in millimetres."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise KindError(f"unknown volume kind {self.kind!r}")
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume voxels must be a non-empty [Z, Y, X] array, got {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(not s > 0 for s in self.spacing_mm):
            raise DataError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.kind == "normalized":
            if self.voxels.size and (self.voxels.min() < 0 or self.voxels.max() > 1):
                raise DataError("normalized volume has voxels outside [0, 1]")
        elif self.kind == "mask":
            if not np.all((self.voxels == 0) | (self.voxels == 1)):
                raise DataError("mask volume must be binary")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def window_normalize(v: Volume, center: float = BRAIN_WINDOW_CENTER,
                     width: float = BRAIN_WINDOW_WIDTH) -> Volume:
    """Clamp HU to the window and rescale it to [0, 1]."""
    if v.kind != "hu":
        raise KindError(f"window_normalize needs an hu volume, got {v.kind!r}")
    if width <= 0:
        raise DataError("window width must be positive")
    lo = center - width / 2
    out = np.clip((v.voxels.astype(np.float64) - lo) / width, 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing_mm, "normalized")


def _inside(ys: np.ndarray, xs: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    Y, X = shape
    return (ys >= -0.5) & (ys <= Y - 0.5) & (xs >= -0.5) & (xs <= X - 0.5)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``img[..., Y, X]`` at fractional pixel coordinates.

    A sample is in support if it falls on the area of some pixel; samples
    between the outermost pixel centres and the image edge use the edge value.
    Each result is clamped to the range of its four neighbours, so the output
    never leaves the input's value range.
    """
    Y, X = img.shape[-2:]
    inside = _inside(ys, xs, (Y, X))
    yc = np.clip(ys, 0, Y - 1)
    xc = np.clip(xs, 0, X - 1)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, Y - 1)
    x1 = np.minimum(x0 + 1, X - 1)
    fy = yc - y0
    fx = xc - x0
    src = img.astype(np.float64, copy=False)
    a, b = src[..., y0, x0], src[..., y0, x1]
    c, d = src[..., y1, x0], src[..., y1, x1]
    # a + f*(b - a) keeps equal neighbours exact
    top = a + fx * (b - a)
    bottom = c + fx * (d - c)
    out = top + fy * (bottom - top)
    lo = np.minimum(np.minimum(a, b), np.minimum(c, d))
    hi = np.maximum(np.maximum(a, b), np.maximum(c, d))
    out = np.clip(out, lo, hi)
    return np.where(inside, out, fill)


def nearest_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill=0) -> np.ndarray:
    Y, X = img.shape[-2:]
    inside = _inside(ys, xs, (Y, X))
    yi = np.clip(np.floor(ys + 0.5), 0, Y - 1).astype(np.intp)
    xi = np.clip(np.floor(xs + 0.5), 0, X - 1).astype(np.intp)
    return np.where(inside, img[..., yi, xi], fill).astype(img.dtype, copy=False)


def resample_inplane(v: Volume, target_spacing: float = TARGET_SPACING_MM, fov: float = FOV_MM) -> Volume:
    """Resample every slice to ``fov / target_spacing`` pixels, centred on the slice centre.

    Images use bilinear interpolation, masks nearest neighbour; anything
    outside the original extent is filled with 0. The z axis is untouched.
    """
    if target_spacing <= 0 or fov <= 0:
        raise DataError("target spacing and field of view must be positive")
    n = int(round(fov / target_spacing))
    Z, Y, X = v.dims
    sz, sy, sx = v.spacing_mm
    offsets = (np.arange(n) - (n - 1) / 2) * target_spacing
    ys = (offsets / sy + (Y - 1) / 2)[:, None] * np.ones((1, n))
    xs = np.ones((n, 1)) * (offsets / sx + (X - 1) / 2)[None, :]
    if v.kind == "mask":
        out = nearest_sample(v.voxels, ys, xs, fill=0)
    else:
        out = bilinear_sample(v.voxels, ys, xs, fill=0.0)
        out = out.astype(np.float32 if v.kind == "normalized" else np.float64)
    return Volume(out, (sz, target_spacing, target_spacing), v.kind)


def preprocess_volume(v: Volume, center: float = BRAIN_WINDOW_CENTER, width: float = BRAIN_WINDOW_WIDTH,
                      target_spacing: float = TARGET_SPACING_MM, fov: float = FOV_MM) -> Volume:
    """Window then resample an HU volume; a mask volume is only resampled."""
    if v.kind == "mask":
        return resample_inplane(v, target_spacing, fov)
    return resample_inplane(window_normalize(v, center, width), target_spacing, fov)
