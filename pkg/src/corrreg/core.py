"""Domain types and affine geometry in normalized image coordinates.

Coordinates follow the align-corners convention: pixel (0, 0) sits at
(-1, -1) and pixel (W-1, H-1) at (1, 1).  An :class:`AffineParams` is a
*backward* sampling map: it takes normalized coordinates of the output
(fixed) grid to normalized coordinates of the moving image.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SingularTransform

DET_EPS = 1e-6


class Modality(str, enum.Enum):
    XRAY = "xray"
    HISTOLOGY = "histology"
    SYNTHETIC = "synthetic"


def _as_spacing(spacing) -> tuple[float, float]:
    if np.isscalar(spacing):
        spacing = (spacing, spacing)
    sx, sy = (float(s) for s in spacing)
    if not (sx > 0 and sy > 0):
        raise ValueError(f"spacing must be strictly positive, got {(sx, sy)}")
    return sx, sy


@dataclass
class GridImage:
    """2-D raster of shape (H, W, C) with physical pixel spacing in mm.

    ``standardized`` marks images that went through backbone mean/std
    standardization; those are allowed outside [0, 1].
    """

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    modality: Modality = Modality.SYNTHETIC
    standardized: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"GridImage pixels must be HxWx1 or HxWx3, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("GridImage must be non-empty")
        if not np.all(np.isfinite(px)):
            raise ValueError("GridImage intensities must be finite")
        if not self.standardized and px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("GridImage intensities must lie in [0, 1]")
        self.pixels = px
        self.spacing = _as_spacing(self.spacing)
        self.modality = Modality(self.modality)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class BinaryMask:
    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim != 2:
            raise ValueError(f"BinaryMask must be 2-D, got shape {px.shape}")
        if not np.all((px == 0) | (px == 1)):
            raise ValueError("BinaryMask values must be exactly 0 or 1")
        self.pixels = px.astype(np.uint8)
        self.spacing = _as_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class AffineParams:
    """Six affine parameters laid out as ``[a11, a12, tx, a21, a22, ty]``."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if theta.shape != (6,):
            raise ValueError(f"AffineParams needs 6 values, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("AffineParams entries must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "AffineParams":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:2, :3].reshape(-1))

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        m = np.eye(3)
        m[:2, :] = self.theta.reshape(2, 3)
        return m

    @property
    def linear(self) -> np.ndarray:
        return self.theta.reshape(2, 3)[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.theta.reshape(2, 3)[:, 2]

    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def tolist(self) -> list[float]:
        return [float(v) for v in self.theta]

    def __eq__(self, other):
        if not isinstance(other, AffineParams):
            return NotImplemented
        return bool(np.array_equal(self.theta, other.theta))

    def __hash__(self):
        return hash(self.theta.tobytes())


@dataclass
class LandmarkSet:
    """Named points in pixel coordinates (x, y) of the owning image."""

    points: np.ndarray
    ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i) for i in range(len(pts)))
        if len(ids) != len(pts):
            raise ValueError(f"{len(ids)} ids for {len(pts)} points")
        self.points = pts
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {i: p for i, p in zip(self.ids, self.points)}


# --- affine algebra ---------------------------------------------------------


def identity_params() -> AffineParams:
    return AffineParams(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))


def anchor_params(theta_hat, alpha: float = 0.1) -> AffineParams:
    """Identity-anchored output parameterization: ``alpha * theta_hat + identity``."""
    theta_hat = np.asarray(theta_hat, dtype=np.float64).reshape(-1)
    if theta_hat.shape != (6,) or not np.all(np.isfinite(theta_hat)):
        raise ValueError("theta_hat must be a finite 6-vector")
    if not (np.isfinite(alpha) and alpha >= 0):
        raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
    return AffineParams(alpha * theta_hat + identity_params().theta)


def compose(outer: AffineParams, inner: AffineParams) -> AffineParams:
    """Map equal to applying ``inner`` first, then ``outer``."""
    return AffineParams.from_matrix(outer.matrix() @ inner.matrix())


def invert(t: AffineParams) -> AffineParams:
    det = t.det()
    if not abs(det) > DET_EPS:
        raise SingularTransform(f"affine linear part is singular (det={det:.3e})")
    a = t.linear
    inv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    m = np.eye(3)
    m[:2, :2] = inv
    m[:2, 2] = -inv @ t.translation
    return AffineParams.from_matrix(m)


def apply_to_points(t: AffineParams, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts @ t.linear.T + t.translation


def _check_shape(image_shape) -> tuple[int, int]:
    h, w = int(image_shape[0]), int(image_shape[1])
    if h < 2 or w < 2:
        raise ValueError(f"image shape must be at least 2x2 for normalization, got {(h, w)}")
    return h, w


def pixel_to_norm(pts_px, image_shape) -> np.ndarray:
    h, w = _check_shape(image_shape)
    pts = np.asarray(pts_px, dtype=np.float64)
    scale = np.array([2.0 / (w - 1), 2.0 / (h - 1)])
    return pts * scale - 1.0


def norm_to_pixel(pts_norm, image_shape) -> np.ndarray:
    h, w = _check_shape(image_shape)
    pts = np.asarray(pts_norm, dtype=np.float64)
    scale = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return (pts + 1.0) * scale


# --- resampling -------------------------------------------------------------


def _norm_axis(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def sample_coordinates(t: AffineParams, in_shape, out_shape) -> tuple[np.ndarray, np.ndarray]:
    """Moving-image pixel coordinates (x, y) sampled by each output pixel."""
    hi, wi = int(in_shape[0]), int(in_shape[1])
    ho, wo = int(out_shape[0]), int(out_shape[1])
    if ho < 1 or wo < 1:
        raise ValueError(f"invalid output shape {out_shape}")
    yn, xn = np.meshgrid(_norm_axis(ho), _norm_axis(wo), indexing="ij")
    a = t.theta
    xs = a[0] * xn + a[1] * yn + a[2]
    ys = a[3] * xn + a[4] * yn + a[5]
    xs = (xs + 1.0) * ((wi - 1) / 2.0)
    ys = (ys + 1.0) * ((hi - 1) / 2.0)
    # snap round-off so grid-aligned maps (e.g. identity) sample pixels exactly
    for c in (xs, ys):
        r = np.round(c)
        near = np.abs(c - r) < 1e-9
        c[near] = r[near]
    return xs, ys


def _sample_bilinear(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # src: (H, W, C); zero padding outside, matching grid_sample(padding_mode="zeros")
    h, w = src.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = (xs - x0)[..., None]
    wy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + (src.shape[2],), dtype=np.float64)
    for dy, fy in ((0, 1.0 - wy), (1, wy)):
        for dx, fx in ((0, 1.0 - wx), (1, wx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros_like(out)
            vals[ok] = src[yi[ok], xi[ok]]
            out += fx * fy * vals
    return out


def _sample_nearest(src: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = src.shape[:2]
    xi = np.floor(xs + 0.5).astype(np.int64)
    yi = np.floor(ys + 0.5).astype(np.int64)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(xs.shape + src.shape[2:], dtype=src.dtype)
    out[ok] = src[yi[ok], xi[ok]]
    return out


def resample(src: np.ndarray, t: AffineParams, out_shape, interp: str = "bilinear") -> np.ndarray:
    """Backward-warp a raw (H, W) or (H, W, C) array."""
    squeeze = src.ndim == 2
    arr = src[:, :, None] if squeeze else src
    xs, ys = sample_coordinates(t, arr.shape[:2], out_shape)
    if interp == "bilinear":
        out = _sample_bilinear(arr.astype(np.float64), xs, ys)
    elif interp == "nearest":
        out = _sample_nearest(arr, xs, ys)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return out[:, :, 0] if squeeze else out


def warp_image(moving: GridImage, t: AffineParams, out_shape=None, interp: str = "bilinear") -> GridImage:
    """Render ``moving`` on an output grid: ``out(x) = moving(t(x))``, zero outside."""
    out_shape = moving.shape if out_shape is None else tuple(out_shape)
    px = resample(moving.pixels, t, out_shape, interp)
    if interp == "bilinear" and not moving.standardized:
        px = np.clip(px, 0.0, 1.0)
    return GridImage(px, moving.spacing, moving.modality, moving.standardized)


def warp_mask(mask: BinaryMask, t: AffineParams, out_shape=None) -> BinaryMask:
    out_shape = mask.shape if out_shape is None else tuple(out_shape)
    return BinaryMask(resample(mask.pixels, t, out_shape, "nearest"), mask.spacing)


def rotation_params(degrees: float) -> AffineParams:
    r = np.deg2rad(degrees)
    c, s = np.cos(r), np.sin(r)
    return AffineParams([c, -s, 0.0, s, c, 0.0])


def translation_params(tx: float, ty: float = 0.0) -> AffineParams:
    return AffineParams([1.0, 0.0, tx, 0.0, 1.0, ty])


def scale_params(sx: float, sy: float | None = None) -> AffineParams:
    sy = sx if sy is None else sy
    return AffineParams([sx, 0.0, 0.0, 0.0, sy, 0.0])


def params_from_sequence(values: Sequence[float]) -> AffineParams:
    return AffineParams(np.asarray(values, dtype=np.float64))
