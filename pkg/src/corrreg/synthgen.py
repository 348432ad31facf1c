"""Random constrained affine transforms and synthetic mono-modal training pairs.

A sampled transform is ``A = R(angle) @ diag(sx, sy) @ [[1, shear], [0, 1]]``
about the image centre (the origin of normalized coordinates) followed by a
translation.  The upper-triangular factor has a positive diagonal, so the
decomposition back into factors is the unique QR factorization of ``A``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .core import AffineParams, BinaryMask, GridImage, Modality, warp_image, warp_mask
from .ingest import (
    PairManifestEntry,
    extract_segment,
    read_image,
    read_mask,
    resize_image,
    resize_mask,
    write_image,
    write_mask,
)

log = logging.getLogger(__name__)


@dataclass
class TransformSamplerConfig:
    rotation_deg: tuple[float, float] = (-20.0, 20.0)
    scale: tuple[float, float] = (0.9, 1.1)
    translation_frac: float = 0.2
    shear_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.rotation_deg = tuple(float(v) for v in self.rotation_deg)
        self.scale = tuple(float(v) for v in self.scale)
        lo, hi = self.rotation_deg
        if lo > hi:
            raise ValueError(f"rotation interval {self.rotation_deg} is not ordered")
        lo, hi = self.scale
        if lo > hi or lo <= 0:
            raise ValueError(f"scale interval {self.scale} must be ordered and positive")
        if self.translation_frac < 0 or self.shear_frac < 0:
            raise ValueError("translation_frac and shear_frac must be >= 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "TransformSamplerConfig":
        return cls((0.0, 0.0), (1.0, 1.0), 0.0, 0.0, seed)

    def describe(self) -> str:
        return (
            f"rotation [{self.rotation_deg[0]:g}, {self.rotation_deg[1]:g}] deg, "
            f"scale [{self.scale[0]:g}, {self.scale[1]:g}], "
            f"translation {100 * self.translation_frac:g}% of image size per axis, "
            f"shear {100 * self.shear_frac:g}%"
        )


@dataclass
class SyntheticSample:
    fixed: GridImage
    moving: GridImage
    fixed_mask: BinaryMask
    moving_mask: BinaryMask
    gt_params: AffineParams
    source_modality: Modality
    # provenance
    pair_id: str = ""
    patient_id: str = ""
    source_role: str = ""
    index: int = 0
    tags: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        return f"{self.pair_id}:{self.source_role}:{self.index}"


def compose_factors(angle_deg: float, sx: float, sy: float, shear: float, tx: float, ty: float) -> AffineParams:
    r = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]])
    upper = np.array([[sx, sx * shear], [0.0, sy]])
    a = rot @ upper
    return AffineParams([a[0, 0], a[0, 1], tx, a[1, 0], a[1, 1], ty])


def decompose_transform(t: AffineParams) -> dict[str, float]:
    """Invert :func:`compose_factors`; translations are reported as image-size fractions."""
    a = t.linear
    sx = float(np.hypot(a[0, 0], a[1, 0]))
    angle = float(np.degrees(np.arctan2(a[1, 0], a[0, 0])))
    c, s = a[0, 0] / sx, a[1, 0] / sx
    u12 = c * a[0, 1] + s * a[1, 1]
    sy = -s * a[0, 1] + c * a[1, 1]
    tx, ty = t.translation
    return {
        "rotation_deg": angle,
        "scale_x": sx,
        "scale_y": float(sy),
        "shear": float(u12 / sx),
        # normalized extent is 2, so a fraction f of the image size is 2f
        "translation_x_frac": float(tx / 2.0),
        "translation_y_frac": float(ty / 2.0),
    }


def within_bounds(t: AffineParams, cfg: TransformSamplerConfig, tol: float = 1e-9) -> bool:
    d = decompose_transform(t)
    return (
        cfg.rotation_deg[0] - tol <= d["rotation_deg"] <= cfg.rotation_deg[1] + tol
        and cfg.scale[0] - tol <= d["scale_x"] <= cfg.scale[1] + tol
        and cfg.scale[0] - tol <= d["scale_y"] <= cfg.scale[1] + tol
        and abs(d["shear"]) <= cfg.shear_frac + tol
        and abs(d["translation_x_frac"]) <= cfg.translation_frac + tol
        and abs(d["translation_y_frac"]) <= cfg.translation_frac + tol
    )


def sample_transform(cfg: TransformSamplerConfig, rng: np.random.Generator) -> AffineParams:
    """Uniform draw per factor, in the fixed order angle, sx, sy, shear, tx, ty."""
    angle = rng.uniform(*cfg.rotation_deg)
    sx = rng.uniform(*cfg.scale)
    sy = rng.uniform(*cfg.scale)
    shear = rng.uniform(-cfg.shear_frac, cfg.shear_frac)
    t = 2.0 * cfg.translation_frac
    tx = rng.uniform(-t, t)
    ty = rng.uniform(-t, t)
    return compose_factors(angle, sx, sy, shear, tx, ty)


def substream(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by ``(seed, *keys)``; independent of iteration order."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        digest = hashlib.sha256(str(k).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


def make_pair(
    src: GridImage,
    src_mask: BinaryMask,
    cfg: TransformSamplerConfig,
    rng: np.random.Generator,
    interp: str = "bilinear",
) -> SyntheticSample:
    """Deform ``src`` by a sampled transform: original is fixed, deformed is moving."""
    if src.shape != src_mask.shape:
        raise ValueError(f"image shape {src.shape} != mask shape {src_mask.shape}")
    gt = sample_transform(cfg, rng)
    moving = warp_image(src, gt, src.shape, interp)
    moving_mask = warp_mask(src_mask, gt, src.shape)
    return SyntheticSample(src, moving, src_mask, moving_mask, gt, src.modality)


def _load_source(entry: PairManifestEntry, role: str, resize_to) -> tuple[GridImage, BinaryMask]:
    if role == "fixed":
        img = read_image(entry.resolve("fixed_path"), entry.fixed_spacing_mm, Modality.XRAY)
        mask_path, spacing = entry.resolve("fixed_mask_path"), entry.fixed_spacing_mm
    else:
        img = read_image(entry.resolve("moving_path"), entry.moving_spacing_mm, Modality.HISTOLOGY)
        mask_path, spacing = entry.resolve("moving_mask_path"), entry.moving_spacing_mm
    if mask_path is not None:
        mask = read_mask(mask_path, spacing)
    else:
        # no mask annotated: treat the whole image as tissue
        mask = BinaryMask(np.ones(img.shape, dtype=np.uint8), spacing)
    if role == "fixed" and entry.box_roi is not None:
        img = extract_segment(img, entry.box_roi)
        mask = extract_segment(mask, entry.box_roi)
    if resize_to is not None:
        img = resize_image(img, resize_to)
        mask = resize_mask(mask, resize_to)
    return img, mask


def build_training_set(
    entries: Iterable[PairManifestEntry],
    per_image: int,
    cfg: TransformSamplerConfig,
    resize_to: Optional[tuple[int, int]] = None,
) -> Iterator[SyntheticSample]:
    """Yield ``per_image`` synthetic samples for both images of every entry.

    Order is entry order, then fixed before moving source, then sample index.
    Each sample draws from its own substream keyed by (seed, pair_id, role, index).
    """
    if per_image < 1:
        raise ValueError(f"per_image must be >= 1, got {per_image}")
    for entry in entries:
        for role in ("fixed", "moving"):
            img, mask = _load_source(entry, role, resize_to)
            for i in range(per_image):
                rng = substream(cfg.seed, entry.pair_id, role, i)
                s = make_pair(img, mask, cfg, rng)
                s.pair_id, s.patient_id, s.source_role, s.index = entry.pair_id, entry.patient_id, role, i
                yield s


def format_params(t: AffineParams) -> str:
    return " ".join(f"{v:.6f}" for v in t.theta)


def read_params_file(path) -> AffineParams:
    values = [float(v) for v in Path(path).read_text().split()]
    return AffineParams(values)


def write_sample_cache(samples: Iterable[SyntheticSample], out_dir) -> int:
    """One directory per sample with PNGs and a ``gt_params.txt``; returns the count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for n, s in enumerate(samples, start=1):
        d = out_dir / f"{n - 1:06d}_{s.pair_id}_{s.source_role}_{s.index}"
        d.mkdir(parents=True, exist_ok=True)
        write_image(s.fixed, d / "fixed.png")
        write_image(s.moving, d / "moving.png")
        write_mask(s.fixed_mask, d / "fixed_mask.png")
        write_mask(s.moving_mask, d / "moving_mask.png")
        (d / "gt_params.txt").write_text(format_params(s.gt_params) + "\n")
    return n
