"""Desk-scale demo corpus built from the images bundled with scikit-image.

Each source picture becomes one "patient" with a grayscale x-ray-like fixed
image and a colour histology-like moving image.  Tissue masks are smooth
random blobs on a black background; the moving image is deformed by a
known affine map so landmarks correspond exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import LandmarkSet, apply_to_points, invert, norm_to_pixel, pixel_to_norm, resample
from .ingest import PairManifestEntry, resize_array, write_image, write_landmarks, write_manifest, write_mask
from .synthgen import TransformSamplerConfig, sample_transform, substream

# images that ship inside the scikit-image wheel (no download needed)
SKIMAGE_NAMES = (
    "astronaut", "brick", "camera", "cat", "cell", "chelsea", "clock", "coffee", "coins", "colorwheel",
    "grass", "gravel", "hubble_deep_field", "immunohistochemistry", "logo", "microaneurysms", "moon",
    "page", "retina", "rocket", "shepp_logan_phantom", "text", "motorcycle_left", "motorcycle_right",
)


def load_skimage(name: str) -> np.ndarray:
    from skimage import data, img_as_float

    if name == "motorcycle_left":
        img = data.stereo_motorcycle()[0]
    elif name == "motorcycle_right":
        img = data.stereo_motorcycle()[1]
    else:
        img = getattr(data, name)()
    img = img_as_float(img)
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    return np.clip(img, 0.0, 1.0)


def _gray(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 2 else img @ np.array([0.299, 0.587, 0.114])


def _stain(gray: np.ndarray) -> np.ndarray:
    """Pink/purple colouring of a grayscale picture."""
    od = 1.0 - gray
    hema = np.array([0.35, 0.55, 0.25])
    eosin = np.array([0.05, 0.45, 0.15])
    rgb = 1.0 - od[..., None] * (0.6 * hema + 0.4 * eosin) * 1.6
    return np.clip(rgb, 0.0, 1.0)


def blob_mask(shape, rng: np.random.Generator) -> np.ndarray:
    """Irregular elliptical tissue blob covering roughly half the field."""
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    cx, cy = rng.uniform(-0.15, 0.15, 2)
    rx, ry = rng.uniform(0.45, 0.7, 2)
    ang = rng.uniform(0, np.pi)
    c, s = np.cos(ang), np.sin(ang)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    wobble = ndimage.gaussian_filter(rng.normal(size=shape), sigma=min(shape) / 10, mode="wrap")
    wobble *= 0.25 / (np.abs(wobble).max() + 1e-12)
    return ((u**2 + v**2) < 1.0 + wobble).astype(np.uint8)


def _crop_square(img: np.ndarray, rng: np.random.Generator, frac: float = 0.85) -> np.ndarray:
    h, w = img.shape[:2]
    side = int(min(h, w) * frac)
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    return img[y0 : y0 + side, x0 : x0 + side]


def build_demo_corpus(
    out_dir,
    n_patients: int = 24,
    fixed_shape=(256, 256),
    moving_shape=(288, 272),
    n_landmarks: int = 8,
    seed: int = 0,
    fixed_spacing_mm: float = 0.1,
    moving_spacing_mm: float = 0.08,
) -> Path:
    """Write images, masks, landmarks and ``manifest.csv`` under ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    names = SKIMAGE_NAMES[:n_patients]
    if len(names) < n_patients:
        raise ValueError(f"only {len(SKIMAGE_NAMES)} bundled images are available")
    sampler = TransformSamplerConfig(seed=seed)
    entries = []
    for k, name in enumerate(names):
        rng = substream(seed, "corpus", name)
        src = _crop_square(load_skimage(name), rng)
        gray = _gray(src)
        colour = src if src.ndim == 3 else _stain(gray)
        fixed = resize_array(gray, fixed_shape)
        mask = blob_mask(fixed_shape, rng)
        fixed = fixed * mask
        hist_aligned = resize_array(colour, moving_shape) * resize_array(mask, moving_shape, "nearest")[..., None]
        hist_mask = resize_array(mask, moving_shape, "nearest")
        # moving(x) = aligned(T(x)); registration should recover T^-1
        t = sample_transform(sampler, substream(seed, "pair-transform", name))
        moving = np.clip(resample(hist_aligned, t, moving_shape, "bilinear"), 0, 1)
        moving_mask = resample(hist_mask, t, moving_shape, "nearest")

        inside = np.argwhere(mask > 0)
        pts = []
        while len(pts) < n_landmarks:
            y, x = inside[rng.integers(len(inside))]
            q = norm_to_pixel(apply_to_points(invert(t), pixel_to_norm([[x, y]], fixed_shape)), moving_shape)[0]
            if 0 <= q[0] <= moving_shape[1] - 1 and 0 <= q[1] <= moving_shape[0] - 1:
                pts.append(((float(x), float(y)), (float(q[0]), float(q[1]))))
        ids = tuple(f"L{i + 1}" for i in range(n_landmarks))
        pid = f"P{k:02d}"
        pair_id = f"{pid}_seg1"
        d = out_dir / pid
        write_image(fixed, d / "fixed.png")
        write_image(moving, d / "moving.png")
        write_mask(mask, d / "fixed_mask.png")
        write_mask(moving_mask, d / "moving_mask.png")
        write_landmarks(LandmarkSet(np.array([p for p, _ in pts]), ids), d / "fixed_landmarks.csv")
        write_landmarks(LandmarkSet(np.array([q for _, q in pts]), ids), d / "moving_landmarks.csv")
        (d / "true_params.txt").write_text(" ".join(f"{v:.9f}" for v in invert(t).theta) + "\n")
        entries.append(
            PairManifestEntry(
                pair_id=pair_id,
                patient_id=pid,
                fixed_path=f"{pid}/fixed.png",
                moving_path=f"{pid}/moving.png",
                fixed_mask_path=f"{pid}/fixed_mask.png",
                moving_mask_path=f"{pid}/moving_mask.png",
                fixed_landmarks_path=f"{pid}/fixed_landmarks.csv",
                moving_landmarks_path=f"{pid}/moving_landmarks.csv",
                fixed_spacing_mm=fixed_spacing_mm,
                moving_spacing_mm=moving_spacing_mm,
            )
        )
    manifest = out_dir / "manifest.csv"
    write_manifest(entries, manifest)
    return manifest
