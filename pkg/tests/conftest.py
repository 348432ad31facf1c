from __future__ import annotations

import numpy as np
import pytest

from corrreg.core import GridImage, LandmarkSet, Modality
from corrreg.ingest import PairManifestEntry, write_image, write_landmarks, write_manifest, write_mask


def _disk(shape, center, radius):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius**2).astype(np.uint8)


def write_toy_manifest(root, n_patients=3, shape=(48, 40), landmarks=True, seed=0):
    """Small smooth images, disk masks and 3 landmarks per pair; returns the manifest path."""
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(n_patients):
        pid = f"P{k:02d}"
        d = root / pid
        yy, xx = np.mgrid[: shape[0], : shape[1]]
        base = 0.5 + 0.4 * np.sin(xx / (4 + k)) * np.cos(yy / 5)
        mask = _disk(shape, (shape[1] / 2, shape[0] / 2), min(shape) / 3)
        write_image(base * mask, d / "fixed.png")
        colour = np.stack([base, base * 0.8, base * 0.6], axis=2) * mask[..., None]
        write_image(colour, d / "moving.png")
        write_mask(mask, d / "fixed_mask.png")
        write_mask(mask, d / "moving_mask.png")
        row = dict(
            pair_id=f"{pid}_seg1", patient_id=pid, fixed_path=f"{pid}/fixed.png", moving_path=f"{pid}/moving.png",
            fixed_mask_path=f"{pid}/fixed_mask.png", moving_mask_path=f"{pid}/moving_mask.png",
            fixed_spacing_mm=0.1, moving_spacing_mm=0.08,
        )
        if landmarks:
            pts = rng.uniform([5, 5], [shape[1] - 6, shape[0] - 6], size=(3, 2))
            ids = ("L1", "L2", "L3")
            write_landmarks(LandmarkSet(pts, ids), d / "fixed_landmarks.csv")
            write_landmarks(LandmarkSet(pts + rng.normal(0, 1, pts.shape), ids), d / "moving_landmarks.csv")
            row.update(fixed_landmarks_path=f"{pid}/fixed_landmarks.csv", moving_landmarks_path=f"{pid}/moving_landmarks.csv")
        entries.append(PairManifestEntry(**row))
    path = root / "manifest.csv"
    write_manifest(entries, path)
    return path


@pytest.fixture
def toy_manifest(tmp_path):
    return write_toy_manifest(tmp_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_image():
    yy, xx = np.mgrid[:64, :64]
    px = 0.5 + 0.25 * np.sin(xx / 6.0) + 0.2 * np.cos(yy / 9.0)
    return GridImage(px[..., None], 1.0, Modality.SYNTHETIC)
