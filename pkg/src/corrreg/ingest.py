"""Dataset manifests, image/mask/landmark IO and network input preparation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import BinaryMask, GridImage, LandmarkSet, Modality, identity_params, resample
from .errors import (
    AlreadyStandardized,
    BoxOutOfRange,
    DataError,
    DuplicateLandmarkId,
    DuplicatePairId,
    MalformedRow,
    MissingFile,
    NonPositiveSpacing,
    OutOfBounds,
    UnmatchedLandmarks,
)

log = logging.getLogger(__name__)

NETWORK_SIZE = (224, 224)
# torchvision ImageNet statistics, the published normalization for the supported backbones
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MANIFEST_COLUMNS = (
    "pair_id",
    "patient_id",
    "fixed_path",
    "moving_path",
    "fixed_mask_path",
    "moving_mask_path",
    "fixed_landmarks_path",
    "moving_landmarks_path",
    "fixed_spacing_mm",
    "moving_spacing_mm",
    "box_roi",
)
_PATH_COLUMNS = MANIFEST_COLUMNS[2:8]


@dataclass
class PairManifestEntry:
    pair_id: str
    patient_id: str
    fixed_path: str
    moving_path: str
    fixed_mask_path: Optional[str] = None
    moving_mask_path: Optional[str] = None
    fixed_landmarks_path: Optional[str] = None
    moving_landmarks_path: Optional[str] = None
    fixed_spacing_mm: float = 1.0
    moving_spacing_mm: float = 1.0
    box_roi: Optional[tuple[int, int, int, int]] = None
    # directory relative paths are resolved against; not serialized
    root: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, name: str) -> Optional[Path]:
        value = getattr(self, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    def to_row(self) -> dict[str, str]:
        row = {}
        for col in MANIFEST_COLUMNS:
            v = getattr(self, col)
            if v is None:
                row[col] = ""
            elif col == "box_roi":
                row[col] = " ".join(str(int(c)) for c in v)
            elif isinstance(v, float):
                row[col] = repr(v)
            else:
                row[col] = str(v)
        return row


@dataclass
class RegistrationPair:
    fixed: GridImage
    moving: GridImage
    fixed_mask: Optional[BinaryMask] = None
    moving_mask: Optional[BinaryMask] = None
    fixed_landmarks: Optional[LandmarkSet] = None
    moving_landmarks: Optional[LandmarkSet] = None
    meta: Optional[PairManifestEntry] = None

    def __post_init__(self):
        for img, mask, name in ((self.fixed, self.fixed_mask, "fixed"), (self.moving, self.moving_mask, "moving")):
            if mask is not None and mask.shape != img.shape:
                raise DataError(f"{name} mask shape {mask.shape} != image shape {img.shape}")
        if self.fixed_landmarks is not None and self.moving_landmarks is not None:
            if sorted(self.fixed_landmarks.ids) != sorted(self.moving_landmarks.ids):
                raise UnmatchedLandmarks(
                    f"landmark ids differ: fixed={sorted(self.fixed_landmarks.ids)} "
                    f"moving={sorted(self.moving_landmarks.ids)}"
                )


# --- manifest ---------------------------------------------------------------


def _parse_spacing(row: dict, col: str, pair_id: str, lineno: int) -> float:
    raw = (row.get(col) or "").strip()
    try:
        value = float(raw)
    except ValueError:
        raise MalformedRow(f"line {lineno} ({pair_id}): {col}={raw!r} is not a number") from None
    if not (np.isfinite(value) and value > 0):
        raise NonPositiveSpacing(f"line {lineno} ({pair_id}): {col} must be > 0, got {raw}")
    return value


def _parse_box(raw: str, pair_id: str, lineno: int):
    raw = raw.strip()
    if not raw:
        return None
    parts = raw.replace(",", " ").replace(";", " ").split()
    try:
        box = tuple(int(p) for p in parts)
    except ValueError:
        raise MalformedRow(f"line {lineno} ({pair_id}): box_roi={raw!r} is not four integers") from None
    if len(box) != 4:
        raise MalformedRow(f"line {lineno} ({pair_id}): box_roi needs 4 values, got {len(box)}")
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise BoxOutOfRange(f"line {lineno} ({pair_id}): box_roi {box} must satisfy x0<x1, y0<y1")
    return box


def image_size(path: Path) -> tuple[int, int]:
    """(H, W) read from the file header."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def _check_box(box, shape, what: str):
    x0, y0, x1, y1 = box
    h, w = shape
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h or not (x0 < x1 and y0 < y1):
        raise BoxOutOfRange(f"{what}: box {tuple(box)} outside image of size (H={h}, W={w})")


def load_manifest(path, check_files: bool = True) -> list[PairManifestEntry]:
    """Parse and validate a manifest CSV; entries come back in file order."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent
    entries: list[PairManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("pair_id", "patient_id", "fixed_path", "moving_path") if c not in header]
        if missing:
            raise MalformedRow(f"{path}: header is missing required columns {missing}")
        unknown = [c for c in header if c not in MANIFEST_COLUMNS]
        if unknown:
            raise MalformedRow(f"{path}: unknown columns {unknown}; expected {list(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if None in row:
                raise MalformedRow(f"line {lineno}: too many fields")
            pair_id = (row.get("pair_id") or "").strip()
            if not pair_id:
                raise MalformedRow(f"line {lineno}: empty pair_id")
            if pair_id in seen:
                raise DuplicatePairId(f"duplicate pair_id {pair_id!r} (line {lineno})")
            seen.add(pair_id)
            patient_id = (row.get("patient_id") or "").strip()
            if not patient_id:
                raise MalformedRow(f"line {lineno} ({pair_id}): empty patient_id")
            kwargs = {c: ((row.get(c) or "").strip() or None) for c in _PATH_COLUMNS}
            for req in ("fixed_path", "moving_path"):
                if kwargs[req] is None:
                    raise MalformedRow(f"line {lineno} ({pair_id}): {req} is empty")
            entry = PairManifestEntry(
                pair_id=pair_id,
                patient_id=patient_id,
                fixed_spacing_mm=_parse_spacing(row, "fixed_spacing_mm", pair_id, lineno),
                moving_spacing_mm=_parse_spacing(row, "moving_spacing_mm", pair_id, lineno),
                box_roi=_parse_box(row.get("box_roi") or "", pair_id, lineno),
                root=root,
                **kwargs,
            )
            if check_files:
                for col in _PATH_COLUMNS:
                    p = entry.resolve(col)
                    if p is not None and not p.is_file():
                        raise MissingFile(f"line {lineno} ({pair_id}): {col} does not exist: {p}")
                if entry.box_roi is not None:
                    _check_box(entry.box_roi, image_size(entry.resolve("fixed_path")), f"line {lineno} ({pair_id})")
            entries.append(entry)
    return entries


def write_manifest(entries, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for e in entries:
            writer.writerow(e.to_row())


# --- images -----------------------------------------------------------------


def read_raw_image(path) -> np.ndarray:
    """Pixel array (H, W) or (H, W, 3) in the file's native dtype."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "P", "CMYK", "YCbCr", "LA"):
            im = im.convert("RGB" if im.mode != "LA" else "L")
        elif im.mode == "1":
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr


def minmax(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def read_image(path, spacing=1.0, modality=Modality.SYNTHETIC) -> GridImage:
    return GridImage(minmax(read_raw_image(path)), spacing, modality)


def read_mask(path, spacing=1.0) -> BinaryMask:
    arr = read_raw_image(path)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return BinaryMask((arr != 0).astype(np.uint8), spacing)


def _to_uint(arr: np.ndarray, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    return np.round(np.clip(arr, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)


def write_image(img: GridImage | np.ndarray, path, bits: int = 8) -> None:
    px = img.pixels if isinstance(img, GridImage) else np.asarray(img)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    data = _to_uint(px, bits)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if bits == 16:
        if data.ndim != 2:
            raise ValueError("16-bit output supports single-channel images only")
        Image.fromarray(data).save(path)
    else:
        Image.fromarray(data).save(path)


def write_mask(mask: BinaryMask | np.ndarray, path) -> None:
    px = mask.pixels if isinstance(mask, BinaryMask) else np.asarray(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((px != 0).astype(np.uint8) * 255).save(path)


def extract_segment(full_fixed, box):
    """Pixel-exact crop ``[y0:y1, x0:x1]``; works for GridImage and BinaryMask."""
    box = tuple(int(v) for v in box)
    if len(box) != 4:
        raise BoxOutOfRange(f"box must have 4 values, got {box}")
    _check_box(box, full_fixed.shape, "extract_segment")
    x0, y0, x1, y1 = box
    crop = full_fixed.pixels[y0:y1, x0:x1].copy()
    if isinstance(full_fixed, BinaryMask):
        return BinaryMask(crop, full_fixed.spacing)
    return GridImage(crop, full_fixed.spacing, full_fixed.modality, full_fixed.standardized)


def resize_array(arr: np.ndarray, shape, interp: str = "bilinear", antialias: bool = True) -> np.ndarray:
    """Resize on the align-corners grid so normalized coordinates are preserved.

    Downsampling applies a Gaussian prefilter (sigma = (factor - 1) / 2 per axis)
    when ``antialias`` is set.
    """
    shape = (int(shape[0]), int(shape[1]))
    if arr.shape[:2] == shape:
        return arr.copy()
    if interp == "bilinear" and antialias:
        fy = arr.shape[0] / shape[0]
        fx = arr.shape[1] / shape[1]
        sig = [max(0.0, (fy - 1) / 2), max(0.0, (fx - 1) / 2)] + [0.0] * (arr.ndim - 2)
        if any(s > 0 for s in sig):
            arr = ndimage.gaussian_filter(arr.astype(np.float64), sig, mode="nearest")
    return resample(arr, identity_params(), shape, interp)


def resize_image(img: GridImage, shape) -> GridImage:
    h, w = img.shape
    px = np.clip(resize_array(img.pixels, shape), 0.0, 1.0) if not img.standardized else resize_array(img.pixels, shape)
    spacing = (img.spacing[0] * (w - 1) / max(shape[1] - 1, 1), img.spacing[1] * (h - 1) / max(shape[0] - 1, 1))
    return GridImage(px, spacing, img.modality, img.standardized)


def resize_mask(mask: BinaryMask, shape) -> BinaryMask:
    h, w = mask.shape
    spacing = (mask.spacing[0] * (w - 1) / max(shape[1] - 1, 1), mask.spacing[1] * (h - 1) / max(shape[0] - 1, 1))
    return BinaryMask(resize_array(mask.pixels, shape, "nearest"), spacing)


def to_three_channels(px: np.ndarray) -> np.ndarray:
    if px.shape[2] == 1:
        return np.repeat(px, 3, axis=2)
    return px


def standardize(px: np.ndarray) -> np.ndarray:
    mean = np.asarray(IMAGENET_MEAN)
    std = np.asarray(IMAGENET_STD)
    return (px - mean) / std


def prepare_network_input(img: GridImage, size=NETWORK_SIZE) -> GridImage:
    """3-channel, ``size`` resize, ImageNet standardization.

    Raises :class:`AlreadyStandardized` if the image was already prepared.
    """
    if img.standardized:
        raise AlreadyStandardized("image is already standardized; refusing to standardize twice")
    small = resize_image(img, size)
    px = standardize(to_three_channels(small.pixels))
    return GridImage(px, small.spacing, img.modality, standardized=True)


# --- landmarks --------------------------------------------------------------


def _validate_landmarks(points: np.ndarray, ids, image_shape, where: str) -> None:
    if image_shape is None:
        return
    h, w = int(image_shape[0]), int(image_shape[1])
    for lid, (x, y) in zip(ids, points):
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise OutOfBounds(f"{where}: landmark {lid!r} at ({x}, {y}) outside image (H={h}, W={w})")


def read_landmarks(path, image_shape=None) -> LandmarkSet:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"landmark file not found: {path}")
    ids: list[str] = []
    pts: list[tuple[float, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y"]:
            raise MalformedRow(f"{path}: landmark header must be 'id,x,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise MalformedRow(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            lid = row[0].strip()
            if lid in ids:
                raise DuplicateLandmarkId(f"{path}: duplicate landmark id {lid!r}")
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise MalformedRow(f"{path}:{lineno}: non-numeric coordinates for {lid!r}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise MalformedRow(f"{path}:{lineno}: non-finite coordinates for {lid!r}")
            ids.append(lid)
            pts.append((x, y))
    points = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    _validate_landmarks(points, ids, image_shape, str(path))
    return LandmarkSet(points, tuple(ids))


def write_landmarks(lms: LandmarkSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y"])
        for lid, (x, y) in zip(lms.ids, lms.points):
            writer.writerow([lid, repr(float(x)), repr(float(y))])


def crop_landmarks(lms: LandmarkSet, box) -> LandmarkSet:
    x0, y0, x1, y1 = box
    shifted = lms.points - np.array([x0, y0], dtype=np.float64)
    _validate_landmarks(shifted, lms.ids, (y1 - y0, x1 - x0), "box_roi crop")
    return LandmarkSet(shifted, lms.ids)


# --- pairs ------------------------------------------------------------------


def load_pair(entry: PairManifestEntry) -> RegistrationPair:
    """Read one manifest entry; Box-ROI crops apply to the fixed image, mask and landmarks."""
    fixed = read_image(entry.resolve("fixed_path"), entry.fixed_spacing_mm, Modality.XRAY)
    moving = read_image(entry.resolve("moving_path"), entry.moving_spacing_mm, Modality.HISTOLOGY)
    fmask = mmask = flms = mlms = None
    if entry.fixed_mask_path:
        fmask = read_mask(entry.resolve("fixed_mask_path"), entry.fixed_spacing_mm)
    if entry.moving_mask_path:
        mmask = read_mask(entry.resolve("moving_mask_path"), entry.moving_spacing_mm)
    if entry.fixed_landmarks_path:
        flms = read_landmarks(entry.resolve("fixed_landmarks_path"), fixed.shape)
    if entry.moving_landmarks_path:
        mlms = read_landmarks(entry.resolve("moving_landmarks_path"), moving.shape)
    if entry.box_roi is not None:
        fixed = extract_segment(fixed, entry.box_roi)
        if fmask is not None:
            fmask = extract_segment(fmask, entry.box_roi)
        if flms is not None:
            flms = crop_landmarks(flms, entry.box_roi)
    return RegistrationPair(fixed, moving, fmask, mmask, flms, mlms, entry)


def manifest_fields() -> list[str]:
    return [f.name for f in fields(PairManifestEntry) if f.name != "root"]
