"""Landmark error in mm, Mann-Whitney testing, overlays and result aggregation."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import stats

from .core import (
    AffineParams,
    GridImage,
    LandmarkSet,
    apply_to_points,
    invert,
    norm_to_pixel,
    pixel_to_norm,
    warp_image,
)
from .errors import DataError, UnmatchedLandmarks

SIGNIFICANCE = 0.01
EXACT_MAX_N = 16

RESULT_COLUMNS = (
    "pair_id",
    "method_tag",
    "n_landmarks",
    "mle_pre_mm",
    "mle_mm",
    "exec_seconds",
    "theta_a11",
    "theta_a12",
    "theta_tx",
    "theta_a21",
    "theta_a22",
    "theta_ty",
)

# published values, shown as context rows only
PUBLISHED_REFERENCE = (
    ("published: proposed", 2.1, 1.96, 0.07),
    ("published: iterative NMI", 4.43, 4.1, 10.3),
    ("published: deep learning baseline", 4.02, 3.15, None),
)
PUBLISHED_TIMING_SECONDS = {"proposed": 0.07, "iterative": 10.3, "cnngeometric": 0.32, "prosregnet": 0.55, "c2fvit": 0.12}


@dataclass
class EvalRecord:
    pair_id: str
    mle_mm: float
    mle_pre_mm: float
    n_landmarks: int
    exec_seconds: float
    theta: AffineParams
    method_tag: str = "corrreg"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mle_mm", "mle_pre_mm"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.n_landmarks < 1:
            raise ValueError("EvalRecord needs at least one landmark")

    def to_row(self) -> dict:
        row = {
            "pair_id": self.pair_id,
            "method_tag": self.method_tag,
            "n_landmarks": self.n_landmarks,
            "mle_pre_mm": repr(float(self.mle_pre_mm)),
            "mle_mm": repr(float(self.mle_mm)),
            "exec_seconds": repr(float(self.exec_seconds)),
        }
        for col, v in zip(RESULT_COLUMNS[6:], self.theta.theta):
            row[col] = repr(float(v))
        return row


def write_results_csv(records: Iterable[EvalRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())


def read_results_csv(path) -> list[EvalRecord]:
    """Read a results CSV; third-party methods can supply the same schema."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RESULT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: results CSV missing columns {missing}")
        for row in reader:
            out.append(
                EvalRecord(
                    pair_id=row["pair_id"],
                    method_tag=row["method_tag"],
                    n_landmarks=int(row["n_landmarks"]),
                    mle_pre_mm=float(row["mle_pre_mm"]),
                    mle_mm=float(row["mle_mm"]),
                    exec_seconds=float(row["exec_seconds"]),
                    theta=AffineParams([float(row[c]) for c in RESULT_COLUMNS[6:]]),
                )
            )
    return out


# --- landmark error ----------------------------------------------------------


def map_moving_points(theta: AffineParams, pts_px, fixed_shape, moving_shape) -> np.ndarray:
    """Moving-image pixel points into fixed-image pixels via the inverse sampling map."""
    q = pixel_to_norm(np.asarray(pts_px, dtype=np.float64).reshape(-1, 2), moving_shape)
    return norm_to_pixel(apply_to_points(invert(theta), q), fixed_shape)


def landmark_errors(
    fixed_lms: LandmarkSet,
    moving_lms: LandmarkSet,
    theta: AffineParams,
    fixed_spacing_mm,
    fixed_shape,
    moving_shape,
) -> np.ndarray:
    """Per-landmark error in mm, ordered by the fixed set's ids."""
    if sorted(fixed_lms.ids) != sorted(moving_lms.ids):
        raise UnmatchedLandmarks(f"landmark ids differ: {sorted(fixed_lms.ids)} vs {sorted(moving_lms.ids)}")
    if len(fixed_lms) == 0:
        raise DataError("no landmarks to evaluate")
    mov = moving_lms.as_dict()
    q = np.array([mov[i] for i in fixed_lms.ids])
    mapped = map_moving_points(theta, q, fixed_shape, moving_shape)
    sx, sy = (fixed_spacing_mm, fixed_spacing_mm) if np.isscalar(fixed_spacing_mm) else fixed_spacing_mm
    d = (fixed_lms.points - mapped) * np.array([sx, sy], dtype=np.float64)
    return np.hypot(d[:, 0], d[:, 1])


def mean_landmark_error(
    fixed_lms: LandmarkSet,
    moving_lms: LandmarkSet,
    theta: AffineParams,
    fixed_spacing_mm,
    fixed_shape,
    moving_shape,
) -> float:
    return float(landmark_errors(fixed_lms, moving_lms, theta, fixed_spacing_mm, fixed_shape, moving_shape).mean())


def corner_error_px(theta: AffineParams, gt_params: AffineParams, shape=(224, 224)) -> float:
    """Mean corner error for a synthetic pair whose moving image is ``warp(fixed, gt_params)``.

    Fixed corners p correspond to moving points ``gt_params^-1(p)``; the error is
    measured after mapping those back through the estimated transform.
    """
    h, w = shape
    corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])
    q = norm_to_pixel(apply_to_points(invert(gt_params), pixel_to_norm(corners, shape)), shape)
    fixed = LandmarkSet(corners, ("c0", "c1", "c2", "c3"))
    moving = LandmarkSet(q, ("c0", "c1", "c2", "c3"))
    return mean_landmark_error(fixed, moving, theta, 1.0, shape, shape)


# --- Mann-Whitney ------------------------------------------------------------


@dataclass
class MannWhitneyResult:
    u: float
    p: float
    method: str

    def __iter__(self):
        return iter((self.u, self.p))


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    ranks = stats.rankdata(np.concatenate([a, b]))
    na = len(a)
    return float(ranks[:na].sum() - na * (na + 1) / 2)


def _exact_p(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided permutation p over all splits of the pooled mid-ranks."""
    na, n = len(a), len(a) + len(b)
    # doubled mid-ranks are integers, so the comparisons below are exact
    r2 = np.rint(2 * stats.rankdata(np.concatenate([a, b]))).astype(np.int64)
    center = na * (n + 1)
    observed = abs(int(r2[:na].sum()) - center)
    combos = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(n), na)), dtype=np.int64
    ).reshape(-1, na)
    dev = np.abs(r2[combos].sum(axis=1) - center)
    return np.count_nonzero(dev >= observed) / len(dev)


def _normal_p(a: np.ndarray, b: np.ndarray, u: float) -> float:
    na, nb = len(a), len(b)
    n = na + nb
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie = float((counts**3 - counts).sum())
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (abs(u - na * nb / 2.0) - 0.5) / math.sqrt(var)
    return float(min(1.0, 2 * stats.norm.sf(max(z, 0.0))))


def mann_whitney_u(sample_a: Sequence[float], sample_b: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """U statistic of ``sample_a`` (ties count 1/2) and a two-sided p-value.

    ``auto`` enumerates the permutation distribution when the pooled size is at
    most 16 and otherwise uses the tie-corrected normal approximation with
    continuity correction.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Mann-Whitney needs two non-empty samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("Mann-Whitney samples must be finite")
    u = _u_statistic(a, b)
    if method == "auto":
        method = "exact" if len(a) + len(b) <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_p(a, b)
    elif method == "normal":
        p = _normal_p(a, b, u)
    else:
        raise ValueError(f"unknown method {method!r}")
    return MannWhitneyResult(u, p, method)


# --- overlays ----------------------------------------------------------------


def _to_rgb(img: GridImage) -> np.ndarray:
    px = img.pixels
    return np.repeat(px, 3, axis=2) if px.shape[2] == 1 else px


def overlay_array(fixed: GridImage, moving: GridImage, theta: AffineParams, alpha: float = 0.5) -> np.ndarray:
    """Fixed in grayscale with the warped moving image blended where it has content."""
    gray = fixed.pixels.mean(axis=2, keepdims=True)
    base = np.repeat(gray, 3, axis=2)
    warped = _to_rgb(warp_image(moving, theta, fixed.shape, "bilinear"))
    a = alpha * (warped.max(axis=2, keepdims=True) > 0)
    return base * (1 - a) + warped * a


def render_overlay(
    fixed: GridImage,
    moving: GridImage,
    theta: AffineParams,
    fixed_lms: Optional[LandmarkSet],
    mapped_lms: Optional[LandmarkSet],
    out_path,
    alpha: float = 0.5,
) -> Path:
    """Write a PNG overlay; fixed landmarks green, mapped moving landmarks red, joined in yellow."""
    rgb = np.round(np.clip(overlay_array(fixed, moving, theta, alpha), 0, 1) * 255).astype(np.uint8)
    im = Image.fromarray(rgb)
    if fixed_lms is not None and mapped_lms is not None:
        draw = ImageDraw.Draw(im)
        mapped = mapped_lms.as_dict()
        r = max(1, min(fixed.shape) // 100)
        for lid, (x, y) in zip(fixed_lms.ids, fixed_lms.points):
            if lid in mapped:
                mx, my = mapped[lid]
                draw.line([(x, y), (mx, my)], fill=(255, 255, 0), width=1)
                draw.ellipse([mx - r, my - r, mx + r, my + r], outline=(255, 0, 0))
            draw.ellipse([x - r, y - r, x + r, y + r], outline=(0, 255, 0))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    im.save(buf, format="PNG", optimize=False)
    out_path.write_bytes(buf.getvalue())
    return out_path


# --- aggregation -------------------------------------------------------------


@dataclass
class MethodSummary:
    method_tag: str
    n_pairs: int
    mle_mean: float
    mle_std: float
    mle_pre_mean: float
    mle_pre_std: float
    exec_mean: float


@dataclass
class Report:
    summaries: list[MethodSummary]
    p_matrix: dict[tuple[str, str], float]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tags = [s.method_tag for s in self.summaries]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("# std is the population standard deviation\n")
            w = csv.writer(fh)
            w.writerow(["method_tag", "n_pairs", "mle_mean_mm", "mle_std_mm", "mle_pre_mean_mm", "mle_pre_std_mm",
                        "exec_mean_s"] + [f"p_vs_{t}" for t in tags])
            for s in self.summaries:
                ps = [repr(self.p_matrix.get((s.method_tag, t), float("nan"))) for t in tags]
                w.writerow([s.method_tag, s.n_pairs, repr(s.mle_mean), repr(s.mle_std), repr(s.mle_pre_mean),
                            repr(s.mle_pre_std), repr(s.exec_mean)] + ps)

    def format_table(self, include_reference: bool = True) -> str:
        lines = ["MLE in mm as mean ± std (population std); exec time in seconds", ""]
        head = f"{'method':<36} {'n':>5} {'MLE post':>17} {'MLE pre':>17} {'exec s':>9}"
        lines += [head, "-" * len(head)]
        for s in self.summaries:
            lines.append(
                f"{s.method_tag:<36} {s.n_pairs:>5} {s.mle_mean:>8.3f} ± {s.mle_std:<6.3f} "
                f"{s.mle_pre_mean:>8.3f} ± {s.mle_pre_std:<6.3f} {s.exec_mean:>9.4f}"
            )
        if include_reference:
            lines.append("")
            lines.append("reference (published clinical cohort, not reproduced here):")
            for tag, m, sd, t in PUBLISHED_REFERENCE:
                ts = f"{t:>9.2f}" if t is not None else f"{'-':>9}"
                lines.append(f"{tag:<36} {'':>5} {m:>8.2f} ± {sd:<6.2f} {'':>17} {ts}")
            lines.append("published timings (s): " + ", ".join(f"{k} {v}" for k, v in PUBLISHED_TIMING_SECONDS.items()))
        tags = [s.method_tag for s in self.summaries]
        if len(tags) > 1:
            lines += ["", f"Mann-Whitney two-sided p (SS if p <= {SIGNIFICANCE})"]
            for i, j in itertools.combinations(range(len(tags)), 2):
                p = self.p_matrix[(tags[i], tags[j])]
                flag = "SS" if p <= SIGNIFICANCE else "NS"
                lines.append(f"  {tags[i]} vs {tags[j]}: p = {p:.4g} [{flag}]")
        return "\n".join(lines)


def aggregate_report(records: Sequence[EvalRecord]) -> Report:
    if not records:
        raise ValueError("aggregate_report needs at least one record")
    by_tag: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_tag.setdefault(r.method_tag, []).append(r)
    summaries = []
    samples = {}
    for tag in sorted(by_tag):
        recs = sorted(by_tag[tag], key=lambda r: r.pair_id)
        post = np.array([r.mle_mm for r in recs])
        pre = np.array([r.mle_pre_mm for r in recs])
        ex = np.array([r.exec_seconds for r in recs])
        samples[tag] = post
        summaries.append(
            MethodSummary(tag, len(recs), float(post.mean()), float(post.std()), float(pre.mean()),
                          float(pre.std()), float(ex.mean()))
        )
    p_matrix = {}
    for a in samples:
        for b in samples:
            p_matrix[(a, b)] = 1.0 if a == b else mann_whitney_u(samples[a], samples[b]).p
    return Report(summaries, p_matrix)
