"""Training objectives: intensity MSE, soft Dice and the MMD feature regularizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import BinaryMask, GridImage

DICE_EPS = 1e-6
DEFAULT_LAMBDA = 0.01


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, (GridImage, BinaryMask)):
        x = x.pixels
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def intensity_loss(i_f, i_w) -> torch.Tensor:
    """Mean squared intensity difference over all pixels and channels."""
    a, b = _tensor(i_f), _tensor(i_w)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def dice_loss(m_f, m_w, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2*sum(m_f*m_w) + eps) / (sum(m_f) + sum(m_w) + eps)``.

    4-D inputs are treated as ``(B, C, H, W)`` batches: the loss is computed
    per sample and averaged.
    """
    a, b = _tensor(m_f), _tensor(m_w)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 4:
        a, b = a.flatten(1), b.flatten(1)
        inter = (a * b).sum(dim=1)
        denom = a.sum(dim=1) + b.sum(dim=1)
        return (1 - (2 * inter + eps) / (denom + eps)).mean()
    return 1 - (2 * (a * b).sum() + eps) / (a.sum() + b.sum() + eps)


def feature_samples(fmap: torch.Tensor, sampling: str = "locations") -> torch.Tensor:
    """Rows of samples from a ``(B, d, H, W)`` map.

    ``locations`` pools every spatial fiber of the batch; ``global`` uses one
    average-pooled vector per image.
    """
    if sampling == "locations":
        return fmap.permute(0, 2, 3, 1).reshape(-1, fmap.shape[1])
    if sampling == "global":
        return fmap.mean(dim=(2, 3))
    raise ValueError(f"unknown MMD sampling {sampling!r}")


def _median_bandwidth(z: torch.Tensor) -> torch.Tensor:
    d2 = torch.cdist(z, z).pow(2)
    iu = torch.triu_indices(len(z), len(z), offset=1)
    med = d2[iu[0], iu[1]].median()
    return torch.clamp(med, min=1e-12)


def mmd_loss(x, y, kernel: str = "linear") -> torch.Tensor:
    """Squared maximum mean discrepancy between sample sets ``x`` (n, d) and ``y`` (m, d).

    ``linear`` is the squared distance between the set means.  ``rbf`` is the
    unbiased estimator with a Gaussian kernel whose bandwidth is the median
    pairwise squared distance of the pooled samples; it is clamped at 0.
    """
    x, y = _tensor(x), _tensor(y)
    if x.dim() != 2 or y.dim() != 2:
        raise ValueError("MMD inputs must be 2-D (samples, features)")
    if len(x) == 0 or len(y) == 0:
        raise ValueError("MMD needs non-empty sample sets")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if kernel == "linear":
        diff = x.mean(dim=0) - y.mean(dim=0)
        return (diff * diff).sum()
    if kernel != "rbf":
        raise ValueError(f"unknown MMD kernel {kernel!r}")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("RBF MMD needs at least 2 samples per set")
    bw = _median_bandwidth(torch.cat([x, y]))
    kxx = torch.exp(-torch.cdist(x, x).pow(2) / (2 * bw))
    kyy = torch.exp(-torch.cdist(y, y).pow(2) / (2 * bw))
    kxy = torch.exp(-torch.cdist(x, y).pow(2) / (2 * bw))
    sxx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
    syy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
    est = sxx + syy - 2 * kxy.mean()
    return torch.clamp(est, min=0.0)


@dataclass
class LossBreakdown:
    intensity: float
    dice: float
    mmd: float
    lambda_reg: float
    total: float
    tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {
            "loss_total": self.total,
            "loss_int": self.intensity,
            "loss_dice": self.dice,
            "loss_mmd": self.mmd,
        }


def total_loss(
    i_f,
    i_w,
    m_f,
    m_w,
    f_m_batch,
    f_f_batch,
    lambda_reg: float = DEFAULT_LAMBDA,
    kernel: str = "linear",
) -> LossBreakdown:
    """``intensity + dice + lambda_reg * mmd``.

    Feature batches are sample matrices (see :func:`feature_samples`).  The
    MMD term is always computed and reported; with ``lambda_reg == 0`` it is
    excluded from the total and from the gradient.
    """
    l_int = intensity_loss(i_f, i_w)
    l_dice = dice_loss(m_f, m_w)
    if lambda_reg == 0:
        with torch.no_grad():
            l_mmd = mmd_loss(f_m_batch, f_f_batch, kernel)
        t = l_int + l_dice
    else:
        l_mmd = mmd_loss(f_m_batch, f_f_batch, kernel)
        t = l_int + l_dice + lambda_reg * l_mmd
    vi, vd, vm = float(l_int.detach()), float(l_dice.detach()), float(l_mmd.detach())
    return LossBreakdown(vi, vd, vm, float(lambda_reg), vi + vd + float(lambda_reg) * vm, t)
