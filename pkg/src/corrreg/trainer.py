"""Optimization loop, patient-level cross-validation and checkpointing."""

from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import AffineParams, identity_params
from .errors import ConfigError, DataError, NumericalError
from .evaluate import (
    EvalRecord,
    aggregate_report,
    corner_error_px,
    mean_landmark_error,
    write_results_csv,
)
from .ingest import NETWORK_SIZE, PairManifestEntry, load_pair, standardize, to_three_channels
from .losses import feature_samples, total_loss
from .network import NetworkConfig, RegistrationNet, build_model, load_checkpoint, register, save_checkpoint
from .synthgen import SyntheticSample, TransformSamplerConfig, build_training_set

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_total", "loss_int", "loss_dice", "loss_mmd", "lr", "val_corner_err_px")
BATCH_COLUMNS = ("epoch", "batch", "size", "loss_total", "loss_int", "loss_dice", "loss_mmd", "lambda_reg")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.95
    step_size: int = 1
    batch_size: int = 64
    epochs: int = 50
    lambda_reg: float = 0.01
    folds: int = 5
    seed: int = 0
    per_image: int = 4
    val_fraction: float = 0.1
    grad_clip: float = 10.0
    mmd_kernel: str = "linear"
    mmd_sampling: str = "locations"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    keep_checkpoints: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        for name in ("lr", "lr_decay", "step_size", "batch_size", "epochs", "per_image"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.step_size)


@dataclass
class FoldSplit:
    fold_id: int
    train_patient_ids: tuple[str, ...]
    test_patient_ids: tuple[str, ...]


def make_folds(patient_ids: Sequence[str], k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Shuffle distinct patients and cut them into ``k`` near-equal test groups."""
    patients = sorted(set(str(p) for p in patient_ids))
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(patients) < k:
        raise DataError(f"{len(patients)} patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    groups = np.array_split(np.array(patients, dtype=object)[order], k)
    folds = []
    for i, g in enumerate(groups):
        test = tuple(sorted(g))
        train = tuple(p for p in patients if p not in set(test))
        folds.append(FoldSplit(i, train, test))
    return folds


def split_validation(train_patients: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Hold out ``fraction`` of the training patients (at least one when two or more exist)."""
    patients = sorted(train_patients)
    if fraction <= 0 or len(patients) < 2:
        return patients, []
    n_val = min(len(patients) - 1, max(1, int(round(fraction * len(patients)))))
    order = np.random.default_rng([seed, 7919]).permutation(len(patients))
    val = sorted(patients[i] for i in order[:n_val])
    return [p for p in patients if p not in val], val


# --- sample bank -------------------------------------------------------------


def _chw(px: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1), dtype=np.float32))


@dataclass
class SampleBank:
    """Network-ready tensors for a list of synthetic samples.

    Frozen backbone activations are computed once; fixed images are stored once
    per source image and shared by that source's samples.
    """

    z_moving: torch.Tensor
    z_fixed: torch.Tensor
    fixed_index: torch.Tensor
    moving_img: torch.Tensor
    moving_mask: torch.Tensor
    fixed_img: torch.Tensor
    fixed_mask: torch.Tensor
    gt: list[AffineParams]
    modality: list[str]
    patient_ids: list[str]
    keys: list[str]

    def __len__(self) -> int:
        return len(self.gt)


def _frozen(model_branch, images: list[torch.Tensor], chunk: int = 16) -> torch.Tensor:
    out = []
    for i in range(0, len(images), chunk):
        out.append(model_branch.frozen_features(torch.stack(images[i : i + chunk])))
    return torch.cat(out)


def build_bank(samples: Sequence[SyntheticSample], model: RegistrationNet) -> SampleBank:
    if not samples:
        raise DataError("no synthetic samples to train on")
    src_index: dict[str, int] = {}
    fixed_net, fixed_img, fixed_mask = [], [], []
    moving_net, moving_img, moving_mask, fidx = [], [], [], []
    for s in samples:
        if s.fixed.shape != NETWORK_SIZE:
            raise DataError(f"synthetic samples must be generated at {NETWORK_SIZE}, got {s.fixed.shape}")
        src = f"{s.pair_id}:{s.source_role}"
        if src not in src_index:
            src_index[src] = len(fixed_net)
            rgb = to_three_channels(s.fixed.pixels)
            fixed_net.append(_chw(standardize(rgb)))
            fixed_img.append(_chw(rgb).half())
            fixed_mask.append(torch.from_numpy(s.fixed_mask.pixels.astype(np.float32))[None])
        fidx.append(src_index[src])
        rgb = to_three_channels(s.moving.pixels)
        moving_net.append(_chw(standardize(rgb)))
        moving_img.append(_chw(rgb).half())
        moving_mask.append(torch.from_numpy(s.moving_mask.pixels.astype(np.float32))[None])
    z_fixed = _frozen(model.fixed_extractor, fixed_net)
    z_moving = _frozen(model.moving_extractor, moving_net)
    return SampleBank(
        z_moving=z_moving,
        z_fixed=z_fixed,
        fixed_index=torch.tensor(fidx, dtype=torch.long),
        moving_img=torch.stack(moving_img),
        moving_mask=torch.stack(moving_mask).to(torch.uint8),
        fixed_img=torch.stack(fixed_img),
        fixed_mask=torch.stack(fixed_mask).to(torch.uint8),
        gt=[s.gt_params for s in samples],
        modality=[s.source_modality.value for s in samples],
        patient_ids=[s.patient_id for s in samples],
        keys=[s.key for s in samples],
    )


def warp_tensor(images: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Batched backward warp on the align-corners grid with zero padding."""
    grid = F.affine_grid(theta.view(-1, 2, 3), list(images.shape), align_corners=True)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def mixed_order(modality: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    """Shuffle that spreads each modality evenly through the epoch.

    Within a modality, sample r of n gets key ``(r + u) / n`` with u uniform;
    sorting all keys interleaves the modalities in proportion.
    """
    modality = np.asarray(modality)
    keys = np.empty(len(modality))
    for m in sorted(set(modality.tolist())):
        idx = np.flatnonzero(modality == m)
        perm = rng.permutation(idx)
        keys[perm] = (np.arange(len(perm)) + rng.uniform(size=len(perm))) / len(perm)
    return np.argsort(keys, kind="stable")


def _batch_loss(model: RegistrationNet, bank: SampleBank, idx: torch.Tensor, cfg: TrainConfig):
    zm = bank.z_moving[idx]
    zf = bank.z_fixed[bank.fixed_index[idx]]
    f_m = model.moving_extractor.finish(zm)
    f_f = model.fixed_extractor.finish(zf)
    theta = model.regress(f_m, f_f)
    warped = warp_tensor(bank.moving_img[idx].float(), theta)
    warped_mask = warp_tensor(bank.moving_mask[idx].float(), theta)
    fixed = bank.fixed_img[bank.fixed_index[idx]].float()
    fmask = bank.fixed_mask[bank.fixed_index[idx]].float()
    lb = total_loss(
        fixed,
        warped,
        fmask,
        warped_mask,
        feature_samples(f_m, cfg.mmd_sampling),
        feature_samples(f_f, cfg.mmd_sampling),
        cfg.lambda_reg,
        cfg.mmd_kernel,
    )
    return lb, theta


def evaluate_bank(model: RegistrationNet, bank: SampleBank, cfg: TrainConfig, chunk: int = 64) -> dict:
    """Mean validation loss and corner error with the model in inference mode."""
    model.eval()
    totals, corners = [], []
    with torch.no_grad():
        for i in range(0, len(bank), chunk):
            idx = torch.arange(i, min(i + chunk, len(bank)))
            lb, theta = _batch_loss(model, bank, idx, cfg)
            totals.append((lb.total, len(idx)))
            for j, t in zip(idx.tolist(), theta.double().numpy()):
                corners.append(corner_error_px(AffineParams(t), bank.gt[j], NETWORK_SIZE))
    n = sum(c for _, c in totals)
    return {"val_loss_total": sum(v * c for v, c in totals) / n, "val_corner_err_px": float(np.mean(corners))}


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class FoldRun:
    fold: FoldSplit
    checkpoint: Path
    history: list[dict]
    batches: list[dict] = field(default_factory=list)
    out_dir: Optional[Path] = None


def _generate(entries, patients, per_image, sampler: TransformSamplerConfig) -> list[SyntheticSample]:
    chosen = [e for e in entries if e.patient_id in set(patients)]
    return list(build_training_set(chosen, per_image, sampler, resize_to=NETWORK_SIZE))


def train_fold(
    fold: FoldSplit,
    entries: Sequence[PairManifestEntry],
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    sampler: TransformSamplerConfig | None = None,
    out_dir=None,
) -> FoldRun:
    """Train one fold on synthetic pairs derived from its training patients only."""
    out_dir = Path(out_dir or ".")
    sampler = sampler or TransformSamplerConfig(seed=train_cfg.seed)
    train_p, val_p = split_validation(fold.train_patient_ids, train_cfg.val_fraction, train_cfg.seed + fold.fold_id)
    if not train_p:
        raise DataError(f"fold {fold.fold_id}: no training patients")
    train_samples = _generate(entries, train_p, train_cfg.per_image, sampler)
    if not train_samples:
        raise DataError(f"fold {fold.fold_id}: training patients have no manifest entries")
    leaked = {s.patient_id for s in train_samples} & set(fold.test_patient_ids)
    if leaked:
        raise DataError(f"fold {fold.fold_id}: test patients {sorted(leaked)} leaked into training")
    val_samples = _generate(entries, val_p, train_cfg.per_image, sampler) if val_p else []

    model = build_model(net_cfg, seed=train_cfg.seed)
    log.info("fold %d: %d train / %d val synthetic samples", fold.fold_id, len(train_samples), len(val_samples))
    bank = build_bank(train_samples, model)
    # without validation patients, selection falls back to the training samples
    val_bank = build_bank(val_samples, model) if val_samples else bank

    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=train_cfg.lr, betas=train_cfg.adam_betas, eps=train_cfg.adam_eps)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=train_cfg.step_size, gamma=train_cfg.lr_decay)

    history, batches = [], []
    best = math.inf
    best_path = out_dir / f"fold{fold.fold_id}_best.pt"
    prev_ckpt: Optional[Path] = None
    for epoch in range(train_cfg.epochs):
        model.train()
        lr = opt.param_groups[0]["lr"]
        rng = np.random.default_rng([train_cfg.seed, fold.fold_id, epoch])
        order = torch.from_numpy(mixed_order(bank.modality, rng))
        sums = dict.fromkeys(("loss_total", "loss_int", "loss_dice", "loss_mmd"), 0.0)
        for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            lb, _ = _batch_loss(model, bank, idx, train_cfg)
            if not torch.isfinite(lb.tensor):
                raise NumericalError(f"fold {fold.fold_id}: non-finite loss at epoch {epoch} batch {b}: {lb}")
            opt.zero_grad(set_to_none=True)
            lb.tensor.backward()
            if train_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, train_cfg.grad_clip)
            opt.step()
            row = lb.as_row()
            batches.append({"epoch": epoch, "batch": b, "size": len(idx), **row, "lambda_reg": lb.lambda_reg})
            for k in sums:
                sums[k] += row[k] * len(idx)
        sched.step()
        val = evaluate_bank(model, val_bank, train_cfg)
        rec = {"epoch": epoch, **{k: v / len(bank) for k, v in sums.items()}, "lr": lr,
               "val_corner_err_px": val["val_corner_err_px"]}
        history.append(rec)
        log.info(
            "fold %d epoch %d: loss %.5f (int %.5f dice %.5f mmd %.5f) val corner %.3f px lr %.3g",
            fold.fold_id, epoch, rec["loss_total"], rec["loss_int"], rec["loss_dice"], rec["loss_mmd"],
            rec["val_corner_err_px"], lr,
        )
        meta = {"seed": train_cfg.seed, "fold_id": fold.fold_id, "epoch": epoch, "val_loss_total": val["val_loss_total"],
                "train_config": asdict(train_cfg)}
        ckpt = save_checkpoint(out_dir / f"fold{fold.fold_id}_epoch{epoch:03d}.pt", model, meta)
        if val["val_loss_total"] < best:
            best = val["val_loss_total"]
            shutil.copyfile(ckpt, best_path)
        if prev_ckpt is not None and not train_cfg.keep_checkpoints:
            prev_ckpt.unlink(missing_ok=True)
        prev_ckpt = ckpt
    _write_csv(out_dir / f"fold{fold.fold_id}_history.csv", HISTORY_COLUMNS, history)
    _write_csv(out_dir / f"fold{fold.fold_id}_batches.csv", BATCH_COLUMNS, batches)
    return FoldRun(fold, best_path, history, batches, out_dir)


# --- evaluation of trained folds ----------------------------------------------


def evaluate_entries(model: RegistrationNet, entries: Sequence[PairManifestEntry], method_tag: str = "corrreg"):
    """EvalRecords for entries that carry landmarks on both images."""
    records = []
    for e in entries:
        if not (e.fixed_landmarks_path and e.moving_landmarks_path):
            log.warning("pair %s has no landmark files; skipped in evaluation", e.pair_id)
            continue
        pair = load_pair(e)
        theta, timing = register(pair, model)
        args = (pair.fixed_landmarks, pair.moving_landmarks)
        shapes = (pair.fixed.shape, pair.moving.shape)
        spacing = pair.fixed.spacing
        records.append(
            EvalRecord(
                pair_id=e.pair_id,
                mle_mm=mean_landmark_error(*args, theta, spacing, *shapes),
                mle_pre_mm=mean_landmark_error(*args, identity_params(), spacing, *shapes),
                n_landmarks=len(pair.fixed_landmarks),
                exec_seconds=timing["total_seconds"],
                theta=theta,
                method_tag=method_tag,
                extra=timing,
            )
        )
    return records


def synthetic_recovery(model: RegistrationNet, samples: Sequence[SyntheticSample]) -> list[tuple[float, float]]:
    """(pre, post) corner errors in px for held-out synthetic samples via the full register path."""
    from .ingest import RegistrationPair

    out = []
    for s in samples:
        theta, _ = register(RegistrationPair(s.fixed, s.moving), model)
        shape = s.fixed.shape
        out.append((corner_error_px(identity_params(), s.gt_params, shape), corner_error_px(theta, s.gt_params, shape)))
    return out


@dataclass
class CVResult:
    fold_id: int
    checkpoint: Path
    records: list[EvalRecord]
    history: list[dict]


def run_cv(
    entries: Sequence[PairManifestEntry],
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    out_dir,
    sampler: TransformSamplerConfig | None = None,
    only_folds: Optional[Sequence[int]] = None,
    method_tag: str = "corrreg",
) -> list[CVResult]:
    """Patient-level k-fold: train on synthetic data of k-1 folds, test on the held-out real pairs."""
    out_dir = Path(out_dir)
    folds = make_folds([e.patient_id for e in entries], train_cfg.folds, train_cfg.seed)
    results = []
    for fold in folds:
        if only_folds is not None and fold.fold_id not in only_folds:
            continue
        run = train_fold(fold, entries, net_cfg, train_cfg, sampler, out_dir)
        model, _ = load_checkpoint(run.checkpoint, net_cfg)
        test = [e for e in entries if e.patient_id in set(fold.test_patient_ids)]
        records = evaluate_entries(model, test, method_tag)
        write_results_csv(records, out_dir / f"fold{fold.fold_id}_results.csv")
        results.append(CVResult(fold.fold_id, run.checkpoint, records, run.history))
    all_records = [r for res in results for r in res.records]
    write_results_csv(all_records, out_dir / "results.csv")
    if all_records:
        report = aggregate_report(all_records)
        report.to_csv(out_dir / "report.csv")
        (out_dir / "report.txt").write_text(report.format_table() + "\n")
    return results
