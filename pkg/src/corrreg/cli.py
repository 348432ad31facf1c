"""Command-line entry points: synth, train, register, eval, ablate, report.

Configuration precedence is command-line flag > INI config file > defaults.
Every command writes its effective configuration (``config.ini``) and a
``run_info.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import AffineParams, LandmarkSet, identity_params, warp_image, warp_mask
from .errors import ConfigError, CorrregError, DataError, NumericalError
from .evaluate import (
    EvalRecord,
    aggregate_report,
    map_moving_points,
    mean_landmark_error,
    read_results_csv,
    render_overlay,
    write_results_csv,
)
from .ingest import MANIFEST_COLUMNS, load_manifest, load_pair, write_image, write_mask
from .network import CHECKPOINT_FORMAT, NetworkConfig, load_checkpoint, register
from .synthgen import TransformSamplerConfig, build_training_set, write_sample_cache
from .trainer import TrainConfig, run_cv

log = logging.getLogger("corrreg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
REGISTRATION_COLUMNS = ("pair_id", "theta_a11", "theta_a12", "theta_tx", "theta_a21", "theta_a22", "theta_ty",
                        "network_seconds", "total_seconds", "resample_seconds")


@dataclass
class RunSettings:
    manifest: Optional[str] = None
    out: str = "runs/latest"
    checkpoint: Optional[str] = None
    registrations: Optional[str] = None
    lambdas: tuple[float, ...] = (0.01,)
    backbones: tuple[str, ...] = ("vgg16_block4",)
    freeze_modes: tuple[str, ...] = ("fine_tuned",)
    fold: Optional[int] = None
    method_tag: str = "corrreg"
    overlays: bool = False
    synth_size: Optional[int] = None


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: TransformSamplerConfig = field(default_factory=TransformSamplerConfig)
    run: RunSettings = field(default_factory=RunSettings)


SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "sampler": TransformSamplerConfig, "run": RunSettings}


# --- value parsing -------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(text: str, default):
    """Parse ``text`` into the type of ``default`` (None-able strings and ints included)."""
    text = str(text).strip()
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(p.strip()) for p in parts)
    return text


_INT_OPTIONAL = {("run", "fold"), ("run", "synth_size")}


def _coerce(section: str, name: str, text: str):
    default = _field_default(SECTIONS[section], name)
    if (section, name) in _INT_OPTIONAL:
        default = 0
    return _parse_value(text, default)


def _field_default(cls, name):
    f = {f.name: f for f in fields(cls)}[name]
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def valid_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)]


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"config file not found: {path}")
    bad = []
    out: dict[str, dict[str, str]] = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            bad.append(f"[{sec}]")
            continue
        names = {f.name for f in fields(SECTIONS[sec])}
        for key, value in parser.items(sec):
            if key not in names:
                bad.append(f"{sec}.{key}")
            else:
                out.setdefault(sec, {})[key] = value
    if bad:
        raise ConfigError(f"invalid config keys {bad}; valid keys are: {', '.join(valid_keys())}")
    return out


def build_run_config(file_values: dict, cli_values: dict) -> RunConfig:
    """Merge defaults <- config file <- command-line flags."""
    merged: dict[str, dict] = {}
    for sec, cls in SECTIONS.items():
        vals = {}
        for name, text in file_values.get(sec, {}).items():
            try:
                vals[name] = _coerce(sec, name, text)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{name}: {exc}") from None
        vals.update(cli_values.get(sec, {}))
        merged[sec] = vals
    try:
        return RunConfig(
            network=NetworkConfig(**merged["network"]),
            train=TrainConfig(**merged["train"]),
            sampler=TransformSamplerConfig(**merged["sampler"]),
            run=RunSettings(**merged["run"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def write_frozen_config(cfg: RunConfig, out_dir, command: str, argv) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
    with open(out_dir / "config.ini", "w", encoding="utf-8") as fh:
        parser.write(fh)
    info = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.train.seed,
        "tool_version": __version__,
        "checkpoint_format": CHECKPOINT_FORMAT,
        "manifest_columns": list(MANIFEST_COLUMNS),
        "python": platform.python_version(),
    }
    try:
        import torch

        info["torch"] = torch.__version__
    except ImportError:  # pragma: no cover
        pass
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")


def load_frozen_config(path) -> RunConfig:
    return build_run_config(read_config_file(path), {})


# --- argparse plumbing -----------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file with [network] [train] [sampler] [run] sections")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for training and sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    for sec, cls in SECTIONS.items():
        group = p.add_argument_group(sec)
        for f in fields(cls):
            if f.name == "seed":
                continue
            flag = "--" + f.name.replace("_", "-")
            default = _field_default(cls, f.name)
            shown = _format_value(default)
            group.add_argument(flag, dest=f"{sec}__{f.name}", default=argparse.SUPPRESS, metavar="VALUE",
                               help=f"(default: {shown})")


def _cli_values(ns: argparse.Namespace) -> dict:
    out: dict[str, dict] = {}
    for key, text in vars(ns).items():
        if "__" not in key:
            continue
        sec, name = key.split("__", 1)
        try:
            out.setdefault(sec, {})[name] = _coerce(sec, name, text)
        except ValueError as exc:
            raise ConfigError(f"--{name.replace('_', '-')}: {exc}") from None
    if "seed" in ns:
        out.setdefault("train", {})["seed"] = ns.seed
        out.setdefault("sampler", {})["seed"] = ns.seed
    return out


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "materialize a synthetic sample cache from a manifest",
        "train": "patient-level cross-validation (or one fold with --fold)",
        "register": "batch inference: transforms CSV plus warped outputs",
        "eval": "landmark errors and report from registrations or a checkpoint",
        "ablate": "backbone x freeze-mode x lambda grid, one training run each",
        "report": "aggregate one or more results CSVs (external baselines welcome)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _add_config_flags(p)
        if name == "report":
            p.add_argument("--results", nargs="+", required=True, help="results CSV files")
    return parser


def _config_from_args(ns) -> RunConfig:
    file_values = read_config_file(ns.config) if ns.config else {}
    return build_run_config(file_values, _cli_values(ns))


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


# --- commands ------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    entries = load_manifest(_require(cfg.run.manifest, "--manifest"))
    out = Path(cfg.run.out)
    log.info("synthetic transform bounds: %s", cfg.sampler.describe())
    size = cfg.run.synth_size
    samples = build_training_set(entries, cfg.train.per_image, cfg.sampler, (size, size) if size else None)
    n = write_sample_cache(samples, out / "samples")
    print(f"wrote {n} synthetic samples from {len(entries)} entries x 2 modalities x {cfg.train.per_image}"
          f" to {out / 'samples'}")
    print(f"bounds: {cfg.sampler.describe()}")
    return EXIT_OK


def _describe_lambda(lam: float) -> str:
    return "no domain adaptation" if lam == 0 else f"MMD weight {lam:g}"


def cmd_train(cfg: RunConfig) -> int:
    entries = load_manifest(_require(cfg.run.manifest, "--manifest"))
    log.info("lambda_reg=%g (%s)", cfg.train.lambda_reg, _describe_lambda(cfg.train.lambda_reg))
    only = None if cfg.run.fold is None else [cfg.run.fold]
    results = run_cv(entries, cfg.network, cfg.train, cfg.run.out, cfg.sampler, only, cfg.run.method_tag)
    for r in results:
        print(f"fold {r.fold_id}: checkpoint {r.checkpoint}, {len(r.records)} evaluated pairs")
    report = Path(cfg.run.out) / "report.txt"
    if report.exists():
        print(report.read_text())
    return EXIT_OK


def _registration_row(pair_id, theta: AffineParams, timing: dict) -> dict:
    row = {"pair_id": pair_id}
    for col, v in zip(REGISTRATION_COLUMNS[1:7], theta.theta):
        row[col] = repr(float(v))
    for k in ("network_seconds", "total_seconds", "resample_seconds"):
        row[k] = repr(float(timing.get(k, 0.0)))
    return row


def cmd_register(cfg: RunConfig) -> int:
    entries = load_manifest(_require(cfg.run.manifest, "--manifest"))
    model, meta = load_checkpoint(_require(cfg.run.checkpoint, "--checkpoint"), cfg.network)
    out = Path(cfg.run.out)
    rows = []
    for e in entries:
        pair = load_pair(e)
        theta, timing = register(pair, model)
        t0 = time.perf_counter()
        warped = warp_image(pair.moving, theta, pair.fixed.shape, "bilinear")
        timing["resample_seconds"] = time.perf_counter() - t0
        write_image(warped, out / "warped" / f"{e.pair_id}.png")
        if pair.moving_mask is not None:
            write_mask(warp_mask(pair.moving_mask, theta, pair.fixed.shape), out / "warped" / f"{e.pair_id}_mask.png")
        if cfg.run.overlays:
            mapped = None
            if pair.moving_landmarks is not None:
                pts = map_moving_points(theta, pair.moving_landmarks.points, pair.fixed.shape, pair.moving.shape)
                mapped = LandmarkSet(pts, pair.moving_landmarks.ids)
            render_overlay(pair.fixed, pair.moving, identity_params(), pair.fixed_landmarks,
                           _identity_mapped(pair), out / "overlays" / f"{e.pair_id}_pre.png")
            render_overlay(pair.fixed, pair.moving, theta, pair.fixed_landmarks, mapped,
                           out / "overlays" / f"{e.pair_id}_post.png")
        rows.append(_registration_row(e.pair_id, theta, timing))
        log.info("%s: theta=%s (%.3f s network, %.3f s total)", e.pair_id, np.round(theta.theta, 4),
                 timing["network_seconds"], timing["total_seconds"])
    path = out / "registrations.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REGISTRATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"registered {len(rows)} pairs -> {path}")
    return EXIT_OK


def _identity_mapped(pair):
    if pair.moving_landmarks is None:
        return None
    pts = map_moving_points(identity_params(), pair.moving_landmarks.points, pair.fixed.shape, pair.moving.shape)
    return LandmarkSet(pts, pair.moving_landmarks.ids)


def read_registrations(path) -> dict[str, tuple[AffineParams, dict]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REGISTRATION_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: registrations CSV missing columns {missing}")
        for row in reader:
            theta = AffineParams([float(row[c]) for c in REGISTRATION_COLUMNS[1:7]])
            out[row["pair_id"]] = (theta, {k: float(row[k]) for k in REGISTRATION_COLUMNS[7:]})
    return out


def cmd_eval(cfg: RunConfig) -> int:
    entries = load_manifest(_require(cfg.run.manifest, "--manifest"))
    if cfg.run.registrations:
        regs = read_registrations(cfg.run.registrations)
    else:
        model, _ = load_checkpoint(_require(cfg.run.checkpoint, "--checkpoint or --registrations"), cfg.network)
        regs = None
    records = []
    for e in entries:
        if not (e.fixed_landmarks_path and e.moving_landmarks_path):
            log.warning("pair %s has no landmarks; skipped", e.pair_id)
            continue
        pair = load_pair(e)
        if regs is not None:
            if e.pair_id not in regs:
                raise DataError(f"no registration for pair {e.pair_id} in {cfg.run.registrations}")
            theta, timing = regs[e.pair_id]
        else:
            theta, timing = register(pair, model)
        lms = (pair.fixed_landmarks, pair.moving_landmarks)
        shapes = (pair.fixed.shape, pair.moving.shape)
        records.append(EvalRecord(
            pair_id=e.pair_id,
            mle_mm=mean_landmark_error(*lms, theta, pair.fixed.spacing, *shapes),
            mle_pre_mm=mean_landmark_error(*lms, identity_params(), pair.fixed.spacing, *shapes),
            n_landmarks=len(pair.fixed_landmarks),
            exec_seconds=timing["total_seconds"],
            theta=theta,
            method_tag=cfg.run.method_tag,
        ))
    if not records:
        raise DataError("no pairs with landmarks to evaluate")
    out = Path(cfg.run.out)
    write_results_csv(records, out / "results.csv")
    report = aggregate_report(records)
    report.to_csv(out / "report.csv")
    text = report.format_table()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def ablation_grid(cfg: RunConfig) -> list[tuple[str, NetworkConfig, TrainConfig]]:
    grid = []
    for backbone in cfg.run.backbones:
        for mode in cfg.run.freeze_modes:
            if mode not in ("frozen", "fine_tuned"):
                raise ConfigError(f"freeze mode must be 'frozen' or 'fine_tuned', got {mode!r}")
            for lam in cfg.run.lambdas:
                net = dataclasses.replace(cfg.network, backbone=backbone, fine_tune_last=(mode == "fine_tuned"))
                tr = dataclasses.replace(cfg.train, lambda_reg=float(lam))
                grid.append((f"{backbone}_{mode}_lambda{lam:g}", net, tr))
    return grid


def cmd_ablate(cfg: RunConfig) -> int:
    entries = load_manifest(_require(cfg.run.manifest, "--manifest"))
    out = Path(cfg.run.out)
    only = None if cfg.run.fold is None else [cfg.run.fold]
    records = []
    for tag, net, tr in ablation_grid(cfg):
        log.info("ablation run %s: lambda %g (%s)", tag, tr.lambda_reg, _describe_lambda(tr.lambda_reg))
        sub = out / tag
        sub_cfg = dataclasses.replace(cfg, network=net, train=tr, run=dataclasses.replace(cfg.run, out=str(sub)))
        write_frozen_config(sub_cfg, sub, "ablate", sys.argv)
        for r in run_cv(entries, net, tr, sub, cfg.sampler, only, tag):
            records.extend(r.records)
    if not records:
        raise DataError("ablation produced no evaluated pairs (are landmarks present?)")
    write_results_csv(records, out / "results.csv")
    report = aggregate_report(records)
    report.to_csv(out / "report.csv")
    ranked = sorted(report.summaries, key=lambda s: s.mle_mean)
    lines = ["ablation ranking by mean MLE (mm):"]
    lines += [f"  {i + 1}. {s.method_tag}: {s.mle_mean:.3f} ± {s.mle_std:.3f}" for i, s in enumerate(ranked)]
    text = "\n".join(lines) + "\n\n" + report.format_table()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_report(cfg: RunConfig, results: list[str]) -> int:
    records = []
    for path in results:
        records.extend(read_results_csv(path))
    if not records:
        raise DataError("no records in the given results files")
    report = aggregate_report(records)
    out = Path(cfg.run.out)
    report.to_csv(out / "report.csv")
    text = report.format_table()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(ns)
        write_frozen_config(cfg, cfg.run.out, ns.command, argv)
        if ns.command == "report":
            return cmd_report(cfg, ns.results)
        handler = {"synth": cmd_synth, "train": cmd_train, "register": cmd_register, "eval": cmd_eval,
                   "ablate": cmd_ablate}[ns.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except CorrregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
