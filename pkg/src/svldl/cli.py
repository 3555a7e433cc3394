"""Command-line entry point: train / evaluate / predict / gradcheck / synth.

Configuration is flat `key=value` text with `#` comments; unknown keys are
rejected.  Results go to stdout, diagnostics to stderr.  Exit codes: 0 ok,
2 config error, 3 data error, 4 non-finite training failure, 5 checkpoint
error, 6 gradient-check failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import gradcheck
from .data import (
    FeatureFormatError,
    ManifestError,
    Sample,
    load_features,
    load_samples,
    synth_generate,
    write_dataset,
)
from .distributions import make_candidate_set
from .losses import LossWeights
from .metrics import EvalReport
from .model import (
    CheckpointError,
    ModelConfig,
    ModelParameters,
    NumericsError,
    TrainSettings,
    evaluate_model,
    forward,
    load_checkpoint,
    save_checkpoint,
    train_model,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6


class ConfigError(ValueError):
    """A run-configuration file failed to parse or validate."""


@dataclass
class RunConfig:
    """Flat training configuration; defaults follow the published recipe."""

    k_max: int = 100
    grid_start: float = 0.1
    grid_stop: float = 10.0
    grid_step: float = 0.1
    grid_squared: bool = True
    lambda_ccc: float = 10.0
    lambda_kl: float = 1.0
    lambda_var: float = 0.1
    lambda_diff: float = 0.1
    lambda_gender: float = 0.01
    focal_gamma: float = 10.0
    hidden_size: int = 128
    learning_rate: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    crop_frames: int = 150
    seed: int = 0
    finetune_epochs: int = 0
    finetune_learning_rate: float = 1e-5
    finetune_weight_decay: float = 4e-4
    finetune_batch_size: int = 128
    finetune_crop_frames: int = 300
    finetune_grid_step: float = 0.01
    manifest: str = ""
    checkpoint: str = ""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def load_config(path: str | None) -> RunConfig:
    """Parse a key=value config file; None yields pure defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "bool": _parse_bool, "str": str}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path} line {lineno}: expected key=value, got {text!r}")
        key, _, raw = text.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in types:
            raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, casts[types[key]](raw))
        except ValueError as exc:
            raise ConfigError(f"{path} line {lineno}: bad value for {key}: {exc}") from exc
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    if cfg.k_max < 2:
        raise ConfigError(f"k_max must be >= 2, got {cfg.k_max}")
    for name in ("grid_start", "grid_stop", "grid_step", "learning_rate"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be > 0")
    for name in ("lambda_ccc", "lambda_kl", "lambda_var", "lambda_diff",
                 "lambda_gender", "focal_gamma", "weight_decay", "crop_frames"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    for name in ("hidden_size", "batch_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    for name in ("epochs", "finetune_epochs", "seed"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")


# ablation presets: (weights..., single sigma=1 candidate?) matching the
# published ablation rows
PRESETS = {
    "mvkl": dict(lambda_ccc=0.0, lambda_kl=1.0, lambda_var=0.1,
                 lambda_diff=0.0, lambda_gender=0.0, fixed_sigma=True),
    "cvkl": dict(lambda_ccc=10.0, lambda_kl=1.0, lambda_var=0.1,
                 lambda_diff=0.0, lambda_gender=0.0, fixed_sigma=True),
    "svldl-cvkl": dict(lambda_ccc=10.0, lambda_kl=1.0, lambda_var=0.1,
                       lambda_diff=0.0, lambda_gender=0.0, fixed_sigma=False),
    "+diff": dict(lambda_ccc=10.0, lambda_kl=1.0, lambda_var=0.1,
                  lambda_diff=0.1, lambda_gender=0.0, fixed_sigma=False),
    "+gender": dict(lambda_ccc=10.0, lambda_kl=1.0, lambda_var=0.1,
                    lambda_diff=0.1, lambda_gender=0.01, fixed_sigma=False),
}


def apply_preset(cfg: RunConfig, preset: str | None) -> RunConfig:
    if preset is None:
        return cfg
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    overrides = dict(PRESETS[preset])
    if overrides.pop("fixed_sigma"):
        cfg.grid_start = cfg.grid_stop = 1.0
        cfg.grid_step = 1.0
        cfg.grid_squared = True
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def _settings_from_config(cfg: RunConfig) -> TrainSettings:
    candidates = make_candidate_set(cfg.grid_start, cfg.grid_stop, cfg.grid_step,
                                    squared=cfg.grid_squared)
    fine = None
    if cfg.finetune_epochs > 0:
        fine = make_candidate_set(cfg.grid_start, cfg.grid_stop,
                                  cfg.finetune_grid_step, squared=cfg.grid_squared)
    return TrainSettings(
        weights=LossWeights(ccc=cfg.lambda_ccc, kl=cfg.lambda_kl,
                            variance=cfg.lambda_var, diff=cfg.lambda_diff,
                            gender=cfg.lambda_gender, gamma=cfg.focal_gamma),
        candidates=candidates,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        epochs=cfg.epochs, crop_frames=cfg.crop_frames or None, seed=cfg.seed,
        finetune_epochs=cfg.finetune_epochs,
        finetune_learning_rate=cfg.finetune_learning_rate,
        finetune_weight_decay=cfg.finetune_weight_decay,
        finetune_batch_size=cfg.finetune_batch_size,
        finetune_crop_frames=cfg.finetune_crop_frames or None,
        finetune_candidates=fine)


REPORT_COLUMNS = ("ccc", "kl", "variance", "diff", "gender")


def _report_line(epoch: int, report) -> str:
    cells = [str(epoch), f"{report.total:.6f}"]
    for key in REPORT_COLUMNS:
        value = report.components.get(key)
        cells.append("-" if value is None else f"{value:.6f}")
    return "\t".join(cells)


def cmd_train(args) -> int:
    cfg = apply_preset(load_config(args.config), args.preset)
    manifest_path = args.manifest or cfg.manifest
    if not manifest_path:
        raise ConfigError("no manifest given (flag --manifest or config key manifest)")
    samples = load_samples(manifest_path, max_age=float(cfg.k_max))
    if not samples:
        raise ManifestError(f"manifest {manifest_path} lists no samples")
    first = samples[0].features
    config = ModelConfig(k_max=cfg.k_max, num_layers=first.shape[0],
                         feature_dim=first.shape[2], hidden_size=cfg.hidden_size)
    settings = _settings_from_config(cfg)
    if settings.epochs == 0 and settings.finetune_epochs == 0:
        params = ModelParameters.init(config, seed=np.random.SeedSequence(cfg.seed).spawn(2)[0])
        save_checkpoint(args.out, params)
        return EXIT_OK
    print("epoch\ttotal\tccc\tkl\tvar\tdiff\tgender")
    params, reports = train_model(samples, config, settings)
    for epoch, report in enumerate(reports, start=1):
        print(_report_line(epoch, report))
    save_checkpoint(args.out, params)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    samples = load_samples(args.manifest, max_age=float(params.config.k_max))
    if not samples:
        raise ManifestError(f"manifest {args.manifest} lists no samples")
    try:
        report: EvalReport = evaluate_model(params, samples, q=args.q)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match the data: {exc}") from exc
    print(f"MAE={report.mae:.4f} PCC={report.pcc:.4f} "
          f"eta_q={report.eta_q:.4f} modes={report.mode_count:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    features = load_features(args.features)
    try:
        result = forward(features, params)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match the features: {exc}") from exc
    print(f"age={result.predicted_age:.4f} std={result.predicted_std:.4f}")
    if args.dump_dist:
        for p in result.age_dist.probs:
            print(f"{p:.10e}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, instances=args.instances,
                                corrupt=args.corrupt)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component}\tmax_rel_err={r.max_error:.3e}\ttol={r.tolerance:.1e}\t{status}")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = synth_generate(args.n, k_max=args.k_max, num_layers=args.layers,
                             num_frames=args.frames, feature_dim=args.dims,
                             noise_level=args.noise, seed=args.seed)
    manifest_path = write_dataset(samples, args.out_dir)
    print(manifest_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svldl",
        description="Selective-variance label distribution learning for age regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a head on a manifest of feature files")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--manifest", default=None, help="training manifest CSV")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--preset", default=None, choices=sorted(PRESETS),
                   help="ablation preset overriding loss weights / grid")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="report MAE / PCC / unimodal coefficient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--q", type=float, default=2.0,
                   help="standard-deviation window for the unimodal coefficient")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict age and uncertainty for one SVF file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="SVF feature file")
    p.add_argument("--dump-dist", action="store_true",
                   help="also print the K distribution values, one per line")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic SVF dataset + manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--k-max", type=int, default=100)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--dims", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, FeatureFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
