"""Command-line interface: corpus generation, training, scoring, evaluation.

Commands read a JSON run config; individual flags override config values,
which override built-in defaults. Exit codes: 0 success, 1 runtime
failure, 2 usage or validation error. Validation reports every bad field
at once, not just the first. When the ``SCIQA_OUTPUT_ROOT`` environment
variable is set, it supplies the default output directory and anchors
relative ``output_dir`` values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    ManifestError,
    load_image,
    load_manifest,
    load_patch_dataset,
    make_synthetic_manifest,
)
from .metrics import (
    EvalConfig,
    render_scatter,
    run_cross_database,
    run_protocol,
    write_report,
)
from .network import DEFAULT_CONV_CHANNELS, ModelConfig, build_model, score_in_chunks
from .pooling import POOLING_MODES, export_quality_map_csv, render_heatmap, score_image
from .trainer import (
    DivergenceError,
    TrainSchedule,
    export_selection_csv,
    finetune,
    pretrain,
    select_patches,
    train_two_stage,
)

OUTPUT_ROOT_ENV = "SCIQA_OUTPUT_ROOT"


@dataclass
class RunConfig:
    """Flat view of every configurable knob; see docs/config.md."""

    mode: str = "NR"
    conv_channels: tuple = DEFAULT_CONV_CHANNELS
    fc_width: int = 512
    bn_epsilon: float = 1e-5
    weight_decay: float = 1e-5
    base_lr: float = 1e-4
    lr_decay: float = 0.1
    decay_interval_epochs: int = 10
    min_lr: float = 1e-13
    total_epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    init_seed: int = 0
    select_ratio: float = 0.7
    pooling: str = "vlsd"
    train_fraction: float = 0.8
    chunk_size: int = 256
    n_repeats: int = 10
    fit_fraction: float = 0.8
    manifest: str | None = None
    output_dir: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(mode=self.mode,
                           conv_channels=tuple(self.conv_channels),
                           fc_width=self.fc_width,
                           bn_epsilon=self.bn_epsilon,
                           weight_decay=self.weight_decay)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(base_lr=self.base_lr, lr_decay=self.lr_decay,
                             decay_interval_epochs=self.decay_interval_epochs,
                             min_lr=self.min_lr,
                             total_epochs=self.total_epochs,
                             batch_size=self.batch_size, seed=self.seed)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(model=self.model_config(),
                          schedule=self.schedule(),
                          select_ratio=self.select_ratio,
                          pooling=self.pooling,
                          train_fraction=self.train_fraction,
                          chunk_size=self.chunk_size)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return _is_int(v) or isinstance(v, float)


def _check_fields(cfg: RunConfig) -> list[str]:
    """Every violated constraint, one message per field, field name first."""
    errors: list[str] = []

    def bad(name: str, message: str) -> None:
        errors.append(f"{name}: {message}")

    if cfg.mode not in ("NR", "FR"):
        bad("mode", f"must be 'NR' or 'FR', got {cfg.mode!r}")
    ch = cfg.conv_channels
    if (not isinstance(ch, (list, tuple)) or len(ch) != 8
            or not all(_is_int(c) and c >= 1 for c in ch)):
        bad("conv_channels", f"must be 8 positive integers, got {ch!r}")
    if not (_is_int(cfg.fc_width) and cfg.fc_width >= 1):
        bad("fc_width", f"must be a positive integer, got {cfg.fc_width!r}")
    if not (_is_num(cfg.bn_epsilon) and cfg.bn_epsilon > 0):
        bad("bn_epsilon", f"must be > 0, got {cfg.bn_epsilon!r}")
    if not (_is_num(cfg.weight_decay) and cfg.weight_decay >= 0):
        bad("weight_decay", f"must be >= 0, got {cfg.weight_decay!r}")
    if not (_is_num(cfg.base_lr) and cfg.base_lr > 0):
        bad("base_lr", f"must be > 0, got {cfg.base_lr!r}")
    if not (_is_num(cfg.lr_decay) and 0 < cfg.lr_decay < 1):
        bad("lr_decay", f"must be in (0, 1), got {cfg.lr_decay!r}")
    if not (_is_int(cfg.decay_interval_epochs)
            and cfg.decay_interval_epochs >= 1):
        bad("decay_interval_epochs",
            f"must be a positive integer, got {cfg.decay_interval_epochs!r}")
    if not (_is_num(cfg.min_lr) and 0 < cfg.min_lr):
        bad("min_lr", f"must be > 0, got {cfg.min_lr!r}")
    elif _is_num(cfg.base_lr) and cfg.base_lr > 0 and cfg.min_lr > cfg.base_lr:
        bad("min_lr", f"must be <= base_lr, got {cfg.min_lr!r}")
    if not (_is_int(cfg.total_epochs) and cfg.total_epochs >= 1):
        bad("total_epochs",
            f"must be a positive integer, got {cfg.total_epochs!r}")
    if not (_is_int(cfg.batch_size) and cfg.batch_size >= 1):
        bad("batch_size", f"must be a positive integer, got {cfg.batch_size!r}")
    if not _is_int(cfg.seed):
        bad("seed", f"must be an integer, got {cfg.seed!r}")
    if not _is_int(cfg.init_seed):
        bad("init_seed", f"must be an integer, got {cfg.init_seed!r}")
    if not (_is_num(cfg.select_ratio) and 0 < cfg.select_ratio <= 1):
        bad("select_ratio", f"must be in (0, 1], got {cfg.select_ratio!r}")
    if cfg.pooling not in POOLING_MODES:
        bad("pooling", f"must be one of {POOLING_MODES}, got {cfg.pooling!r}")
    if not (_is_num(cfg.train_fraction) and 0 < cfg.train_fraction < 1):
        bad("train_fraction",
            f"must be in (0, 1), got {cfg.train_fraction!r}")
    if not (_is_int(cfg.chunk_size) and cfg.chunk_size >= 1):
        bad("chunk_size", f"must be a positive integer, got {cfg.chunk_size!r}")
    if not (_is_int(cfg.n_repeats) and cfg.n_repeats >= 1):
        bad("n_repeats", f"must be a positive integer, got {cfg.n_repeats!r}")
    if not (_is_num(cfg.fit_fraction) and 0 < cfg.fit_fraction < 1):
        bad("fit_fraction", f"must be in (0, 1), got {cfg.fit_fraction!r}")
    if cfg.manifest is not None and not isinstance(cfg.manifest, str):
        bad("manifest", f"must be a path string, got {cfg.manifest!r}")
    if cfg.output_dir is not None and not isinstance(cfg.output_dir, str):
        bad("output_dir", f"must be a path string, got {cfg.output_dir!r}")
    return errors


def load_run_config(path: str | Path | None,
                    overrides: dict) -> tuple[RunConfig | None, list[str]]:
    """Merge defaults <- config file <- CLI overrides, then validate.

    Returns (config, errors); config is None whenever errors is nonempty.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            return None, [f"config: cannot read {path}: {exc}"]
        except json.JSONDecodeError as exc:
            return None, [f"config: {path} is not valid JSON: {exc}"]
        if not isinstance(raw, dict):
            return None, [f"config: {path} must hold a JSON object"]
    known = {f.name for f in fields(RunConfig)}
    errors = [f"config: unknown key {k!r}" for k in sorted(set(raw) - known)]
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**{k: v for k, v in merged.items() if k in known})
    errors.extend(_check_fields(cfg))
    if errors:
        return None, errors
    return cfg, []


def resolve_output_dir(value: str | None) -> Path | None:
    """Explicit path wins; relative paths anchor to the env root when set;
    no path at all falls back to ``$SCIQA_OUTPUT_ROOT/run``."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if value is None:
        return Path(root) / "run" if root else None
    p = Path(value)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _fail_validation(errors: list[str]) -> int:
    for line in errors:
        print(line, file=sys.stderr)
    return 2


def _fail_runtime(message: str) -> int:
    print(message, file=sys.stderr)
    return 1


def cmd_make_synth(args: argparse.Namespace) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    try:
        manifest = make_synthetic_manifest(
            args.out, n_refs=args.refs, kinds=kinds, levels=args.levels,
            seed=args.seed, size=args.size)
    except (ValueError, OSError) as exc:
        return _fail_runtime(f"make-synth failed: {exc}")
    print(f"wrote {len(manifest)} entries: {Path(args.out) / 'manifest.csv'}")
    return 0


def _load_training_data(cfg: RunConfig):
    manifest = load_manifest(cfg.manifest)
    return load_patch_dataset(manifest, with_refs=(cfg.mode == "FR"))


def cmd_train(args: argparse.Namespace) -> int:
    cfg, errors = load_run_config(args.config, {
        "manifest": args.manifest,
        "output_dir": args.out,
        "seed": args.seed,
        "select_ratio": args.select_ratio,
    })
    if errors:
        return _fail_validation(errors)
    if cfg.manifest is None:
        return _fail_validation(["manifest: required (config key or --manifest)"])
    if not Path(cfg.manifest).is_file():
        return _fail_validation([f"manifest: file not found: {cfg.manifest}"])
    out = resolve_output_dir(cfg.output_dir)
    if out is None:
        return _fail_validation([
            f"output_dir: required (config key, --out, or {OUTPUT_ROOT_ENV})"])
    try:
        batch, refs = _load_training_data(cfg)
        if args.stage is None:
            result = train_two_stage(
                cfg.model_config(), batch, cfg.schedule(),
                select_ratio=cfg.select_ratio, ref_patches=refs,
                init_seed=cfg.init_seed, out_dir=out)
            sel = result.selection
            print(f"stage1 checkpoint: {out / 'stage1.ckpt'}")
            print(f"stage2 checkpoint: {out / 'stage2.ckpt'}")
            print(f"selection kept {sel.ratio_achieved:.3f} of patches "
                  f"(target {sel.ratio_target})")
        elif args.stage == 1:
            model = build_model(cfg.model_config(), seed=cfg.init_seed)
            stage = pretrain(model, batch, cfg.schedule(), refs)
            out.mkdir(parents=True, exist_ok=True)
            cid = save_checkpoint(stage.model, out / "stage1.ckpt",
                                  meta={"stage": "pretrain",
                                        "epochs": cfg.total_epochs})
            log = {"stages": [{"name": "pretrain", "checkpoint_id": cid,
                               "epochs": stage.history}]}
            (out / "training_log.json").write_text(
                json.dumps(log, indent=2, sort_keys=True) + "\n",
                encoding="utf-8")
            print(f"stage1 checkpoint: {out / 'stage1.ckpt'}")
        else:
            ckpt = out / "stage1.ckpt"
            if not ckpt.is_file():
                return _fail_runtime(
                    f"stage 2 needs a stage-1 checkpoint at {ckpt}")
            model, meta = load_checkpoint(ckpt)
            if model.config != cfg.model_config():
                return _fail_runtime(
                    "stage-1 checkpoint architecture does not match the config")
            scores = score_in_chunks(model, batch, ref_patches=refs,
                                     chunk_size=cfg.chunk_size)
            selection = select_patches(scores, batch.labels,
                                       batch.source_ids, cfg.select_ratio)
            kept = selection.kept_indices()
            stage = finetune(model.copy(), batch.take(kept), cfg.schedule(),
                             None if refs is None else refs[kept])
            export_selection_csv(selection, batch, out / "selection.csv")
            save_checkpoint(
                stage.model, out / "stage2.ckpt",
                meta={"stage": "finetune", "epochs": cfg.total_epochs,
                      "parent_id": meta["id"],
                      "selection_ratio_target": selection.ratio_target,
                      "selection_ratio_achieved": selection.ratio_achieved})
            print(f"stage2 checkpoint: {out / 'stage2.ckpt'}")
            print(f"selection kept {selection.ratio_achieved:.3f} of patches "
                  f"(target {selection.ratio_target})")
    except DivergenceError as exc:
        return _fail_runtime(f"training diverged: {exc}")
    except (ManifestError, ValueError, OSError) as exc:
        return _fail_runtime(f"train failed: {exc}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    try:
        model, _ = load_checkpoint(args.model)
    except (ValueError, OSError) as exc:
        return _fail_runtime(f"cannot load checkpoint: {exc}")
    if model.config.mode == "FR" and args.ref is None:
        return _fail_validation(["--ref: required for a full-reference model"])
    if model.config.mode == "NR" and args.ref is not None:
        return _fail_validation(["--ref: not accepted by a no-reference model"])
    try:
        img = load_image(args.image)
        ref = None if args.ref is None else load_image(args.ref)
        quality = score_image(model, img, ref=ref, pooling=args.pooling)
        if args.map_csv is not None:
            export_quality_map_csv(quality, args.map_csv)
        if args.heatmap is not None:
            render_heatmap(quality, args.heatmap)
    except (ValueError, OSError) as exc:
        return _fail_runtime(f"score failed: {exc}")
    print(repr(quality.fused))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg, errors = load_run_config(args.config, {
        "manifest": args.manifest,
        "output_dir": args.out,
        "seed": args.seed,
        "pooling": args.pooling,
        "n_repeats": args.repeats,
        "fit_fraction": args.fit_fraction,
    })
    if errors:
        return _fail_validation(errors)
    out = resolve_output_dir(cfg.output_dir)
    if out is None:
        return _fail_validation([
            f"output_dir: required (config key, --out, or {OUTPUT_ROOT_ENV})"])
    if args.cross and (args.train is None or args.test is None):
        return _fail_validation(
            ["--cross: needs both --train and --test manifests"])
    if not args.cross and cfg.manifest is None:
        return _fail_validation(["manifest: required (config key or --manifest)"])
    for label, path in (("manifest", None if args.cross else cfg.manifest),
                        ("--train", args.train if args.cross else None),
                        ("--test", args.test if args.cross else None)):
        if path is not None and not Path(path).is_file():
            return _fail_validation([f"{label}: file not found: {path}"])
    try:
        if args.cross:
            train_m = load_manifest(args.train)
            test_m = load_manifest(args.test)
            report = run_cross_database(train_m, test_m, cfg.eval_config(),
                                        n_repeats=cfg.n_repeats,
                                        seed=cfg.seed,
                                        fit_fraction=cfg.fit_fraction)
        else:
            manifest = load_manifest(cfg.manifest)
            report = run_protocol(manifest, cfg.eval_config(),
                                  n_repeats=cfg.n_repeats, seed=cfg.seed)
        write_report(report, out / "report.json", out / "report.csv")
        if args.plot:
            render_scatter(report, out / "scatter.png")
    except (ManifestError, ValueError, OSError, RuntimeError) as exc:
        return _fail_runtime(f"evaluate failed: {exc}")
    primary = report.summary[report.primary_variant]
    print(f"report: {out / 'report.json'}")
    print(f"{report.primary_variant} ({report.aggregate} over "
          f"{report.n_completed}/{report.n_repeats} repeats): "
          f"plcc {primary['plcc']!r} srcc {primary['srcc']!r} "
          f"rmse {primary['rmse']!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sciqa",
        description="Screen-content image quality assessment pipeline.",
        epilog=("Precedence: flags override config-file keys, which override "
                f"defaults. {OUTPUT_ROOT_ENV} provides the default output "
                "root."))
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("make-synth",
                           help="generate a distorted synthetic corpus")
    synth.add_argument("--out", required=True, help="corpus directory")
    synth.add_argument("--refs", type=int, default=4,
                       help="number of reference images")
    synth.add_argument("--kinds", default="GN,GB,CC",
                       help="comma-separated distortion kinds")
    synth.add_argument("--levels", type=int, default=5,
                       help="severity levels per kind")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--size", type=int, default=192,
                       help="reference image side length")
    synth.set_defaults(func=cmd_make_synth)

    train = sub.add_parser("train", help="run the two-stage training pipeline")
    train.add_argument("--config", required=True, help="run config JSON")
    train.add_argument("--manifest", help="override config manifest path")
    train.add_argument("--out", help="override config output_dir")
    train.add_argument("--seed", type=int, help="override config seed")
    train.add_argument("--select-ratio", type=float, dest="select_ratio",
                       help="override patch selection ratio")
    train.add_argument("--stage", type=int, choices=(1, 2),
                       help="run only this stage (default: both)")
    train.set_defaults(func=cmd_train)

    score = sub.add_parser("score", help="score one image with a checkpoint")
    score.add_argument("--model", required=True, help="checkpoint path")
    score.add_argument("--image", required=True, help="image to score")
    score.add_argument("--ref", help="reference image (FR models)")
    score.add_argument("--pooling", choices=POOLING_MODES, default="vlsd")
    score.add_argument("--map-csv", dest="map_csv",
                       help="write the per-patch quality map CSV here")
    score.add_argument("--heatmap", help="write a heatmap PNG here")
    score.set_defaults(func=cmd_score)

    ev = sub.add_parser("evaluate", help="run an evaluation protocol")
    ev.add_argument("--config", required=True, help="run config JSON")
    ev.add_argument("--manifest", help="override config manifest path")
    ev.add_argument("--out", help="override config output_dir")
    ev.add_argument("--repeats", type=int, help="override config n_repeats")
    ev.add_argument("--seed", type=int, help="override config seed")
    ev.add_argument("--pooling", choices=POOLING_MODES,
                    help="override config pooling")
    ev.add_argument("--cross", action="store_true",
                    help="cross-database protocol (train once, median)")
    ev.add_argument("--train", help="training manifest for --cross")
    ev.add_argument("--test", help="test manifest for --cross")
    ev.add_argument("--fit-fraction", type=float, dest="fit_fraction",
                    help="override config fit_fraction for --cross")
    ev.add_argument("--plot", action="store_true",
                    help="also write a scatter PNG")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
