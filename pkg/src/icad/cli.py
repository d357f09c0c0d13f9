"""Command-line entry point: ``icad {train,eval,infer,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
Relative output paths are resolved under ``$ICAD_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, coerce, desk_config, parse_key_values
from .data import DataError, TextureSpec, benchmark_spec, load_directory, load_image, write_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
OUTPUT_ROOT_ENV = "ICAD_OUTPUT_ROOT"

log = logging.getLogger("icad")


def output_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--profile", choices=("full", "desk"), default="full", help="preset applied before --config")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None)


def build_config(args) -> RunConfig:
    base = desk_config() if args.profile == "desk" else RunConfig()
    if args.config:
        base = RunConfig.load(args.config, base)
    overrides = {
        k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None
    }
    return RunConfig.from_mapping(overrides, base)


def cmd_train(args) -> int:
    from .plots import plot_loss_log
    from .train import train_model

    config = build_config(args)
    run_dir = output_path(config.output_dir)
    train_images, _ = load_directory(config.train_dir)
    val_images = None
    if config.val_dir and Path(config.val_dir).is_dir():
        val_images, _ = load_directory(config.val_dir)
        val_images = val_images or None
    log.info("training %s on %d images for %d batches", config.model, len(train_images), config.batches)
    result = train_model(train_images, config, val_data=val_images, run_dir=run_dir)
    if result.log:
        plot_loss_log(result.log, run_dir / "loss")
    print(
        json.dumps(
            {
                "run_dir": str(run_dir),
                "checkpoints": [str(p) for p in result.checkpoints],
                "best": str(result.best_path) if result.best_path else None,
                "final_train_loss": result.log[-1]["train_loss"] if result.log else None,
                "seconds": round(result.seconds, 2),
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_model

    model, config, _ = load_checkpoint(args.checkpoint)
    stride = args.stride or (config.stride if config else 16)
    images, warnings = load_directory(args.test_dir, with_masks=True)
    for w in warnings:
        log.warning(w)
    if not images:
        raise DataError(f"no labelled test images in {args.test_dir}")
    out_dir = output_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config is not None:
        config.save(out_dir / "config.txt")
    ev = evaluate_model(model, images, stride=stride, out_dir=out_dir, figures=not args.no_figures, name=model.kind)
    ev.summary["warnings"] = warnings + ev.warnings
    (out_dir / "metrics.json").write_text(json.dumps(ev.summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(ev.summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .scoring import scan_image, write_amap, write_amap_png

    model, config, _ = load_checkpoint(args.checkpoint)
    stride = args.stride or (config.stride if config else 16)
    image = load_image(args.image)
    amap = scan_image(model, image, stride=stride)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    write_amap(out / f"{stem}.amap", amap.scores)
    write_amap_png(out / f"{stem}.png", amap.scores)
    if args.figure:
        from .plots import plot_anomaly_panel

        plot_anomaly_panel(image.pixels, amap.scores, None, out / f"{stem}_panel", title=stem)
    print(json.dumps({"amap": str(out / f"{stem}.amap"), "windows": amap.windows, "patches_per_second": amap.patches_per_second}))
    return EXIT_OK


def load_texture_spec(path) -> TextureSpec:
    try:
        values = parse_key_values(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read texture spec {path}: {e}") from e
    base = benchmark_spec()
    known = {f.name: f for f in dataclasses.fields(TextureSpec)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown texture spec key {key!r}")
        changes[key] = coerce(raw, type(getattr(base, key)), key)
    try:
        return dataclasses.replace(base, **changes)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_synth(args) -> int:
    spec = load_texture_spec(args.spec) if args.spec else benchmark_spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = output_path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        log.error("%s exists and is not empty; pass --force to write into it", out)
        return EXIT_DATA
    counts = write_dataset(spec, out, suffix=args.format)
    (out / "texture_spec.txt").write_text(
        "".join(f"{f.name} = {getattr(spec, f.name)}\n" for f in dataclasses.fields(spec))
    )
    print(json.dumps({"out_dir": str(out), **counts}))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a completion network or the autoencoder baseline")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pixel-level metrics, curves and anomaly maps on labelled images")
    p.add_argument("checkpoint")
    p.add_argument("test_dir")
    p.add_argument("--out", default="eval")
    p.add_argument("--stride", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="anomaly map of a single image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out", default="infer")
    p.add_argument("--stride", type=int)
    p.add_argument("--figure", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="write a synthetic train/val/test dataset")
    p.add_argument("spec", nargs="?", help="texture spec file (key = value); unset keys keep the benchmark defaults")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=(".png", ".pgm"), default=".png")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        log.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
