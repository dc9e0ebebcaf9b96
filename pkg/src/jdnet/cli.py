"""Command-line driver: train, eval, derain, gradcheck and synth subcommands.

Exit codes: 0 success, 2 usage/config error, 3 I/O or data error, 4 numerical
failure (NaN loss, failed gradient check). Options may come from a flat
key = value config file; explicit flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as G
from . import trainer as TR
from .tensor import NumericsError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


# keys accepted in config files, with their parsers
CONFIG_KEYS = {
    "epochs": int,
    "base_lr": float,
    "crop": int,
    "units": int,
    "channels": int,
    "scales": int,
    "pool_r": int,
    "footprint": int,
    "red": int,
    "share": int,
    "batch_size": int,
    "ablation": str,
    "loss": str,
    "seed": int,
    "attention_normalize": str,
    "synth_images": int,
    "synth_size": int,
    "checkpoint_every": int,
    "data_root": str,
    "out": str,
    "pair_pattern": str,
}


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' comments; values are bare or quoted."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        val = val.strip("\"'")
        try:
            values[key] = CONFIG_KEYS[key](val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from e
    return values


def _merge(args, file_values: dict, key: str, default):
    """Precedence: explicit flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_values:
        return file_values[key]
    return default


def _build_train_config(args, file_values) -> TR.TrainConfig:
    base = TR.TrainConfig()
    kwargs = {}
    for key in (
        "epochs",
        "base_lr",
        "crop",
        "units",
        "channels",
        "scales",
        "pool_r",
        "footprint",
        "red",
        "share",
        "batch_size",
        "ablation",
        "loss",
        "seed",
        "attention_normalize",
        "synth_images",
        "synth_size",
        "checkpoint_every",
    ):
        kwargs[key] = _merge(args, file_values, key, getattr(base, key))
    return TR.TrainConfig(**kwargs)


def _add_train_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-root", dest="data_root", help="directory of paired PNGs")
    p.add_argument("--synth", action="store_true", help="train on procedural synthetic pairs")
    p.add_argument("--out", help="output directory for checkpoints and metrics")
    p.add_argument("--pair-pattern", dest="pair_pattern", help="rainy,clean filename templates")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="base_lr", type=float)
    p.add_argument("--crop", type=int)
    p.add_argument("--units", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--scales", type=int)
    p.add_argument("--pool-r", dest="pool_r", type=int)
    p.add_argument("--footprint", type=int)
    p.add_argument("--red", type=int)
    p.add_argument("--share", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--ablation", choices=("R1", "R2", "R3"))
    p.add_argument("--loss", choices=TR.LOSSES)
    p.add_argument("--seed", type=int)
    p.add_argument("--attention-normalize", dest="attention_normalize", choices=("softmax", "none"))
    p.add_argument("--synth-images", dest="synth_images", type=int)
    p.add_argument("--synth-size", dest="synth_size", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    cfg = _build_train_config(args, file_values)
    out = _merge(args, file_values, "out", None)
    if out is None:
        print("error: --out is required", file=sys.stderr)
        return EXIT_USAGE
    data_root = _merge(args, file_values, "data_root", None)
    if args.synth == (data_root is not None):
        print("error: choose exactly one of --synth or --data-root", file=sys.stderr)
        return EXIT_USAGE
    manifest = synth = None
    if args.synth:
        synth = D.RainSynthConfig(seed=cfg.seed)
    else:
        pattern = _merge(args, file_values, "pair_pattern", D.DEFAULT_PAIR_PATTERN)
        manifest = D.load_manifest(data_root, pattern=pattern)
        for warn in manifest.unpaired:
            print(f"warning: unpaired file {warn}", file=sys.stderr)
    result = TR.train(cfg, manifest=manifest, synth=synth, out_dir=out, resume_from=args.resume,
                      log=print)
    if result.halted and result.halted.startswith("non-finite"):
        print(f"error: {result.halted}; last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    manifest = D.load_manifest(args.data_root, pattern=args.pair_pattern, split="test")
    report = TR.evaluate(ckpt, manifest, colorspace=args.colorspace)
    print(report.render_text())
    if args.report:
        report.write_csv(args.report)
    return EXIT_OK


def cmd_derain(args) -> int:
    ckpt = TR.load_checkpoint(args.checkpoint)
    net, _ = ckpt.restore_network()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.inputs:
        path = Path(path)
        try:
            img = D.load_image(path)
        except D.DataError as e:
            print(f"error: {e}", file=sys.stderr)
            failures += 1
            continue
        b_hat, r_raw = TR.derain_image(net, img)
        D.save_image(out_dir / f"derained-{path.name}", b_hat)
        if args.dump_streaks:
            span = float(r_raw.max() - r_raw.min())
            streaks = (r_raw - r_raw.min()) / span if span > 0 else np.zeros_like(r_raw)
            D.save_image(out_dir / f"streaks-{path.name}", streaks)
    return EXIT_IO if failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = G.run_suite(module=args.module, tol=args.tol, seed=args.seed)
    failed = 0
    for rep in reports:
        print(rep.line())
        failed += 0 if rep.passed else 1
    print(f"{len(reports) - failed}/{len(reports)} checks passed (tol {args.tol:g})")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_synth(args) -> int:
    clean_dir = Path(args.clean_dir)
    if not clean_dir.is_dir():
        print(f"error: --clean-dir {clean_dir} is not a directory", file=sys.stderr)
        return EXIT_IO
    names = sorted(p.name for p in clean_dir.iterdir() if p.suffix.lower() == ".png")
    if not names:
        print(f"error: no PNG files under {clean_dir}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create {out_dir}: {e}", file=sys.stderr)
        return EXIT_IO
    cfg = D.RainSynthConfig(
        streak_count=tuple(args.streaks),
        angle=tuple(args.angle),
        length=tuple(args.length),
        width=tuple(args.width),
        intensity=tuple(args.intensity),
        seed=args.seed,
    )
    streams = np.random.SeedSequence(args.seed).spawn(len(names))
    for name, ss in zip(names, streams):
        clean = D.load_image(clean_dir / name)
        pid = Path(name).stem
        pair = D.synthesize_rain(clean, cfg, rng=np.random.default_rng(ss), pair_id=pid)
        try:
            D.save_image(out_dir / f"rain-{pid}.png", pair.rainy)
            D.save_image(out_dir / f"norain-{pid}.png", pair.clean)
        except OSError as e:
            print(f"error: cannot write under {out_dir}: {e}", file=sys.stderr)
            return EXIT_IO
    print(f"wrote {2 * len(names)} files to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jdnet", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a deraining network")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="report PSNR/SSIM over a paired dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", dest="data_root", required=True)
    p.add_argument("--report", help="CSV output path (id,psnr,ssim)")
    p.add_argument("--pair-pattern", dest="pair_pattern", default=D.DEFAULT_PAIR_PATTERN)
    p.add_argument("--colorspace", choices=("rgb", "luma"), default="rgb")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("derain", help="remove rain from images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True, metavar="IMAGE")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-streaks", action="store_true",
                   help="also write min-max normalized streak maps")
    p.set_defaults(fn=cmd_derain)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", choices=G.GROUPS, default="all")
    p.add_argument("--tol", type=float, default=G.DEFAULT_TOL)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="render rainy/clean training pairs")
    p.add_argument("--clean-dir", dest="clean_dir", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--streaks", type=int, nargs=2, default=[40, 80], metavar=("LO", "HI"))
    p.add_argument("--angle", type=float, nargs=2, default=[60.0, 120.0], metavar=("LO", "HI"))
    p.add_argument("--length", type=float, nargs=2, default=[8.0, 24.0], metavar=("LO", "HI"))
    p.add_argument("--width", type=float, nargs=2, default=[1.0, 2.5], metavar=("LO", "HI"))
    p.add_argument("--intensity", type=float, nargs=2, default=[0.10, 0.40], metavar=("LO", "HI"))
    p.set_defaults(fn=cmd_synth)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, TR.CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
