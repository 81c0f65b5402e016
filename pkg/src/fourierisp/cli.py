"""Command-line entry point: ``fourierisp <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 runtime.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import UnidentifiedImageError

from . import fourier, imaging
from .exceptions import ConfigError, DatasetError, DimensionError, ParameterError
from .training import DATASET_ROOT_ENV, Checkpoint, TrainConfig, apply_overrides, evaluate, infer, train

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5

log = logging.getLogger("fourierisp")


class UsageError(Exception):
    pass


def _parse_override(text):
    """``key=value`` with the value read as a TOML scalar (bare words as strings)."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.strip(), parsed


def _load_config(args):
    overrides = dict(_parse_override(s) for s in args.set or [])
    for flag, key in (("iters", "total_iters"), ("seed", "seed"), ("batch_size", "batch_size"),
                      ("patch_size", "patch_size"), ("channels", "model.base_channels")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    # precedence: --dataset-root, then the environment, then the config file
    root = getattr(args, "dataset_root", None) or os.environ.get(DATASET_ROOT_ENV)
    if root:
        overrides["dataset_root"] = str(root)
    if args.config:
        return TrainConfig.from_file(args.config, overrides)
    return TrainConfig.from_dict(apply_overrides({}, overrides))


def cmd_train(args):
    config = _load_config(args)
    out = Path(args.out)
    result = train(config, checkpoint_dir=out, resume=args.resume)
    with open(out / "losses.csv", "w", newline="") as fh:
        if result.history:
            writer = csv.DictWriter(fh, fieldnames=list(result.history[0]))
            writer.writeheader()
            writer.writerows(result.history)
    last = result.history[-1] if result.history else None
    if last:
        print(f"iteration {last['iteration'] + 1}: total loss {last['total']:.6f}")
    print(f"checkpoint: {out / 'last.ckpt'}")
    return EXIT_OK


def _dataset_root(args, checkpoint):
    root = args.dataset_root or os.environ.get(DATASET_ROOT_ENV) or checkpoint.config.dataset_root
    if not root:
        raise ConfigError(f"no dataset root: pass --dataset-root or set ${DATASET_ROOT_ENV}")
    return root


def cmd_eval(args):
    checkpoint = Checkpoint.load(args.checkpoint)
    index = imaging.load_dataset(_dataset_root(args, checkpoint), args.split)
    names = [Path(raw).stem for raw, _ in index.pairs]
    result = evaluate(checkpoint, index.load_all(), names, quantize=not args.float)
    if result.skipped:
        print(f"skipped {len(result.skipped)} image(s): {', '.join(result.skipped)}", file=sys.stderr)
    txt, _ = result.write(args.out)
    print(txt.read_text(), end="")
    return EXIT_OK


def cmd_infer(args):
    paths = infer(args.checkpoint, args.input, args.out, args.intermediates, args.bit_depth, args.cfa)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_decompose(args):
    img = imaging.read_rgb(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for suffix, mapped in (("_log_amplitude.png", fourier.log_amplitude_image(img)),
                           ("_phase.png", fourier.phase_image(img))):
        imaging.write_rgb(out / f"{stem}{suffix}", mapped)
        print(out / f"{stem}{suffix}")
    return EXIT_OK


def _split_counts(n, fractions):
    counts = [int(np.floor(n * f)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


def cmd_synth_data(args):
    if (args.input is None) == (args.scenes is None):
        raise UsageError("synth-data needs exactly one of --in or --scenes")
    if args.input is not None:
        src = Path(args.input)
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")) \
            if src.is_dir() else []
        if not files:
            raise FileNotFoundError(f"no images found in {src}")
        names = [p.stem for p in files]
        images = [imaging.read_rgb(p) for p in files]
    else:
        names = [f"scene_{i:05d}" for i in range(args.scenes)]
        images = [imaging.random_scene(args.size, args.seed * 100003 + i) for i in range(args.scenes)]

    fractions = [float(f) for f in args.split.split(",")]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ParameterError(f"--split needs three nonnegative fractions summing to 1, got {args.split!r}")
    order = np.random.default_rng(args.seed).permutation(len(images))
    params = imaging.DegradationParams(args.gamma, tuple(args.wb_gains), args.read_noise, args.shot_noise, args.seed)
    start = 0
    for split, count in zip(imaging.SPLITS, _split_counts(len(images), fractions)):
        chosen = sorted(order[start:start + count])
        # offset the noise seed by the running index so splits never share draws
        split_params = replace(params, seed=args.seed + start)
        start += count
        imaging.write_dataset(args.out, [images[i] for i in chosen], split_params, split,
                              args.bit_depth, args.cfa, [names[i] for i in chosen])
        print(f"{split}: {count} pair(s)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fourierisp", description="RAW-to-RGB training and evaluation tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted for tables)")
    p.add_argument("--dataset-root", type=Path, help=f"dataset root (overrides ${DATASET_ROOT_ENV})")
    p.add_argument("--out", type=Path, default=Path("runs/train"), help="checkpoint directory")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int, help="square crop size; 0 trains on whole images")
    p.add_argument("--channels", type=int, choices=(16, 24, 48))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset-root", type=Path)
    p.add_argument("--split", choices=imaging.SPLITS, default="test")
    p.add_argument("--out", type=Path, default=Path("runs/eval"))
    p.add_argument("--float", action="store_true", help="skip 8-bit quantization before scoring")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="render one RAW PNG")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--intermediates", action="store_true", help="also write branch outputs and spectra")
    p.add_argument("--bit-depth", type=int, choices=imaging.BIT_DEPTHS)
    p.add_argument("--cfa", choices=imaging.CFA_PATTERNS)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decompose", help="write amplitude and phase images of an RGB PNG")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("synth-data", help="build a synthetic RAW/RGB dataset")
    p.add_argument("--in", dest="input", type=Path, help="directory of RGB images")
    p.add_argument("--scenes", type=int, help="number of procedural scenes instead of --in")
    p.add_argument("--size", type=int, default=64, help="procedural scene size")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--bit-depth", type=int, choices=imaging.BIT_DEPTHS, default=10)
    p.add_argument("--cfa", choices=imaging.CFA_PATTERNS, default="RGGB")
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--wb-gains", type=float, nargs=3, default=(2.0, 1.0, 1.6), metavar=("R", "G", "B"))
    p.add_argument("--read-noise", type=float, default=0.0)
    p.add_argument("--shot-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fourierisp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"fourierisp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, DimensionError, ParameterError, FileNotFoundError,
            UnidentifiedImageError, IsADirectoryError) as exc:
        print(f"fourierisp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"fourierisp: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
