"""
Command-line front end: train, sr, eval, params, inspect.

Exit codes: 0 success, 1 training halted on a non-finite value, 2 invalid
configuration, checkpoint problem or bad block index, 3 data errors.
"""
import argparse
import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import FrozenSet, Optional

import numpy as np
from pydantic import ValidationError

from mamsr.checkpoint import CheckpointError, load_checkpoint
from mamsr.evaluation import bicubic_upscaler, evaluate, model_upscaler, validation_hook
from mamsr.helpers import print_json, worker_threads
from mamsr.image_io import DatasetError, ImageError, list_pngs, load_png, save_gray_png, save_png
from mamsr.model import (PRESETS, NetworkConfig, Path as ModPath, capture_maps, count_params, init_params,
                         param_increase_exact_pct, param_increase_pct, param_shapes, param_table)
from mamsr.tensor_ops import PoolStatistic
from mamsr.training import NonFiniteError, TrainConfig, TrainHooks, load_training_set, train

EXIT_OK = 0
EXIT_NON_FINITE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

CSI_STATS = [s.value for s in PoolStatistic if s is not PoolStatistic.MAX_AVG]
ICD_STATS = [s.value for s in PoolStatistic]
NETWORK_FIELDS = ("blocks", "channels", "scale", "paths", "csi_stat", "icd_stat", "reduction")


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_CONFIG):
        super().__init__(message)
        self.exit_code = exit_code


def parse_paths(text: str) -> FrozenSet[ModPath]:
    """'none' or a comma-separated subset of csi,icd,csd."""
    text = text.strip().lower()
    if text == "none":
        return frozenset()
    try:
        return frozenset(ModPath(name.strip()) for name in text.split(",") if name.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid path list {text!r}: use 'none' or a subset of csi,icd,csd")


def _add_network_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("network")
    group.add_argument("--scale", type=int, choices=[2, 3, 4], help="Upscaling factor (default 2)")
    group.add_argument("--preset", choices=sorted(PRESETS), help="Named blocks/channels preset; explicit flags win")
    group.add_argument("--blocks", type=int, help="Number of MAMBs (default 16)")
    group.add_argument("--channels", type=int, help="Feature channels (default 64)")
    group.add_argument("--paths", type=parse_paths, help="'none' or csv of csi,icd,csd (default all)")
    group.add_argument("--csi-stat", choices=CSI_STATS, help="CSI pooling statistic (default stdvar)")
    group.add_argument("--icd-stat", choices=ICD_STATS, help="Statistic fed to the ICD layers (default stdvar)")
    group.add_argument("--reduction", type=int, help="ICD reduction ratio (default 16)")
    parser.add_argument("--seed", type=int, default=0, help="Random seed (default 0)")


def network_fields(args) -> dict:
    """NetworkConfig fields given on the command line (preset expanded first)."""
    fields = dict(PRESETS[args.preset]) if args.preset else {}
    for name in NETWORK_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    return fields


def resolve_config(args) -> NetworkConfig:
    cfg = NetworkConfig(**network_fields(args))
    print_json(cfg.model_dump(mode="json"))
    return cfg


def load_checked(args):
    """Load --ckpt and reject any explicit network flag that disagrees with it."""
    if not args.ckpt:
        raise CliError("--ckpt is required")
    ckpt = load_checkpoint(args.ckpt)
    fields = network_fields(args)
    if fields:
        requested = NetworkConfig.model_validate({**ckpt.cfg.model_dump(), **fields})
        if requested != ckpt.cfg:
            diff = {k: v for k, v in requested.model_dump(mode="json").items()
                    if ckpt.cfg.model_dump(mode="json")[k] != v}
            raise CliError(f"flags do not match the checkpoint config: {diff}")
    print_json(ckpt.cfg.model_dump(mode="json"))
    return ckpt


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    overrides = {
        "batch": args.batch, "patch_lr": args.patch, "lr0": args.lr, "halve_every": args.halve_every,
        "max_iters": args.iters, "log_every": args.log_every, "val_every": args.val_every,
        "ckpt_every": args.ckpt_every,
    }
    train_cfg = TrainConfig(seed=args.seed, prefetch=args.prefetch,
                            **{k: v for k, v in overrides.items() if v is not None})
    print_json(train_cfg.model_dump(mode="json"))

    dataset = load_training_set(args.hr_dir, cfg.scale, args.lr_dir)
    hooks = TrainHooks()
    if args.val_dir:
        hooks.validate = validation_hook(cfg, args.val_dir, dataset.rgb_mean)

    out_dir = Path(args.out or "run")
    params = init_params(cfg, args.seed)
    train(params, cfg, dataset, train_cfg, out_dir, hooks)
    print(f"📄 Checkpoint: {out_dir / 'last.ckpt'}")
    print(f"📄 Log: {out_dir / 'train_log.csv'}")
    return EXIT_OK


def _sr_inputs(path: Path):
    if path.is_dir():
        inputs = list_pngs(path)
        if not inputs:
            raise DatasetError(f"{path}: no PNG images")
        return inputs
    return [path]


def cmd_sr(args) -> int:
    ckpt = load_checked(args)
    inputs = _sr_inputs(Path(args.input))
    out_dir = Path(args.out or "sr")
    out_dir.mkdir(parents=True, exist_ok=True)
    upscale = model_upscaler(ckpt.params, ckpt.cfg, ckpt.rgb_mean)

    def run(path: Path) -> Path:
        target = out_dir / f"{path.stem}_x{ckpt.cfg.scale}.png"
        save_png(upscale(load_png(path)), target)
        return target

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        for target in pool.map(run, inputs):
            print(f"📄 Wrote {target}")
    print(f"✅ Upscaled {len(inputs)} image(s) x{ckpt.cfg.scale}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.identity_check:
        cfg = resolve_config(args)
        upscaler = None
    elif args.baseline == "bicubic":
        cfg = resolve_config(args)
        upscaler = bicubic_upscaler(cfg.scale)
    else:
        ckpt = load_checked(args)
        cfg = ckpt.cfg
        upscaler = model_upscaler(ckpt.params, cfg, ckpt.rgb_mean)

    print(f"🚀 Evaluating {args.hr_dir} at x{cfg.scale}")
    report = evaluate(upscaler, args.hr_dir, cfg.scale, args.dataset, args.lr_dir,
                      threads=worker_threads(), identity_check=args.identity_check)
    print(report.format_table())
    out = Path(args.out or f"eval_{report.dataset}_x{cfg.scale}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    print(f"📄 Report: {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    if args.table:
        print(f"{'paths':<12}  {'params':>12}  {'K':>6}  {'increase':>9}")
        rows = param_table(cfg)
        for row in rows:
            if row.count is None:
                print(f"{row.label:<12}  {'n/a':>12}  {'n/a':>6}  {'n/a':>9}")
            else:
                print(f"{row.label:<12}  {row.count:>12,}  {row.count_k:>6}  {row.increase_pct:>+8.2f}%")
        if any(row.count is None for row in rows):
            print(f"⚠️  ICD rows need --channels divisible by --reduction ({cfg.reduction})")
        return EXIT_OK

    for name, shape in param_shapes(cfg):
        count = int(np.prod(shape))
        print(f"{name:<28} {str(tuple(shape)):<18} {count:>10,}")
    total = count_params(cfg)
    print(f"Total parameters: {total:,} ({round(total / 1000)}K)")
    print(f"Increase over baseline: {param_increase_pct(cfg):+.2f}% (exact {param_increase_exact_pct(cfg):+.5f}%)")
    return EXIT_OK


def _minmax(channel: np.ndarray):
    lo, hi = float(channel.min()), float(channel.max())
    scaled = (channel - lo) / (hi - lo) if hi > lo else np.zeros_like(channel)
    return scaled, lo, hi


def cmd_inspect(args) -> int:
    ckpt = load_checked(args)
    cfg = ckpt.cfg
    if not 1 <= args.block <= cfg.blocks:
        raise CliError(f"--block must be between 1 and {cfg.blocks}, got {args.block}")

    img = load_png(args.input)
    mean = np.zeros(3) if ckpt.rgb_mean is None else ckpt.rgb_mean
    x = (img - mean.astype(np.float32)).transpose(2, 0, 1)[None].astype(np.float32)
    maps = capture_maps(x, ckpt.params, cfg)[args.block - 1]

    r = args.block
    out_dir = Path(args.out or "inspect")
    out_dir.mkdir(parents=True, exist_ok=True)
    bounds = []

    if maps.csi is not None:
        with open(out_dir / f"block{r}_csi.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "value", "raw"])
            for c in range(cfg.channels):
                writer.writerow([c, f"{maps.csi[0, c]:.6g}", f"{maps.csi_raw[0, c]:.6g}"])
    if maps.icd is not None:
        with open(out_dir / f"block{r}_icd.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "value"])
            for c in range(cfg.channels):
                writer.writerow([c, f"{maps.icd[0, c]:.6g}"])
    if maps.csd is not None:
        for c in range(cfg.channels):
            scaled, lo, hi = _minmax(maps.csd[0, c])
            save_gray_png(scaled, out_dir / f"block{r}_csd_c{c:03d}.png")
            bounds.append(("csd", c, lo, hi))
    if maps.gate is not None:
        for c in range(cfg.channels):
            save_gray_png(maps.gate[0, c], out_dir / f"block{r}_gate_c{c:03d}.png")
            bounds.append(("gate", c, 0.0, 1.0))
    else:
        print(f"⚠️  Block {r} has no modulation paths; only feature statistics are available")

    with open(out_dir / f"block{r}_bounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["map", "channel", "lo", "hi"])
        for name, c, lo, hi in bounds:
            writer.writerow([name, c, f"{lo:.6g}", f"{hi:.6g}"])
    print(f"✅ Modulation maps of block {r} written to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamsr", description="Single-image super-resolution with multi-path adaptive modulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a network on a folder of HR images")
    _add_network_args(p)
    p.add_argument("--hr-dir", required=True, help="Folder of HR training PNGs")
    p.add_argument("--lr-dir", help="Folder of matching LR PNGs (default: bicubic downscale)")
    p.add_argument("--iters", type=int, help="Training iterations")
    p.add_argument("--batch", type=int, help="Mini-batch size (default 16)")
    p.add_argument("--patch", type=int, help="LR patch size (default 48)")
    p.add_argument("--lr", type=float, help="Initial learning rate (default 1e-4)")
    p.add_argument("--halve-every", type=int, help="Halve the learning rate every N iterations")
    p.add_argument("--log-every", type=int, help="Log interval in iterations")
    p.add_argument("--val-dir", help="Held-out HR folder for periodic validation PSNR")
    p.add_argument("--val-every", type=int, help="Validation interval in iterations")
    p.add_argument("--ckpt-every", type=int, help="Checkpoint interval in iterations")
    p.add_argument("--prefetch", action="store_true", help="Assemble batches on a producer thread")
    p.add_argument("--out", help="Output folder (default run/)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sr", help="Upscale an image or a folder of images")
    _add_network_args(p)
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="PNG file or folder")
    p.add_argument("--out", help="Output folder (default sr/)")
    p.set_defaults(handler=cmd_sr)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM on a folder of HR images")
    _add_network_args(p)
    p.add_argument("--ckpt", help="Checkpoint file")
    p.add_argument("--hr-dir", required=True, help="Folder of HR PNGs")
    p.add_argument("--lr-dir", help="Folder of matching LR PNGs (default: bicubic downscale)")
    p.add_argument("--dataset", help="Dataset name for the report (default: folder name)")
    p.add_argument("--baseline", choices=["bicubic"], help="Evaluate a baseline upscaler instead of a model")
    p.add_argument("--identity-check", action="store_true", help="Score the ground truth against itself")
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("params", help="Parameter accounting")
    _add_network_args(p)
    p.add_argument("--table", action="store_true", help="All eight path combinations")
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("inspect", help="Dump the modulation maps of one block")
    _add_network_args(p)
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="PNG file")
    p.add_argument("--block", type=int, default=1, help="1-based block index (default 1)")
    p.add_argument("--out", help="Output folder (default inspect/)")
    p.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"❌ Invalid configuration:\n{e}")
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"❌ Checkpoint error ({e.code}): {e}")
        return EXIT_CONFIG
    except CliError as e:
        print(f"❌ {e}")
        return e.exit_code
    except (DatasetError, ImageError) as e:
        print(f"❌ Data error: {e}")
        return EXIT_DATA
    except NonFiniteError as e:
        print(f"❌ Training halted: {e}")
        return EXIT_NON_FINITE
