#!/usr/bin/env python3
"""
HPRN command line: synthetic data, training, inference, evaluation and plots.

Usage:
    python src/main.py gen-data --out data/clean                       # 24/4/4 scenes, 128x128x31
    python src/main.py gen-data --out data/rw --track realworld        # noisy, 8-bit RGB
    python src/main.py train --data data/clean --config tiny.cfg --run-dir runs/tiny
    python src/main.py train --data data/clean --run-dir runs/tiny --resume
    python src/main.py infer --rgb scene.png --checkpoint runs/tiny/best.ckpt --config tiny.cfg --out scene.hsc
    python src/main.py eval --pred scene.hsc --gt data/clean/scene_000.hsc --out-dir reports/
    python src/main.py eval --split test --data data/clean --checkpoint runs/tiny/best.ckpt --config tiny.cfg
    python src/main.py metrics --pred scene.hsc --gt data/clean/scene_000.hsc
    python src/main.py slic --rgb scene.png --scale 8 --scale 16 --out-dir labels/
    python src/main.py grad-check --n-params 100
    python src/main.py heatmap --pred scene.hsc --gt gt.hsc --out err.png [--band 10]
    python src/main.py curves --cube scene.hsc --point 10,20 --point 40,5 --out-csv curves.csv

Exit codes: 0 success, 1 contract or invariant failure, 2 I/O or usage error.
"""

import argparse
import csv
import os
import sys
from typing import Dict, List, Optional

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from data_synth_io import (
    generate_corpus,
    ingest_cubes,
    load_scenes,
    read_cube,
    read_rgb_png,
    write_cube,
)
from hprn_config import load_configs, load_environment
from hprn_errors import (
    CheckpointError,
    ContractError,
    CubeFormatError,
    HPRNError,
)
from hprn_model import HPRN, hprn_forward
from log_utils import log
from metrics_suite import SUMMARY_COLUMNS, evaluate, mean_report
from slic_segmenter import SlicParams, slic_segment, write_label_counts, write_label_png
from tensor_engine import resolve_dtype
from trainer import evaluate_scenes, grad_check, load_model, train_loop
from visualize import error_map, write_curves, write_heatmap

GRAD_CHECK_PRESET = {"channels": 8, "n_mrb": 1, "ssrm_groups": 4, "ssrm_scales": "2"}


# ========================================
# Helpers
# ========================================
def _overrides(args) -> Dict[str, str]:
    """Config values given on the command line, including repeated --set key=value."""
    values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in ("seed", "epochs", "steps_per_epoch", "batch_size", "patch_size", "precision", "run_dir"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return values


def _configs(args, preset: Optional[Dict[str, str]] = None):
    values = dict(preset or {})
    values.update(_overrides(args))
    return load_configs(args.config, values)


def _read_rgb(path: str) -> np.ndarray:
    if path.lower().endswith(".png"):
        return read_rgb_png(path)
    rgb = read_cube(path).values.astype(np.float64)
    if rgb.shape[0] != 3:
        raise ContractError(f"{path}: expected a 3-band RGB cube, got {rgb.shape[0]} bands")
    return rgb


def _parse_point(text: str):
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"point must be 'y,x', got '{text}'")
    return y, x


def _data_dir(args) -> str:
    return args.data or os.getenv("HPRN_DATA_DIR", "data")


# ========================================
# Commands
# ========================================
def cmd_gen_data(args) -> int:
    model_cfg, _ = _configs(args)
    out = args.out or os.getenv("HPRN_DATA_DIR", "data")
    seed = model_cfg.seed
    bands = args.bands if args.bands is not None else model_cfg.bands
    if args.ingest:
        ingest_cubes(args.ingest, out, seed=seed, track=args.track, noise_sigma=args.noise_sigma,
                     n_val=args.n_val, n_test=args.n_test)
    else:
        generate_corpus(out, args.n_train, args.n_val, args.n_test, args.size, bands, seed,
                        args.track, args.noise_sigma)
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    data = _data_dir(args)
    train_scenes = load_scenes(data, "train")
    val_scenes = load_scenes(data, "val")
    log(f"Training on {len(train_scenes)} scenes, validating on {len(val_scenes)} ({data})")
    model = HPRN(model_cfg, resolve_dtype(train_cfg.precision))
    result = train_loop(model, train_scenes, val_scenes, model_cfg, train_cfg, resume=args.resume,
                        max_steps=args.max_steps)
    print(f"best_val_mrae={result.best_val_mrae:.6f}")
    print(f"best_checkpoint={result.best_checkpoint}")
    return 0


def cmd_infer(args) -> int:
    model_cfg, train_cfg = _configs(args)
    model = load_model(args.checkpoint, model_cfg, train_cfg.precision)
    cube = hprn_forward(_read_rgb(args.rgb), None, model)
    write_cube(args.out, cube)
    log(f"Wrote {cube.bands}x{cube.height}x{cube.width} cube to {args.out}")
    return 0


def cmd_eval(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.split:
        if not args.checkpoint:
            raise ContractError("eval --split needs --checkpoint")
        model_cfg, train_cfg = _configs(args)
        model = load_model(args.checkpoint, model_cfg, train_cfg.precision)
        results = evaluate_scenes(model, load_scenes(_data_dir(args), args.split), train_cfg.psnr_formula)
        if not results:
            raise ContractError(f"split '{args.split}' is empty")
        path = os.path.join(args.out_dir, f"eval_{args.split}.csv")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["scene"] + SUMMARY_COLUMNS)
            for scene_id, report in results:
                writer.writerow([scene_id] + [report.summary()[c] for c in SUMMARY_COLUMNS])
        means = mean_report([r for _, r in results])
        for key, value in means.items():
            print(f"{key}={value:.6f}")
        log(f"Wrote per-scene metrics to {path}")
        return 0

    if not (args.pred and args.gt):
        raise ContractError("eval needs --pred and --gt, or --split")
    _, train_cfg = _configs(args)
    report = evaluate(read_cube(args.pred), read_cube(args.gt), psnr_formula=train_cfg.psnr_formula)
    report.write_csv(os.path.join(args.out_dir, "metrics.csv"))
    report.write_band_csv(os.path.join(args.out_dir, "metrics_per_band.csv"))
    print(report.pretty())
    return 0


def cmd_metrics(args) -> int:
    _, train_cfg = _configs(args)
    report = evaluate(read_cube(args.pred), read_cube(args.gt), psnr_formula=train_cfg.psnr_formula)
    if args.csv:
        writer = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerow({k: (int(v) if isinstance(v, bool) else v) for k, v in report.summary().items()})
    else:
        print(report.pretty())
    return 0


def cmd_slic(args) -> int:
    model_cfg, _ = _configs(args)
    rgb = _read_rgb(args.rgb)
    scales = args.scale or list(model_cfg.ssrm_scales)
    os.makedirs(args.out_dir, exist_ok=True)
    for scale in scales:
        params = SlicParams(scale=scale, compactness=model_cfg.slic_compactness, max_iters=model_cfg.slic_max_iters)
        lm = slic_segment(rgb, params)
        write_label_png(lm, os.path.join(args.out_dir, f"labels_k{scale}.png"))
        write_label_counts(lm, os.path.join(args.out_dir, f"labels_k{scale}.csv"))
        print(f"k={scale} labels={lm.n_labels}")
    return 0


def cmd_grad_check(args) -> int:
    model_cfg, _ = _configs(args, preset=GRAD_CHECK_PRESET)
    report = grad_check(model_cfg, n_params=args.n_params, patch=args.patch, tol=args.tol,
                        seed=model_cfg.seed)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_heatmap(args) -> int:
    _configs(args)
    errors = error_map(read_cube(args.pred), read_cube(args.gt), args.band)
    write_heatmap(args.out, errors, args.vmax)
    log(f"Wrote heatmap to {args.out} (max error {errors.max():.4f})")
    return 0


def cmd_curves(args) -> int:
    _configs(args)
    cube = read_cube(args.cube)
    reference = read_cube(args.reference) if args.reference else None
    rows = write_curves(args.out_csv, args.out_png, cube, args.point, reference)
    log(f"Wrote {len(rows)} curve rows to {args.out_csv}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "metrics": cmd_metrics,
    "slic": cmd_slic,
    "grad-check": cmd_grad_check,
    "heatmap": cmd_heatmap,
    "curves": cmd_curves,
}


# ========================================
# Parser
# ========================================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="HPRN spectral super-resolution: RGB to 31-band cubes")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, help="Global seed (overrides config)")
        p.add_argument("--config", type=str, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config value (repeatable)")
        return p

    p = add("gen-data", "Generate or ingest an RGB-HSI corpus")
    p.add_argument("--out", type=str, help="Output directory (default: $HPRN_DATA_DIR or data)")
    p.add_argument("--n-train", type=int, default=24)
    p.add_argument("--n-val", type=int, default=4)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--size", type=int, default=128, help="Scene height and width")
    p.add_argument("--bands", type=int, help="Band count (default: config bands)")
    p.add_argument("--track", choices=["clean", "realworld"], default="clean")
    p.add_argument("--noise-sigma", type=float, default=0.005, help="Real-world track noise level")
    p.add_argument("--ingest", nargs="+", metavar="CUBE", help="HSC1 cubes to ingest instead of generating")

    p = add("train", "Train HPRN on a corpus")
    p.add_argument("--data", type=str, help="Corpus directory (default: $HPRN_DATA_DIR or data)")
    p.add_argument("--run-dir", dest="run_dir", type=str)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--max-steps", type=int, help="Stop after this global step")
    p.add_argument("--resume", action="store_true", help="Continue from run-dir/last_state.npz")

    p = add("infer", "Reconstruct a cube from an RGB image")
    p.add_argument("--rgb", required=True, help="RGB .png or 3-band .hsc")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="Output HSC1 path")
    p.add_argument("--precision", choices=["float32", "float64"])

    p = add("eval", "Write metric reports for a cube pair or a whole split")
    p.add_argument("--pred", type=str)
    p.add_argument("--gt", type=str)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--data", type=str)
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--out-dir", default="reports")

    p = add("metrics", "Print the five metrics for a cube pair")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", action="store_true", help="Print CSV instead of text")

    p = add("slic", "Segment an RGB image into superpixels")
    p.add_argument("--rgb", required=True)
    p.add_argument("--scale", type=int, action="append", help="Superpixel count K (repeatable; default ssrm_scales)")
    p.add_argument("--out-dir", default="labels")

    p = add("grad-check", "Compare analytic and finite-difference gradients (64-bit)")
    p.add_argument("--n-params", type=int, default=100)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-4)

    p = add("heatmap", "Per-pixel error heatmap PNG")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--band", type=int, help="Absolute error of one band instead of MRAE")
    p.add_argument("--vmax", type=float, default=0.2, help="Error mapped to the top of the colormap")
    p.add_argument("--out", required=True)

    p = add("curves", "Spectral curves at selected pixels")
    p.add_argument("--cube", required=True)
    p.add_argument("--point", type=_parse_point, action="append", required=True, help="Pixel as y,x (repeatable)")
    p.add_argument("--reference", type=str, help="Ground-truth cube drawn dashed")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-png", type=str)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CheckpointError as e:
        log(str(e), "ERROR")
        return 2 if e.io_problem else 1
    except (CubeFormatError, OSError) as e:
        log(str(e), "ERROR")
        return 2
    except HPRNError as e:
        log(str(e), "ERROR")
        return 1


if __name__ == "__main__":
    sys.exit(main())
