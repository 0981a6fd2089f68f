#!/usr/bin/env python3
"""
Ablation Runner: trains HPRN variants on one fixed-seed synthetic corpus and
records validation metrics for each.

Variants cover the module toggles (SSRM, TCRM, SOPC), TCRM position and grid
size, SSRM scale sets, and two sweeps: the SOPC weight tau and the SSRM group
size. Every variant starts from the same base config and changes only its own
keys.

Usage:
    python ablation_runner.py --list                                   # Show variants
    python ablation_runner.py --variants full no_ssrm no_tcrm no_sopc  # Module ablations
    python ablation_runner.py --all --steps 400                        # Every variant
    python ablation_runner.py --sweep groups                           # SSRM group sizes 4..64
    python ablation_runner.py --all --config tiny.cfg --data data/abl  # Reuse a corpus
"""

import argparse
import json
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from tqdm import tqdm

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from data_synth_io import generate_corpus, load_scenes
from hprn_config import format_config, load_configs, load_environment
from hprn_model import HPRN
from log_utils import log
from metrics_suite import mean_report
from tensor_engine import resolve_dtype
from trainer import evaluate_scenes, train_loop

load_environment()

# Small network so a full sweep fits on one desktop core
BASE_CONFIG = {
    "channels": "32",
    "n_mrb": "2",
    "ssrm_groups": "16",
    "epochs": "10",
    "batch_size": "2",
    "patch_size": "32",
}

VARIANTS: Dict[str, Dict[str, str]] = {
    "full": {},
    "no_ssrm": {"use_ssrm": "off"},
    "no_tcrm": {"use_tcrm": "off"},
    "no_sopc": {"sopc_tau": "0"},
    "tcrm_pos1": {"tcrm_position": "1"},
    "tcrm_pos2": {"tcrm_position": "2"},
    "tcrm_multi": {"tcrm_position": "multi"},
    "grid_1x1": {"tcrm_grid": "1x1", "tcrm_heads": "1"},
    "grid_2x2": {"tcrm_grid": "2x2"},
    "grid_8x8": {"tcrm_grid": "8x8"},
    "scales_8": {"ssrm_scales": "8"},
    "scales_8_12": {"ssrm_scales": "8,12"},
    "scales_8_12_16": {"ssrm_scales": "8,12,16"},
    "separate_embedding": {"ssrm_shared_embedding": "off"},
}

# SOPC weight and SSRM group-size sweeps; tau 2 and 16 groups match the base setting
SOPC_TAUS = ["0.2", "0.5", "1", "2", "5", "10"]
SSRM_GROUP_SIZES = ["4", "8", "16", "32", "64"]
VARIANTS.update({f"tau_{tau}": {"sopc_tau": tau} for tau in SOPC_TAUS})
VARIANTS.update({f"groups_{groups}": {"ssrm_groups": groups} for groups in SSRM_GROUP_SIZES})

SWEEPS = {
    "tau": [f"tau_{tau}" for tau in SOPC_TAUS],
    "groups": [f"groups_{groups}" for groups in SSRM_GROUP_SIZES],
}

METRIC_KEYS = ["mrae", "rmse", "sam_degrees", "psnr_db", "assim"]


class AblationRunner:
    """Trains and evaluates named config variants on a shared corpus"""

    def __init__(self, data_dir: Optional[str] = None, config: Optional[str] = None, steps_per_epoch: int = 20,
                 seed: int = 0, results_dir: Optional[str] = None):
        self.results_dir = Path(results_dir) if results_dir else Path(__file__).parent / "results"
        self.results_dir.mkdir(parents=True, exist_ok=True)
        self.data_dir = data_dir or str(self.results_dir / "ablation_corpus")
        self.config = config
        self.steps_per_epoch = steps_per_epoch
        self.seed = seed
        self.results: List[Dict] = []

    def prepare_corpus(self):
        if os.path.exists(os.path.join(self.data_dir, "train.txt")):
            log(f"Reusing corpus at {self.data_dir}")
            return
        generate_corpus(self.data_dir, n_train=4, n_val=2, n_test=2, size=64, seed=self.seed)

    def variant_configs(self, name: str):
        """Resolve base config + variant changes + runner settings into (HPRNConfig, TrainConfig)."""
        values = dict(BASE_CONFIG)
        values.update(VARIANTS[name])
        values["seed"] = str(self.seed)
        values["steps_per_epoch"] = str(self.steps_per_epoch)
        values["run_dir"] = str(self.results_dir / "runs" / name)
        return load_configs(self.config, values)

    def run_variant(self, name: str) -> Dict:
        model_cfg, train_cfg = self.variant_configs(name)

        train_scenes = load_scenes(self.data_dir, "train")
        val_scenes = load_scenes(self.data_dir, "val")
        model = HPRN(model_cfg, resolve_dtype(train_cfg.precision))
        result = train_loop(model, train_scenes, val_scenes, model_cfg, train_cfg, show_progress=False)
        reports = [r for _, r in evaluate_scenes(model, val_scenes, train_cfg.psnr_formula)]

        entry = {
            "variant": name,
            "changes": VARIANTS[name],
            "steps": result.steps,
            "final_loss": result.losses[-1] if result.losses else None,
            "best_val_mrae": result.best_val_mrae,
            "metrics": mean_report(reports),
            "config": format_config(model_cfg) + format_config(train_cfg),
        }
        self.results.append(entry)
        return entry

    def run(self, names: List[str]) -> Path:
        self.prepare_corpus()
        for name in tqdm(names, desc="Variants", unit="variant"):
            entry = self.run_variant(name)
            metrics = entry["metrics"]
            log(f"{name}: MRAE {metrics['mrae']:.4f}, SAM {metrics['sam_degrees']:.3f}, PSNR {metrics['psnr_db']:.2f}")
        return self.save_results()

    def save_results(self) -> Path:
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        output_file = self.results_dir / f"ablation_{timestamp}.json"
        output_data = {
            "timestamp": datetime.now().isoformat(),
            "benchmark_type": "ablation",
            "corpus": self.data_dir,
            "seed": self.seed,
            "steps_per_epoch": self.steps_per_epoch,
            "metric_keys": METRIC_KEYS,
            "results": self.results,
        }
        with open(output_file, "w") as f:
            json.dump(output_data, f, indent=2)
        print(f"Results saved to: {output_file}")
        return output_file


def main():
    parser = argparse.ArgumentParser(description="Train and compare HPRN ablation variants")
    parser.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), help="Variants to run")
    parser.add_argument("--all", action="store_true", help="Run every variant")
    parser.add_argument("--sweep", choices=sorted(SWEEPS), help="Run one sweep: SOPC weight (tau) or SSRM group size")
    parser.add_argument("--list", action="store_true", help="List variants and exit")
    parser.add_argument("--data", type=str, help="Corpus directory (generated when missing)")
    parser.add_argument("--config", type=str, help="Base key=value config file")
    parser.add_argument("--steps", type=int, default=20, help="Steps per epoch")
    parser.add_argument("--seed", type=int, default=0)

    args = parser.parse_args()

    if args.list:
        for name, changes in VARIANTS.items():
            described = ", ".join(f"{k}={v}" for k, v in changes.items()) or "base config"
            print(f"  {name:20s} {described}")
        return

    if args.all:
        names = sorted(VARIANTS)
    elif args.sweep:
        names = SWEEPS[args.sweep]
    else:
        names = args.variants
    if not names:
        parser.print_help()
        print("\nExamples:")
        print("  python ablation_runner.py --variants full no_ssrm no_tcrm no_sopc")
        print("  python ablation_runner.py --all --steps 40")
        print("  python ablation_runner.py --sweep tau")
        return

    runner = AblationRunner(data_dir=args.data, config=args.config, steps_per_epoch=args.steps, seed=args.seed)
    runner.run(names)


if __name__ == "__main__":
    main()
