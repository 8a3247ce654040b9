#!/usr/bin/env python3
"""
Paired convergence comparison across training modes

Trains every (mode, seed) pair on the same training subset and held-out
carve-out, then writes:

    <out>/held_out_curves.csv   epoch x (metric, mode, seed), aligned
    <out>/held_out_curves.png   clean-reconstruction MSE per epoch, log scale
    <out>/winners.csv           per-seed final-epoch winner between two modes
    <out>/loss-<mode>-s<seed>.csv  per-iteration loss logs

    python scripts/compare_modes.py --data-dir ./data/mnist --subset 10000 --epochs 10 --seeds 0,1,2
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config
from lapdae.cli import progress_callback, require_data_dir
from lapdae.data import load_dataset
from lapdae.errors import ConfigError, LapDAEError
from lapdae.log_utils import configure_logging
from lapdae.model import init_params
from lapdae.optim import MODES, train

logger = logging.getLogger("lapdae.compare")

DEFAULT_MODES = ("lapdae", "dae_spatial")


def run_pair_grid(cfg: config.RunConfig, modes: List[str], seeds: List[int], out: Path) -> pd.DataFrame:
    """Train each (mode, seed) pair; returns the stacked held-out curves"""
    dataset = load_dataset(cfg.dataset, require_data_dir(cfg), "train").subset(cfg.subset)
    train_set, held_out = dataset.split_off(cfg.held_out_size)
    curves = []
    for seed in seeds:
        for mode in modes:
            run_cfg = config.load_run_config(overrides={"mode": mode, "seed": seed}, base=cfg.to_dict())
            progress_callback(f"mode={mode} seed={seed}: {len(train_set)} train / {len(held_out)} held-out images")
            result = train(init_params(run_cfg.arch(), seed), train_set.images, run_cfg.train_config(),
                           held_out=held_out.images, log_path=out / f"loss-{mode}-s{seed}.csv",
                           progress_callback=progress_callback)
            curves.append(result.held_out.assign(seed=seed))
    return pd.concat(curves, ignore_index=True)


def aligned_curves(curves: pd.DataFrame) -> pd.DataFrame:
    return curves.pivot_table(index="epoch", columns=["mode", "seed"], values=["clean_mse", "corrupted_mse"])


def winner_table(curves: pd.DataFrame, first: str, second: str) -> pd.DataFrame:
    """Clean held-out MSE of two modes at the last epoch, one row per seed"""
    last = curves[curves["epoch"] == curves["epoch"].max()]
    table = last.pivot_table(index="seed", columns="mode", values="clean_mse")[[first, second]]
    table["winner"] = table.apply(lambda row: first if row[first] <= row[second] else second, axis=1)
    return table


def plot_curves(curves: pd.DataFrame, path: Path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (mode, seed), group in curves.groupby(["mode", "seed"]):
        ax.plot(group["epoch"], group["clean_mse"], marker="o", label=f"{mode} (seed {seed})")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("held-out clean reconstruction MSE")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Aligned held-out curves for several training modes")
    parser.add_argument("--config", help="INI run configuration")
    parser.add_argument("--data-dir")
    parser.add_argument("--modes", default=",".join(DEFAULT_MODES), help=f"Comma list of {', '.join(MODES)}")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--subset", type=int, default=10000)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out", default="runs/compare")
    args = parser.parse_args(argv)
    configure_logging()

    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = config.load_run_config(args.config, {"data_dir": args.data_dir, "epochs": args.epochs,
                                                   "subset": args.subset, "workers": args.workers})
        unknown = [m for m in modes if m not in MODES]
        if unknown:
            raise ConfigError(f"Unknown mode(s) {', '.join(unknown)} (valid: {', '.join(MODES)})")
        curves = run_pair_grid(cfg, modes, seeds, out)
    except LapDAEError as e:
        logger.error(str(e))
        return e.exit_code

    config.write_config(cfg, out / "config.ini")
    aligned_curves(curves).to_csv(out / "held_out_curves.csv")
    plot_curves(curves, out / "held_out_curves.png")
    if len(modes) >= 2:
        winners = winner_table(curves, modes[0], modes[1])
        winners.to_csv(out / "winners.csv")
        print(winners.to_string())
        wins = int((winners["winner"] == modes[0]).sum())
        print(f"{modes[0]} <= {modes[1]} on {wins} of {len(winners)} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
