#!/usr/bin/env python3
"""Run the full desk-scale experiment: data, training, refinement, ablation, report.

Equivalent to the CLI sequence gen-data / train-seg / train-diff / finetune /
refine-eval / ablate / report, driven from one place with sensible defaults.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from residiff.cli import main as cli_main
from residiff.config import ExperimentConfig, save_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk", help="experiment directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=250)
    ap.add_argument("--hw", type=int, default=64)
    ap.add_argument("--noise-sigma", type=float, default=0.3)
    ap.add_argument("--baseline", choices=("model", "degraded"), default="model",
                    help="'degraded' runs the stress protocol against corrupted truths")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    data_dir = out / "data"
    out.mkdir(parents=True, exist_ok=True)

    if not (data_dir / "manifest.json").exists():
        rc = cli_main([
            "gen-data", "--n", str(args.n), "--hw", str(args.hw),
            "--seed", str(args.seed), "--noise-sigma", str(args.noise_sigma),
            "--out", str(data_dir),
        ])
        if rc:
            return rc

    cfg = ExperimentConfig(seed=args.seed, dataset_dir=str(data_dir), out_dir=str(out))
    cfg = dataclasses.replace(cfg, diff=dataclasses.replace(cfg.diff, baseline=args.baseline))
    cfg_path = out / "config.json"
    save_config(cfg, cfg_path)

    stages = ["train-seg", "train-diff", "finetune", "refine-eval"]
    if not args.skip_ablation:
        stages.append("ablate")
    stages.append("report")
    for stage in stages:
        print(f"== {stage}")
        argv = [stage, "--config", str(cfg_path)]
        if stage == "refine-eval":
            argv += ["--split", "test"]
        rc = cli_main(argv)
        if rc:
            return rc
    print(f"done; see {out / 'report.md'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
