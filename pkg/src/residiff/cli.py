"""Command-line entry point for dataset generation and experiment stages.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import load_config
from .data import generate_phantoms, split_dataset, write_dataset
from .errors import ConfigError, DataError, NumericalError
from .pipeline import run_ablation, run_joint_finetune, run_refine_eval, run_train_diff, run_train_seg
from .report import ReportRow, emit_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="residiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom dataset directory")
    g.add_argument("--n", type=int, default=250)
    g.add_argument("--hw", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=0.3)
    g.add_argument("--out", required=True)
    g.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1))

    for name in ("train-seg", "train-diff", "finetune", "refine-eval", "ablate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config out_dir")
        if name == "refine-eval":
            p.add_argument("--split", choices=("val", "test"), default="val")
            p.add_argument("--use", choices=("diff", "joint", "auto"), default="auto")
    return parser


def _load_cfg(args):
    import dataclasses

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _require_ckpt(cfg, name: str):
    path = Path(cfg.out_dir) / "checkpoints" / f"{name}.ckpt"
    if not path.exists():
        raise DataError(f"missing {name} checkpoint at {path}; run the earlier stage first")
    return load_checkpoint(path)


def _cmd_gen_data(args) -> None:
    cases = generate_phantoms(args.n, args.hw, args.seed, args.noise_sigma)
    manifest = split_dataset(cases, tuple(args.fractions), args.seed)
    write_dataset(manifest, cases, args.out)
    counts = {s: len(manifest.split_ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.n} cases to {args.out} (splits: {counts})")


def _cmd_report(cfg) -> None:
    out = Path(cfg.out_dir)
    rows, scatter, history = [], [], []

    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        with open(metrics_path, encoding="utf-8") as f:
            recs = list(csv.DictReader(f))
        for rec in recs:
            if rec["case_id"] == "mean":
                for method, prefix in (("baseline", "baseline"), ("refined", "refined")):
                    hd = rec[f"{prefix}_hd95"]
                    rows.append(
                        ReportRow(
                            method,
                            float(rec[f"{prefix}_dsc"]),
                            float(hd) if hd else None,
                            float(rec[f"{prefix}_vs"]),
                        )
                    )
            else:
                scatter.append((float(rec["baseline_dsc"]), float(rec["refined_dsc"])))

    ablation_path = out / "ablation.csv"
    if ablation_path.exists():
        with open(ablation_path, encoding="utf-8") as f:
            for rec in csv.DictReader(f):
                hd = rec["hd95"]
                rows.append(ReportRow(rec["arm"], float(rec["dsc"]), float(hd) if hd else None, float(rec["vs"])))

    history_path = out / "history.csv"
    if history_path.exists():
        with open(history_path, encoding="utf-8") as f:
            history = list(csv.DictReader(f))

    if not rows:
        raise DataError(f"nothing to report under {out}; run refine-eval or ablate first")
    written = emit_report(rows, out, history=history or None, scatter=scatter or None)
    print(f"wrote {written['report_md']}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            _cmd_gen_data(args)
            return EXIT_OK

        cfg = _load_cfg(args)
        if args.command == "train-seg":
            ckpt = run_train_seg(cfg)
            last = ckpt.history[-1]["l_seg"] if ckpt.history else float("nan")
            print(f"trained segmentation for {cfg.seg.epochs} epochs (final loss {last:.4f})")
        elif args.command == "train-diff":
            seg_ckpt = _require_ckpt(cfg, "seg")
            ckpt = run_train_diff(cfg, seg_ckpt)
            last = ckpt.history[-1]["l_diff"] if ckpt.history else float("nan")
            print(f"trained noise model for {cfg.diff.epochs} epochs (final loss {last:.4f})")
        elif args.command == "finetune":
            seg_ckpt = _require_ckpt(cfg, "seg")
            diff_ckpt = _require_ckpt(cfg, "diff")
            ckpt = run_joint_finetune(cfg, seg_ckpt, diff_ckpt)
            if ckpt.history:
                print(f"fine-tuned jointly for {cfg.finetune_epochs} epochs (l_total {ckpt.history[-1]['l_total']:.4f})")
            else:
                print("fine-tuned jointly for 0 epochs")
        elif args.command == "refine-eval":
            seg_ckpt = _require_ckpt(cfg, "seg")
            which = args.use
            if which == "auto":
                which = "joint" if (Path(cfg.out_dir) / "checkpoints" / "joint.ckpt").exists() else "diff"
            diff_ckpt = _require_ckpt(cfg, which)
            report = run_refine_eval(cfg, seg_ckpt, diff_ckpt, args.split)
            print(
                f"{args.split}: baseline DSC {report.baseline.dsc_mean:.4f} -> "
                f"refined DSC {report.refined.dsc_mean:.4f} "
                f"({report.steps} steps, {report.refine_seconds:.1f}s)"
            )
        elif args.command == "ablate":
            rows = run_ablation(cfg)
            for r in rows:
                print(f"{r.arm:28s} DSC {r.dsc:.4f}  time {r.seconds:.2f}s")
        elif args.command == "report":
            _cmd_report(cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
