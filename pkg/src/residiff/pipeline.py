"""Experiment stages: sequential training, joint fine-tuning, refinement, ablations.

One top-level seed fixes everything: sub-seeds for initialization,
shuffling, degradation, and per-case sampling are derived from it by
purpose tags, so reruns reproduce results and per-case work stays
independent (parallelizable in principle).
"""

from __future__ import annotations

import csv
import dataclasses
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    Checkpoint,
    adam_state_to_numpy,
    load_state_into,
    restore_adam_state,
    save_checkpoint,
    state_to_numpy,
)
from .config import ExperimentConfig
from .data import PhantomCase, read_dataset, split_cases, stress_degrade
from .diffusion import (
    ConditioningBundle,
    NoisePredictor,
    PredictorConfig,
    build_predictor,
    compute_residual,
    diffusion_loss_batch,
    refine,
)
from .errors import DataError, NumericalError
from .metrics import AggregateReport, evaluate_cases
from .schedule import NoiseSchedule, linear_schedule
from .segmentation import SegConfig, SegmentationModel, build_model, dice_ce_loss, train_epoch


def derive_seed(base: int, tag: str) -> int:
    """Stable sub-seed for a named purpose under one top-level seed."""
    entropy = [int(base) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode("utf-8"))]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def stack_cases(cases: list[PhantomCase]) -> tuple[torch.Tensor, torch.Tensor]:
    volumes = torch.from_numpy(np.stack([c.volume for c in cases]))
    masks = torch.from_numpy(np.stack([c.mask for c in cases]))
    return volumes, masks


def load_splits(cfg: ExperimentConfig) -> dict:
    if not cfg.dataset_dir:
        raise DataError("config has no dataset_dir")
    manifest, cases = read_dataset(cfg.dataset_dir)
    return split_cases(manifest, cases)


def _data_dims(cases: list[PhantomCase]) -> tuple[int, int, int]:
    c_in, h, _ = cases[0].volume.shape
    c_mask = cases[0].mask.shape[0]
    return c_in, c_mask, h


def seg_config_for(cfg: ExperimentConfig, cases: list[PhantomCase]) -> SegConfig:
    c_in, c_mask, hw = _data_dims(cases)
    return SegConfig(
        in_channels=c_in, out_channels=c_mask, depth=cfg.seg.depth, base_width=cfg.seg.base_width, hw=hw
    )


def predictor_config_for(cfg: ExperimentConfig, cases: list[PhantomCase]) -> PredictorConfig:
    c_in, c_mask, hw = _data_dims(cases)
    return PredictorConfig(
        mask_channels=c_mask,
        image_channels=c_in,
        depth=cfg.diff.depth,
        base_width=cfg.diff.base_width,
        condition_on_image=cfg.diff.condition_on_image,
        condition_on_mask=cfg.diff.condition_on_mask,
        hw=hw,
    )


def schedule_for(cfg: ExperimentConfig) -> NoiseSchedule:
    return linear_schedule(cfg.diff.T, cfg.diff.beta_start, cfg.diff.beta_end)


def rebuild_seg_model(ckpt: Checkpoint, cases: list[PhantomCase]) -> SegmentationModel:
    model = build_model(seg_config_for(ckpt.config, cases), seed=0)
    load_state_into(model, ckpt.seg_state)
    return model


def rebuild_predictor(ckpt: Checkpoint, cases: list[PhantomCase]) -> NoisePredictor:
    predictor = build_predictor(predictor_config_for(ckpt.config, cases), seed=0)
    load_state_into(predictor, ckpt.diff_state)
    return predictor


def predict_batched(model: SegmentationModel, volumes: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, volumes.shape[0], batch_size):
            outs.append(model(volumes[start : start + batch_size]))
    return torch.cat(outs)


def baseline_masks(cfg: ExperimentConfig, model: SegmentationModel, cases: list[PhantomCase]) -> torch.Tensor:
    """Per-case baseline predictions: the model's output, or stress-degraded truth."""
    if cfg.diff.baseline == "model":
        volumes, _ = stack_cases(cases)
        return predict_batched(model, volumes)
    degraded = [stress_degrade(c.mask, derive_seed(cfg.seed, f"degrade/{c.id}")) for c in cases]
    return torch.from_numpy(np.stack(degraded))


def _append_history(out_dir: str, rows: list[dict]) -> None:
    if not out_dir:
        return
    path = Path(out_dir) / "history.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if new_file:
            w.writerow(["stage", "epoch", "l_seg", "l_diff", "l_total"])
        for r in rows:
            w.writerow(
                [
                    r["stage"],
                    r["epoch"],
                    r.get("l_seg", ""),
                    r.get("l_diff", ""),
                    r.get("l_total", ""),
                ]
            )


def _ckpt_path(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / f"{name}.ckpt"


# ---------------------------------------------------------------------------
# stage 1: segmentation


def run_train_seg(cfg: ExperimentConfig) -> Checkpoint:
    splits = load_splits(cfg)
    train_cases = splits["train"]
    if not train_cases:
        raise DataError("train split is empty")
    volumes, masks = stack_cases(train_cases)

    model = build_model(seg_config_for(cfg, train_cases), derive_seed(cfg.seed, "seg-init"))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.seg.lr)
    shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, "seg-shuffle"))

    history = []
    for epoch in range(cfg.seg.epochs):
        loss = train_epoch(model, volumes, masks, optimizer, cfg.seg.batch_size, shuffle)
        history.append({"stage": "seg", "epoch": epoch, "l_seg": loss})

    ckpt = Checkpoint(
        kind="seg",
        config=cfg,
        seg_state=state_to_numpy(model),
        seg_opt=adam_state_to_numpy(optimizer, model),
        history=history,
    )
    if cfg.out_dir:
        save_checkpoint(ckpt, _ckpt_path(cfg, "seg"))
        _append_history(cfg.out_dir, history)
    return ckpt


# ---------------------------------------------------------------------------
# stage 2: residual diffusion (theta frozen)


def run_train_diff(cfg: ExperimentConfig, seg_ckpt: Checkpoint) -> Checkpoint:
    splits = load_splits(cfg)
    train_cases = splits["train"]
    if not train_cases:
        raise DataError("train split is empty")
    volumes, masks = stack_cases(train_cases)

    seg_model = rebuild_seg_model(seg_ckpt, train_cases)
    y0 = baseline_masks(cfg, seg_model, train_cases)
    e0 = compute_residual(masks, y0)

    predictor = build_predictor(predictor_config_for(cfg, train_cases), derive_seed(cfg.seed, "diff-init"))
    optimizer = torch.optim.Adam(predictor.parameters(), lr=cfg.diff.lr)
    shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, "diff-shuffle"))
    draws = torch.Generator().manual_seed(derive_seed(cfg.seed, "diff-draws"))
    schedule = schedule_for(cfg)

    n = e0.shape[0]
    history = []
    predictor.train()
    for epoch in range(cfg.diff.epochs):
        order = torch.randperm(n, generator=shuffle)
        losses = []
        for start in range(0, n, cfg.diff.batch_size):
            idx = order[start : start + cfg.diff.batch_size]
            cond = ConditioningBundle(image=volumes[idx], initial_mask=y0[idx])
            optimizer.zero_grad()
            loss = diffusion_loss_batch(predictor, e0[idx], cond, schedule, draws)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite diffusion loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append({"stage": "diff", "epoch": epoch, "l_diff": sum(losses) / len(losses)})
    predictor.eval()

    ckpt = Checkpoint(
        kind="diff",
        config=cfg,
        seg_state=seg_ckpt.seg_state,
        diff_state=state_to_numpy(predictor),
        seg_opt=seg_ckpt.seg_opt,
        diff_opt=adam_state_to_numpy(optimizer, predictor),
        history=history,
    )
    if cfg.out_dir:
        save_checkpoint(ckpt, _ckpt_path(cfg, "diff"))
        _append_history(cfg.out_dir, history)
    return ckpt


# ---------------------------------------------------------------------------
# stage 3: joint fine-tuning (alternating updates)


def run_joint_finetune(cfg: ExperimentConfig, seg_ckpt: Checkpoint, diff_ckpt: Checkpoint) -> Checkpoint:
    splits = load_splits(cfg)
    train_cases = splits["train"]
    if not train_cases:
        raise DataError("train split is empty")
    volumes, masks = stack_cases(train_cases)

    seg_model = rebuild_seg_model(seg_ckpt, train_cases)
    predictor = rebuild_predictor(diff_ckpt, train_cases)
    opt_seg = torch.optim.Adam(seg_model.parameters(), lr=cfg.seg.lr)
    opt_diff = torch.optim.Adam(predictor.parameters(), lr=cfg.diff.lr)
    if seg_ckpt.seg_opt:
        restore_adam_state(opt_seg, seg_model, seg_ckpt.seg_opt)
    if diff_ckpt.diff_opt:
        restore_adam_state(opt_diff, predictor, diff_ckpt.diff_opt)

    shuffle = torch.Generator().manual_seed(derive_seed(cfg.seed, "joint-shuffle"))
    draws = torch.Generator().manual_seed(derive_seed(cfg.seed, "joint-draws"))
    schedule = schedule_for(cfg)

    degraded = None
    if cfg.diff.baseline == "degraded":
        degraded = baseline_masks(cfg, seg_model, train_cases)

    n = volumes.shape[0]
    history = []
    for epoch in range(cfg.finetune_epochs):
        order = torch.randperm(n, generator=shuffle)
        seg_losses, diff_losses = [], []
        seg_model.train()
        predictor.train()
        for start in range(0, n, cfg.seg.batch_size):
            idx = order[start : start + cfg.seg.batch_size]
            xb, yb = volumes[idx], masks[idx]

            opt_seg.zero_grad()
            l_seg = dice_ce_loss(seg_model(xb), yb)
            if not torch.isfinite(l_seg):
                raise NumericalError(f"non-finite segmentation loss at epoch {epoch}")
            l_seg.backward()
            opt_seg.step()

            # residuals from the current theta (no gradient into theta)
            with torch.no_grad():
                y0b = degraded[idx] if degraded is not None else seg_model(xb)
            cond = ConditioningBundle(image=xb, initial_mask=y0b)
            l_diff = diffusion_loss_batch(predictor, yb - y0b, cond, schedule, draws)
            if not torch.isfinite(l_diff):
                raise NumericalError(f"non-finite diffusion loss at epoch {epoch}")
            if cfg.lambda_weight > 0:
                opt_diff.zero_grad()
                (cfg.lambda_weight * l_diff).backward()
                opt_diff.step()

            seg_losses.append(float(l_seg.detach()))
            diff_losses.append(float(l_diff.detach()))
        seg_model.eval()
        predictor.eval()

        mean_seg = sum(seg_losses) / len(seg_losses)
        mean_diff = sum(diff_losses) / len(diff_losses)
        history.append(
            {
                "stage": "joint",
                "epoch": epoch,
                "l_seg": mean_seg,
                "l_diff": mean_diff,
                "l_total": mean_seg + cfg.lambda_weight * mean_diff,
            }
        )

    ckpt = Checkpoint(
        kind="joint",
        config=cfg,
        seg_state=state_to_numpy(seg_model),
        diff_state=state_to_numpy(predictor),
        seg_opt=adam_state_to_numpy(opt_seg, seg_model),
        diff_opt=adam_state_to_numpy(opt_diff, predictor),
        history=history,
    )
    if cfg.out_dir:
        save_checkpoint(ckpt, _ckpt_path(cfg, "joint"))
        _append_history(cfg.out_dir, history)
    return ckpt


# ---------------------------------------------------------------------------
# refinement evaluation


@dataclass
class RefineReport:
    split: str
    steps: int
    baseline: AggregateReport
    refined: AggregateReport
    refine_seconds: float
    per_case: list  # (case_id, baseline CaseMetrics, refined CaseMetrics)


def binarize(mask: torch.Tensor | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    arr = mask.numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    return (arr > threshold).astype(np.float32)


def evaluate_refinement(
    cfg: ExperimentConfig,
    seg_model: SegmentationModel,
    predictor: NoisePredictor,
    cases: list[PhantomCase],
    split: str,
    steps: int,
) -> RefineReport:
    """Refine every case's baseline and score both against ground truth."""
    if not cases:
        raise DataError(f"split '{split}' is empty")
    schedule = schedule_for(cfg)
    y0 = baseline_masks(cfg, seg_model, cases)

    refined = []
    seconds = 0.0
    for i, case in enumerate(cases):
        x = torch.from_numpy(case.volume)
        rng = torch.Generator().manual_seed(derive_seed(cfg.seed, f"refine/{split}/{case.id}"))
        t0 = time.perf_counter()
        out = refine(y0[i], x, predictor, schedule, steps, rng, cfg.diff.reverse_mean)
        seconds += time.perf_counter() - t0
        refined.append(out)

    gt = [c.mask[0] for c in cases]
    ids = [c.id for c in cases]
    base_report = evaluate_cases([binarize(y0[i])[0] for i in range(len(cases))], gt, ids)
    ref_report = evaluate_cases([binarize(r)[0] for r in refined], gt, ids)
    per_case = [
        (case_id, bm, rm)
        for (case_id, bm), (_, rm) in zip(base_report.per_case, ref_report.per_case)
    ]
    return RefineReport(
        split=split,
        steps=steps,
        baseline=base_report,
        refined=ref_report,
        refine_seconds=seconds,
        per_case=per_case,
    )


def write_refine_csv(report: RefineReport, path) -> None:
    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(
            ["case_id", "baseline_dsc", "baseline_hd95", "baseline_vs", "refined_dsc", "refined_hd95", "refined_vs"]
        )
        for case_id, bm, rm in report.per_case:
            w.writerow([case_id, fmt(bm.dsc), fmt(bm.hd95), fmt(bm.vs), fmt(rm.dsc), fmt(rm.hd95), fmt(rm.vs)])
        w.writerow(
            [
                "mean",
                fmt(report.baseline.dsc_mean),
                fmt(report.baseline.hd95_mean),
                fmt(report.baseline.vs_mean),
                fmt(report.refined.dsc_mean),
                fmt(report.refined.hd95_mean),
                fmt(report.refined.vs_mean),
            ]
        )


def run_refine_eval(cfg: ExperimentConfig, seg_ckpt: Checkpoint, diff_ckpt: Checkpoint, split: str) -> RefineReport:
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    cases = load_splits(cfg)[split]
    if not cases:
        raise DataError(f"split '{split}' is empty")
    seg_model = rebuild_seg_model(seg_ckpt, cases)
    predictor = rebuild_predictor(diff_ckpt, cases)
    report = evaluate_refinement(cfg, seg_model, predictor, cases, split, cfg.diff.inference_steps)
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        write_refine_csv(report, Path(cfg.out_dir) / "metrics.csv")
    return report


# ---------------------------------------------------------------------------
# ablations


ABLATION_BASE_ARMS = ("full", "no_diffusion", "no_residual_conditioning")


@dataclass
class AblationRow:
    arm: str
    dsc: float
    hd95: float | None
    vs: float
    seconds: float
    steps: int | None


def _ensure_checkpoints(cfg: ExperimentConfig) -> tuple[Checkpoint, Checkpoint, Checkpoint]:
    """Load seg/diff/no-conditioning checkpoints, training whichever is missing."""
    from .checkpoint import load_checkpoint

    seg_path = _ckpt_path(cfg, "seg")
    seg_ckpt = load_checkpoint(seg_path) if seg_path.exists() else run_train_seg(cfg)

    diff_path = _ckpt_path(cfg, "diff")
    diff_ckpt = load_checkpoint(diff_path) if diff_path.exists() else run_train_diff(cfg, seg_ckpt)

    nocond_cfg = dataclasses.replace(cfg, diff=dataclasses.replace(cfg.diff, condition_on_mask=False))
    nocond_path = _ckpt_path(cfg, "diff_nocond")
    if nocond_path.exists():
        nocond_ckpt = load_checkpoint(nocond_path)
    else:
        nocond_ckpt = run_train_diff(dataclasses.replace(nocond_cfg, out_dir=""), seg_ckpt)
        if cfg.out_dir:
            save_checkpoint(nocond_ckpt, nocond_path)
    return seg_ckpt, diff_ckpt, nocond_ckpt


def run_ablation(cfg: ExperimentConfig, split: str = "val") -> list[AblationRow]:
    """One row per arm: full, no-diffusion, no-residual-conditioning, step sweep."""
    seg_ckpt, diff_ckpt, nocond_ckpt = _ensure_checkpoints(cfg)
    cases = load_splits(cfg)[split]
    if not cases:
        raise DataError(f"split '{split}' is empty")

    seg_model = rebuild_seg_model(seg_ckpt, cases)
    predictor = rebuild_predictor(diff_ckpt, cases)
    nocond_predictor = rebuild_predictor(nocond_ckpt, cases)

    rows = []
    full = evaluate_refinement(cfg, seg_model, predictor, cases, f"{split}/full", cfg.diff.inference_steps)
    rows.append(
        AblationRow(
            "full",
            full.refined.dsc_mean,
            full.refined.hd95_mean,
            full.refined.vs_mean,
            full.refine_seconds,
            cfg.diff.inference_steps,
        )
    )
    rows.append(
        AblationRow("no_diffusion", full.baseline.dsc_mean, full.baseline.hd95_mean, full.baseline.vs_mean, 0.0, None)
    )
    nocond_cfg = nocond_ckpt.config
    nocond = evaluate_refinement(
        nocond_cfg, seg_model, nocond_predictor, cases, f"{split}/nocond", nocond_cfg.diff.inference_steps
    )
    rows.append(
        AblationRow(
            "no_residual_conditioning",
            nocond.refined.dsc_mean,
            nocond.refined.hd95_mean,
            nocond.refined.vs_mean,
            nocond.refine_seconds,
            nocond_cfg.diff.inference_steps,
        )
    )
    for steps in cfg.ablation_steps:
        rep = evaluate_refinement(cfg, seg_model, predictor, cases, f"{split}/steps_{steps}", steps)
        rows.append(
            AblationRow(
                f"steps_{steps}", rep.refined.dsc_mean, rep.refined.hd95_mean, rep.refined.vs_mean, rep.refine_seconds, steps
            )
        )

    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out_dir) / "ablation.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["arm", "dsc", "hd95", "vs", "inference_seconds", "steps"])
            for r in rows:
                w.writerow(
                    [
                        r.arm,
                        f"{r.dsc:.6f}",
                        "" if r.hd95 is None else f"{r.hd95:.6f}",
                        f"{r.vs:.6f}",
                        f"{r.seconds:.4f}",
                        "" if r.steps is None else r.steps,
                    ]
                )
    return rows
