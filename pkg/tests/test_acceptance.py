"""End-to-end acceptance suite.

Every criterion runs at its stated tolerance and prints one PASS/FAIL
line.  Expensive artifacts (the desk-scale phantom corpus and trained
checkpoints) are session-scoped fixtures shared across criteria, and each
criterion's runtime budget covers the work attributed to it.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

from conftest import tiny_config
from test_metrics import dice_oracle, hd95_oracle, random_mask_pair, vs_oracle

from residiff.config import DiffTrainConfig, ExperimentConfig, SegTrainConfig
from residiff.checkpoint import load_checkpoint
from residiff.data import generate_phantoms, read_dataset, split_dataset, write_dataset
from residiff.diffusion import ConditioningBundle, denoise_step, forward_diffuse
from residiff.metrics import dice, evaluate_cases, hd95, volumetric_similarity
from residiff.pipeline import (
    binarize,
    evaluate_refinement,
    load_splits,
    predict_batched,
    rebuild_predictor,
    rebuild_seg_model,
    run_ablation,
    run_joint_finetune,
    run_refine_eval,
    run_train_diff,
    run_train_seg,
    stack_cases,
)
from residiff.schedule import alpha_bar_at, linear_schedule
from residiff.segmentation import dice_ce_loss

DESK_SEED = 1001


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n[ACCEPTANCE] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared artifacts


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_data")
    cases = generate_phantoms(250, 64, seed=DESK_SEED, noise_sigma=0.3)
    manifest = split_dataset(cases, (0.8, 0.1, 0.1), seed=DESK_SEED)
    write_dataset(manifest, cases, root)
    return root


@pytest.fixture(scope="session")
def desk_cfg(desk_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_out")
    return ExperimentConfig(
        seed=DESK_SEED,
        dataset_dir=str(desk_dataset),
        out_dir=str(out),
        lambda_weight=0.5,
        finetune_epochs=3,
        seg=SegTrainConfig(depth=3, base_width=16, epochs=30, lr=1e-4, batch_size=8),
        diff=DiffTrainConfig(
            T=100, beta_start=1e-4, beta_end=0.02, depth=3, base_width=16,
            epochs=20, lr=1e-4, batch_size=8, inference_steps=50,
        ),
        ablation_steps=(25, 50, 100),
    )


@pytest.fixture(scope="session")
def seg_ckpt_timed(desk_cfg):
    t0 = time.perf_counter()
    ckpt = run_train_seg(desk_cfg)
    return ckpt, time.perf_counter() - t0


@pytest.fixture(scope="session")
def diff_model_ckpt_timed(desk_cfg, seg_ckpt_timed):
    seg_ckpt, _ = seg_ckpt_timed
    t0 = time.perf_counter()
    ckpt = run_train_diff(desk_cfg, seg_ckpt)
    return ckpt, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. schedule algebra


def test_acceptance_1_schedule_algebra():
    t0 = time.perf_counter()
    s = linear_schedule(1000, 1e-4, 0.02)
    running = 1.0
    max_rel = 0.0
    for t in range(1, 1001):
        running *= 1.0 - float(s.betas[t - 1])
        max_rel = max(max_rel, abs(float(s.alpha_bars[t - 1]) - running) / abs(running))
    elapsed = time.perf_counter() - t0
    ok = s.betas[0] == 1e-4 and s.betas[-1] == 0.02 and max_rel <= 1e-12 and elapsed < 1.0
    report("1 schedule algebra", ok, f"max rel err {max_rel:.2e}, endpoints exact, {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 2. forward-marginal composition


def test_acceptance_2_forward_marginal():
    t0 = time.perf_counter()
    s = linear_schedule(1000, 1e-4, 0.02)
    k, n = 50, 10_000
    g = torch.Generator().manual_seed(2024)
    e = torch.full((n,), 0.7, dtype=torch.float64)
    for t in range(1, k + 1):
        beta = float(s.betas[t - 1])
        e = math.sqrt(1 - beta) * e + math.sqrt(beta) * torch.randn(n, generator=g, dtype=torch.float64)
    abar = alpha_bar_at(s, k)
    mean, var = float(e.mean()), float(e.var())
    se = float(e.std()) / math.sqrt(n)
    elapsed = time.perf_counter() - t0
    mean_ok = abs(mean - math.sqrt(abar) * 0.7) < 3 * se
    var_ok = abs(var - (1 - abar)) < 0.05 * (1 - abar)
    ok = mean_ok and var_ok and elapsed < 10.0
    report(
        "2 forward-marginal composition",
        ok,
        f"mean {mean:.5f} vs {math.sqrt(abar)*0.7:.5f} (3se {3*se:.5f}), "
        f"var {var:.5f} vs {1-abar:.5f}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# 3. Gaussian sampler oracle


def test_acceptance_3_gaussian_sampler_oracle():
    t0 = time.perf_counter()
    T, m, s_dev, n = 100, 0.3, 0.2, 10_000
    sched = linear_schedule(T, 1e-4, 5e-4)
    s2 = s_dev * s_dev

    def optimal(e_t, t, cond):
        abar = alpha_bar_at(sched, t)
        denom = abar * s2 + 1.0 - abar
        e0_post = (math.sqrt(abar) * s2 * e_t + (1.0 - abar) * m) / denom
        return (e_t - math.sqrt(abar) * e0_post) / math.sqrt(1.0 - abar)

    g = torch.Generator().manual_seed(0)
    e0 = m + s_dev * torch.randn(n, dtype=torch.float64, generator=g)
    e = forward_diffuse(e0, T, torch.randn(n, dtype=torch.float64, generator=g), sched)
    cond = ConditioningBundle(torch.zeros(1, 1, 1), torch.zeros(1, 1, 1))
    for t in range(T, 0, -1):
        e = denoise_step(e, t, optimal, cond, sched, g)

    mean, var = float(e.mean()), float(e.var())
    se = float(e.std()) / math.sqrt(n)
    elapsed = time.perf_counter() - t0
    mean_ok = abs(mean - m) < 3 * se
    var_ok = abs(var - s2) < 0.05 * s2
    ok = mean_ok and var_ok and elapsed < 60.0
    report(
        "3 Gaussian sampler oracle",
        ok,
        f"mean {mean:.5f} vs {m} (3se {3*se:.5f}), var {var:.5f} vs {s2} "
        f"(rel {100*(var-s2)/s2:+.2f}%), {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# 4. loss gradient check


def _finite_difference_grad(p, g, h=1e-5):
    grad = torch.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(dice_ce_loss(p, g))
        flat[i] = orig - h
        down = float(dice_ce_loss(p, g))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def test_acceptance_4_gradient_check():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = torch.from_numpy(rng.uniform(0.05, 0.95, size=(1, 8, 8)))
        g = torch.from_numpy((rng.random((1, 8, 8)) < 0.5).astype(np.float64))
        p_var = p.clone().requires_grad_(True)
        dice_ce_loss(p_var, g).backward()
        fd = _finite_difference_grad(p.clone(), g)
        denom = torch.clamp(torch.maximum(p_var.grad.abs(), fd.abs()), min=1e-8)
        worst = max(worst, float(((p_var.grad - fd).abs() / denom).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    report("4 loss gradient check", ok, f"max elementwise rel err {worst:.2e} over 20 pairs, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 5. metric oracle equivalence


def test_acceptance_5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    exact = True
    for _ in range(100):
        a, b = random_mask_pair(rng, hw=16)
        exact &= dice(a, b) == dice_oracle(a, b)
        exact &= volumetric_similarity(a, b) == vs_oracle(a, b)
        exact &= hd95(a, b) == hd95_oracle(a, b)

    fix_a = np.zeros((8, 8), dtype=np.float32)
    fix_b = np.zeros((8, 8), dtype=np.float32)
    fix_a[4, 1] = 1
    fix_b[4, 4] = 1
    exact &= hd95(fix_a, fix_b) == 3.0
    elapsed = time.perf_counter() - t0
    ok = exact and elapsed < 30.0
    report("5 metric oracle equivalence", ok, f"100 random pairs exact + hand fixture, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 6. segmentation smoke


def test_acceptance_6_segmentation_smoke(desk_cfg, seg_ckpt_timed):
    seg_ckpt, train_seconds = seg_ckpt_timed
    val = load_splits(desk_cfg)["val"]
    model = rebuild_seg_model(seg_ckpt, val)
    volumes, _ = stack_cases(val)
    preds = predict_batched(model, volumes)
    rep = evaluate_cases([binarize(preds[i])[0] for i in range(len(val))], [c.mask[0] for c in val])
    ok = rep.dsc_mean >= 0.85 and train_seconds < 900.0
    report(
        "6 segmentation smoke",
        ok,
        f"held-out mean Dice {rep.dsc_mean:.4f} (needs >= 0.85), train {train_seconds:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7. refinement efficacy


def test_acceptance_7_refinement_efficacy(desk_cfg, seg_ckpt_timed, diff_model_ckpt_timed):
    seg_ckpt, _ = seg_ckpt_timed
    diff_model, model_train_s = diff_model_ckpt_timed
    t0 = time.perf_counter()

    # stress arm: degraded truths serve as baselines at train and eval time
    stress_cfg = dataclasses.replace(
        desk_cfg, out_dir="", diff=dataclasses.replace(desk_cfg.diff, baseline="degraded")
    )
    stress_ckpt = run_train_diff(stress_cfg, seg_ckpt)
    test_cases = load_splits(desk_cfg)["test"]
    seg_model = rebuild_seg_model(seg_ckpt, test_cases)
    stress_rep = evaluate_refinement(
        stress_cfg, seg_model, rebuild_predictor(stress_ckpt, test_cases), test_cases, "test-stress", 50
    )
    stress_gain = stress_rep.refined.dsc_mean - stress_rep.baseline.dsc_mean

    # model arm: refinement must not regress a good baseline
    model_rep = evaluate_refinement(
        desk_cfg, seg_model, rebuild_predictor(diff_model, test_cases), test_cases, "test-model", 50
    )
    model_delta = model_rep.refined.dsc_mean - model_rep.baseline.dsc_mean

    # short joint fine-tune must not regress the refined result
    joint = run_joint_finetune(desk_cfg, seg_ckpt, diff_model)
    ft_rep = evaluate_refinement(
        desk_cfg,
        rebuild_seg_model(joint, test_cases),
        rebuild_predictor(joint, test_cases),
        test_cases,
        "test-ft",
        50,
    )
    elapsed = time.perf_counter() - t0 + model_train_s

    stress_ok = stress_gain >= 0.02
    model_ok = model_delta >= -0.005
    ft_ok = ft_rep.refined.dsc_mean >= model_rep.refined.dsc_mean - 0.01
    ok = stress_ok and model_ok and ft_ok and elapsed < 1800.0
    report(
        "7 refinement efficacy",
        ok,
        f"stress {stress_rep.baseline.dsc_mean:.4f}->{stress_rep.refined.dsc_mean:.4f} "
        f"(gain {stress_gain:+.4f}, needs >= +0.02); "
        f"model path delta {model_delta:+.4f} (needs >= -0.005); "
        f"after finetune {ft_rep.refined.dsc_mean:.4f} vs {model_rep.refined.dsc_mean:.4f} - 0.01; "
        f"{elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 8. ablation harness structure


def test_acceptance_8_ablation_structure(desk_cfg, seg_ckpt_timed, diff_model_ckpt_timed):
    rows = run_ablation(desk_cfg)
    arms = [r.arm for r in rows]
    expected_arms = ["full", "no_diffusion", "no_residual_conditioning", "steps_25", "steps_50", "steps_100"]

    seg_ckpt, _ = seg_ckpt_timed
    diff_ckpt, _ = diff_model_ckpt_timed
    base = run_refine_eval(desk_cfg, seg_ckpt, diff_ckpt, "val")
    nd = rows[arms.index("no_diffusion")]
    baseline_match = (
        nd.dsc == base.baseline.dsc_mean and nd.hd95 == base.baseline.hd95_mean and nd.vs == base.baseline.vs_mean
    )

    times = [rows[arms.index(f"steps_{s}")].seconds for s in (25, 50, 100)]
    monotone = times[0] < times[1] < times[2]

    ok = arms == expected_arms and baseline_match and monotone
    report(
        "8 ablation harness",
        ok,
        f"arms {arms}; no-diffusion equals baseline: {baseline_match}; "
        f"times {[f'{t:.1f}s' for t in times]} monotone: {monotone}",
    )


# ---------------------------------------------------------------------------
# 9. determinism and persistence


def test_acceptance_9_determinism_and_persistence(tmp_path):
    # dataset write/read round trip, byte-exact
    cases = generate_phantoms(24, 32, seed=77, noise_sigma=0.3)
    manifest = split_dataset(cases, (0.75, 0.125, 0.125), seed=77)
    write_dataset(manifest, cases, tmp_path / "d1")
    _, cases_back = read_dataset(tmp_path / "d1")
    bytes_ok = all(
        a.volume.tobytes() == b.volume.tobytes() and a.mask.tobytes() == b.mask.tobytes()
        for a, b in zip(cases, cases_back)
    )
    write_dataset(manifest, cases_back, tmp_path / "d2")
    for entry in manifest.cases:
        for rel in (entry.img, entry.msk):
            bytes_ok &= (tmp_path / "d1" / rel).read_bytes() == (tmp_path / "d2" / rel).read_bytes()

    # two runs with one top-level seed agree within 1e-6
    summaries = []
    for sub in ("runA", "runB"):
        cfg = tiny_config(tmp_path / "d1", tmp_path / sub, seed=31)
        seg_ckpt = run_train_seg(cfg)
        diff_ckpt = run_train_diff(cfg, seg_ckpt)
        rep = run_refine_eval(cfg, seg_ckpt, diff_ckpt, "test")
        summaries.append(
            (
                rep.baseline.dsc_mean, rep.refined.dsc_mean,
                rep.baseline.vs_mean, rep.refined.vs_mean,
                rep.baseline.hd95_mean or 0.0, rep.refined.hd95_mean or 0.0,
            )
        )
    runs_ok = all(abs(x - y) < 1e-6 for x, y in zip(*summaries))

    # checkpoint save/load round trip reproduces evaluation within 1e-6
    cfg = tiny_config(tmp_path / "d1", tmp_path / "runA", seed=31)
    seg_loaded = load_checkpoint(tmp_path / "runA" / "checkpoints" / "seg.ckpt")
    diff_loaded = load_checkpoint(tmp_path / "runA" / "checkpoints" / "diff.ckpt")
    rep2 = run_refine_eval(dataclasses.replace(cfg, out_dir=""), seg_loaded, diff_loaded, "test")
    ckpt_ok = (
        abs(rep2.refined.dsc_mean - summaries[0][1]) < 1e-6
        and abs(rep2.baseline.dsc_mean - summaries[0][0]) < 1e-6
    )

    ok = bytes_ok and runs_ok and ckpt_ok
    report(
        "9 determinism & persistence",
        ok,
        f"dataset byte-exact: {bytes_ok}; same-seed summaries within 1e-6: {runs_ok}; "
        f"checkpoint round-trip within 1e-6: {ckpt_ok}",
    )
