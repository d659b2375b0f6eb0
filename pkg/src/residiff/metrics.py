"""Segmentation evaluation metrics: Dice, 95th-percentile Hausdorff, volume similarity.

Conventions (these change the numbers, so they are fixed here):
  - boundaries are foreground pixels with at least one background
    4-neighbor, where the image border counts as background;
  - HD95 pools both directed boundary-distance sets and takes the
    nearest-rank 95th percentile (the ceil(0.95 n)-th smallest);
  - when both masks are empty: dice = 1, vs = 1, hd95 = 0; when exactly
    one is empty: dice = 0, vs = 0, hd95 is undefined (None) and the case
    is excluded from HD95 aggregates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


@dataclass
class CaseMetrics:
    dsc: float
    hd95: float | None
    vs: float


@dataclass
class AggregateReport:
    per_case: list            # (case_id, CaseMetrics) pairs
    dsc_mean: float
    dsc_std: float
    vs_mean: float
    vs_std: float
    hd95_mean: float | None   # None when every case was excluded
    hd95_std: float | None
    n_cases: int
    n_hd95_excluded: int


def _check_mask(name: str, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must be exactly binary")
    return m.astype(bool)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = _check_mask("a", a)
    b = _check_mask("b", b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap coefficient 2|A.B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _check_pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def volumetric_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """1 - ||A| - |B|| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _check_pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Indices (K, 2) of foreground pixels with a background 4-neighbor.

    Pixels touching the image border count as boundary.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def hd95(a: np.ndarray, b: np.ndarray, spacing: tuple = (1.0, 1.0)) -> float | None:
    """Nearest-rank 95th percentile of pooled boundary-to-boundary distances.

    Distances are Euclidean after scaling pixel indices by `spacing`.
    Returns 0.0 when both masks are empty and None when exactly one is.
    """
    a, b = _check_pair(a, b)
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return None

    scale = np.asarray(spacing, dtype=np.float64)
    pa = boundary_pixels(a).astype(np.float64) * scale
    pb = boundary_pixels(b).astype(np.float64) * scale
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    rank = math.ceil(0.95 * pooled.size)
    return float(pooled[rank - 1])


def evaluate_cases(
    pred_masks: list, gt_masks: list, ids: list | None = None, spacing: tuple = (1.0, 1.0)
) -> AggregateReport:
    """Per-case metrics plus mean/std aggregates over a list of mask pairs."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError(f"length mismatch: {len(pred_masks)} predictions vs {len(gt_masks)} references")
    if ids is None:
        ids = [f"case_{i:04d}" for i in range(len(pred_masks))]
    if len(ids) != len(pred_masks):
        raise ValueError("ids length must match the mask lists")

    per_case = []
    for case_id, p, g in zip(ids, pred_masks, gt_masks):
        m = CaseMetrics(dsc=dice(p, g), hd95=hd95(p, g, spacing), vs=volumetric_similarity(p, g))
        if m.hd95 is None:
            log.warning("case '%s': empty mask, excluded from HD95 aggregate", case_id)
        per_case.append((case_id, m))

    dscs = np.array([m.dsc for _, m in per_case])
    vss = np.array([m.vs for _, m in per_case])
    hds = np.array([m.hd95 for _, m in per_case if m.hd95 is not None], dtype=np.float64)
    return AggregateReport(
        per_case=per_case,
        dsc_mean=float(dscs.mean()),
        dsc_std=float(dscs.std()),
        vs_mean=float(vss.mean()),
        vs_std=float(vss.std()),
        hd95_mean=float(hds.mean()) if hds.size else None,
        hd95_std=float(hds.std()) if hds.size else None,
        n_cases=len(per_case),
        n_hd95_excluded=len(per_case) - hds.size,
    )


def write_metrics_csv(report: AggregateReport, path) -> None:
    """Per-case rows (case_id, dsc, hd95, vs) followed by a summary row."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "dsc", "hd95", "vs"])
        for case_id, m in report.per_case:
            w.writerow([case_id, f"{m.dsc:.6f}", "" if m.hd95 is None else f"{m.hd95:.6f}", f"{m.vs:.6f}"])
        hd_mean = "" if report.hd95_mean is None else f"{report.hd95_mean:.6f}"
        w.writerow(["mean", f"{report.dsc_mean:.6f}", hd_mean, f"{report.vs_mean:.6f}"])
