"""Report emission: summary table (markdown + CSV) and diagnostic plots."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

REPORT_COLUMNS = ("Method", "DSC (%)", "HD95 (mm)", "VS (%)")


@dataclass
class ReportRow:
    method: str
    dsc: float              # fraction in [0, 1]
    hd95: float | None      # physical units
    vs: float                # fraction in [0, 1]


def format_row(row: ReportRow) -> tuple:
    hd = "-" if row.hd95 is None else f"{row.hd95:.2f}"
    return (row.method, f"{row.dsc * 100:.1f}", hd, f"{row.vs * 100:.1f}")


def emit_report(
    rows: list[ReportRow],
    out_dir,
    history: list | None = None,
    scatter: list | None = None,
) -> dict:
    """Write report.md and report.csv, plus plots when inputs are available.

    `history` holds per-epoch dicts with stage/epoch/loss fields; `scatter`
    holds (baseline_dsc, refined_dsc) pairs.  Raises before creating any
    file when there is nothing to report.
    """
    if not rows:
        raise ValueError("no metrics to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow(format_row(row))

    lines = [
        "| " + " | ".join(REPORT_COLUMNS) + " |",
        "|" + "---|" * len(REPORT_COLUMNS),
    ]
    for row in rows:
        lines.append("| " + " | ".join(format_row(row)) + " |")
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    written = {"report_md": out / "report.md", "report_csv": out / "report.csv"}
    plots = out / "plots"
    if history:
        plots.mkdir(exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 4))
        stages = sorted({h["stage"] for h in history})
        for stage in stages:
            rows_s = [h for h in history if h["stage"] == stage]
            for key in ("l_seg", "l_diff", "l_total"):
                vals = [h[key] for h in rows_s if h.get(key) not in (None, "")]
                if vals:
                    ax.plot(range(len(vals)), [float(v) for v in vals], label=f"{stage}:{key}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(plots / "loss_curves.png", dpi=110)
        plt.close(fig)
        written["loss_curves"] = plots / "loss_curves.png"

    if scatter:
        plots.mkdir(exist_ok=True)
        base = [b for b, _ in scatter]
        ref = [r for _, r in scatter]
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.scatter(base, ref, s=14, alpha=0.7)
        lo = min(base + ref + [0.0])
        ax.plot([lo, 1.0], [lo, 1.0], "k--", linewidth=0.8)
        ax.set_xlabel("baseline DSC")
        ax.set_ylabel("refined DSC")
        fig.tight_layout()
        fig.savefig(plots / "per_case_scatter.png", dpi=110)
        plt.close(fig)
        written["scatter"] = plots / "per_case_scatter.png"
    return written
