"""Human-readable outputs: error overlays, shot curves, comparison tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

# confusion-class colors: (pred, gt) -> RGB
COLOR_TRUE_POSITIVE = (255, 255, 255)
COLOR_TRUE_NEGATIVE = (0, 0, 0)
COLOR_FALSE_POSITIVE = (255, 0, 0)
COLOR_FALSE_NEGATIVE = (0, 255, 0)


def render_error_overlay(pred_mask: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    """Color each pixel by its confusion class: white TP, black TN, red FP,
    green FN. Returns an H x W x 3 uint8 array."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    for name, m in (("pred", pred_mask), ("gt", gt_mask)):
        if not np.all(np.isin(np.unique(m), [0, 1])):
            raise ValueError(f"{name} mask must be binary")
    p = pred_mask.astype(bool)
    g = gt_mask.astype(bool)
    overlay = np.zeros(pred_mask.shape + (3,), dtype=np.uint8)
    overlay[p & g] = COLOR_TRUE_POSITIVE
    overlay[p & ~g] = COLOR_FALSE_POSITIVE
    overlay[~p & g] = COLOR_FALSE_NEGATIVE
    return overlay


def save_overlay(overlay: np.ndarray, path: Path) -> None:
    Image.fromarray(overlay).save(Path(path))


def render_shot_curves(reports: list, output_path: Path) -> Path:
    """One mean-IoU-vs-shots curve per method with a ±std band, averaged
    over targets; the plotted numbers are written as a CSV sidecar."""
    if not reports:
        raise ValueError("no reports to plot")
    output_path = Path(output_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = []
    for report in reports:
        shots = report.shots()
        means, stds = [], []
        for k in shots:
            vals = [v for t in report.targets() for v in report.cells[(t, k)]]
            means.append(100 * float(np.mean(vals)))
            stds.append(100 * float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
            rows.append([report.method, k, f"{means[-1]:.1f}", f"{stds[-1]:.1f}"])
        means = np.array(means)
        stds = np.array(stds)
        ax.plot(shots, means, marker="o", label=report.method)
        ax.fill_between(shots, means - stds, means + stds, alpha=0.2)
    all_shots = sorted({k for r in reports for k in r.shots()})
    ax.set_xticks(all_shots)
    ax.set_xlabel("shots")
    ax.set_ylabel("mean IoU (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(output_path)
    plt.close(fig)
    with open(output_path.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "shot", "mean_iou", "std_iou"])
        writer.writerows(rows)
    return output_path


def render_comparison_table(reports: list, output_path: Path) -> Path:
    """Markdown table: one block per target, one row per method, cells
    'mean±std' in percentage points with the best cell per column bold."""
    if not reports:
        raise ValueError("no reports to tabulate")
    shot_sets = {tuple(r.shots()) for r in reports}
    if len(shot_sets) != 1:
        raise ValueError(f"reports have inconsistent shot sets: {sorted(shot_sets)}")
    shots = list(shot_sets.pop())
    targets = sorted({t for r in reports for t in r.targets()})
    lines = []
    for target in targets:
        lines.append(f"## Target: {target}")
        lines.append("")
        header = "| Method | " + " | ".join(f"{k}-shot" for k in shots) + " |"
        lines.append(header)
        lines.append("|" + "---|" * (len(shots) + 1))
        rows = [r for r in reports if target in r.targets()]
        best = {k: max(r.mean(target, k) for r in rows) for k in shots}
        for r in rows:
            cells = []
            for k in shots:
                text = r.cell_text(target, k)
                if r.mean(target, k) == best[k]:
                    text = f"**{text}**"
                cells.append(text)
            lines.append(f"| {r.method} ({r.config_summary}) | " + " | ".join(cells) + " |")
        lines.append("")
    output_path = Path(output_path)
    output_path.write_text("\n".join(lines))
    return output_path
