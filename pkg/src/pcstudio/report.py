"""Report rendering: delimited output plus matplotlib figures on disk."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport


def render_report(report: EvalReport, out_dir: str, basename: str = "report") -> list[str]:
    """Write report.json, report.csv, and summary figures; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    json_path = os.path.join(out_dir, f"{basename}.json")
    with open(json_path, "w") as f:
        f.write(report.to_json())
    paths.append(json_path)

    csv_path = os.path.join(out_dir, f"{basename}.csv")
    with open(csv_path, "w") as f:
        f.write(report.to_csv())
    paths.append(csv_path)

    usable = [r for r in report.rows if r.error is None]
    if usable:
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(usable)), 4))
        idx = np.arange(len(usable))
        width = 0.38
        ax.bar(idx - width / 2, [r.cs for r in usable], width, label="identity (CS)")
        ax.bar(idx + width / 2, [r.ps for r in usable], width, label="prompt (PS)")
        ax.set_xticks(idx)
        ax.set_xticklabels([f"{r.subject_id[:8]}" for r in usable], rotation=45, ha="right")
        ax.set_ylabel("cosine similarity")
        ax.axhline(0.0, color="k", lw=0.5)
        ax.legend()
        fig.tight_layout()
        fig_path = os.path.join(out_dir, f"{basename}_scores.png")
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths.append(fig_path)

    return paths


def render_image_strip(images: list[np.ndarray], path: str, labels: list[str] | None = None) -> str:
    """Save a horizontal strip of images (e.g. a beta sweep or interpolation)."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6))
    if n == 1:
        axes = [axes]
    for i, (ax, img) in enumerate(zip(axes, images)):
        shown = np.asarray(img, dtype=np.float64)
        lo, hi = shown.min(), shown.max()
        if hi > lo:
            shown = (shown - lo) / (hi - lo)
        ax.imshow(np.clip(shown, 0, 1))
        ax.set_axis_off()
        if labels:
            ax.set_title(labels[i], fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
