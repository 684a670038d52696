"""Figures written next to the JSON/CSV outputs (Agg backend, files only)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_map_vs_iou(report, path, title: str = "") -> Path:
    """mAP at each tIoU threshold, with the per-class APs as thin lines."""
    thr = [float(t) for t in report.map_at]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, row in report.per_class_ap.items():
        ax.plot(thr, [100 * row[k] for k in report.map_at], lw=0.8, alpha=0.5, label=name)
    ax.plot(thr, [100 * v for v in report.map_at.values()], "k-o", lw=2, label="mAP")
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("AP (%)")
    ax.set_ylim(0, 100)
    avg = ", ".join(f"{k}: {100 * v:.1f}" for k, v in report.avg_map.items())
    ax.set_title(f"{title}\nAVG {avg}".strip(), fontsize=9)
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_loss_curve(log_lines, path) -> Path:
    """Every logged loss term against the step number (log scale)."""
    rows = [json.loads(line) if isinstance(line, str) else line for line in log_lines]
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        steps = [r["step"] for r in rows]
        for key in ("total", "mil_org", "mil_supp", "cas", "ml", "oppo", "norm"):
            vals = [r.get(key) for r in rows]
            if all(v is not None for v in vals):
                ax.plot(steps, np.maximum(vals, 1e-8), lw=2 if key == "total" else 1, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_localization(tracks: dict, proposals, gt_segments, path, title: str = "", top: int = 5) -> Path:
    """Attention tracks over time with ground truth and top proposals as bars."""
    fig, (ax, bx) = plt.subplots(2, 1, figsize=(8, 4.5), sharex=True,
                                 gridspec_kw={"height_ratios": [3, 1.4]})
    for name, track in tracks.items():
        ax.plot(np.arange(len(track)) + 0.5, track, lw=1.5 if name == "a_fused" else 0.9, label=name)
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("attention")
    ax.legend(fontsize=7, loc="upper right")
    ax.set_title(title, fontsize=9)
    for s, e, _ in gt_segments:
        bx.barh(1, e - s, left=s, height=0.6, color="tab:green")
    for p in list(proposals)[:top]:
        bx.barh(0, p["t_end"] - p["t_start"], left=p["t_start"], height=0.6, alpha=0.35, color="tab:red")
    bx.set_yticks([0, 1], ["proposals", "ground truth"])
    bx.set_xlabel("snippet")
    return _save(fig, path)
