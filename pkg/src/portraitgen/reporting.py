"""Figures and delimited outputs for training runs and evaluation reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curve(path, history, title: str, smooth: int = 25) -> None:
    """Loss-curve PNG. history: list of floats or list of dicts of components."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    if history and isinstance(history[0], dict):
        keys = [k for k in history[0] if k != "step" and
                isinstance(history[0][k], (int, float))]
        for key in keys:
            ax.plot([h[key] for h in history], label=key, alpha=0.8)
        ax.legend(fontsize=8)
    else:
        vals = np.asarray(history, dtype=np.float64)
        ax.plot(vals, alpha=0.35, label="loss")
        if len(vals) > smooth:
            kernel = np.ones(smooth) / smooth
            ax.plot(np.arange(smooth - 1, len(vals)),
                    np.convolve(vals, kernel, mode="valid"), label=f"mean({smooth})")
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_history_csv(path, history) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if history and isinstance(history[0], dict):
            writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
            writer.writeheader()
            writer.writerows(history)
        else:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(enumerate(history))


def save_image(path, image: np.ndarray) -> None:
    from PIL import Image
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(Path(path))


def save_comparison_figure(path, pairs: list[tuple[str, np.ndarray]]) -> None:
    """Side-by-side image panel, one column per (label, image)."""
    fig, axes = plt.subplots(1, len(pairs), figsize=(3 * len(pairs), 3.2))
    if len(pairs) == 1:
        axes = [axes]
    for ax, (label, img) in zip(axes, pairs):
        ax.imshow(np.clip(img, 0.0, 1.0))
        ax.set_title(label, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)


def save_metrics_report(out_dir, metrics: dict, name: str = "metrics") -> dict:
    """Write metrics as JSON + CSV + a bar-chart PNG; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(metrics):
            writer.writerow([key, metrics[key]])
    fig_path = out_dir / f"{name}.png"
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(metrics), 4))
    keys = sorted(metrics)
    vals = [metrics[k] for k in keys]
    ax.bar(range(len(keys)), vals, color="#4878b0")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
    for i, v in enumerate(vals):
        ax.annotate(f"{v:.3g}", (i, v), ha="center", va="bottom", fontsize=8)
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)
    return {"json": str(json_path), "csv": str(csv_path), "figure": str(fig_path)}


def save_landmark_figure(path, pred: np.ndarray, gt: np.ndarray | None = None,
                         frame: int = 0) -> None:
    """Scatter of one landmark frame (x vs y, image convention y down)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(pred[frame, :, 0], pred[frame, :, 1], s=12, label="predicted")
    if gt is not None:
        ax.scatter(gt[frame, :, 0], gt[frame, :, 1], s=12, marker="x",
                   label="reference")
    ax.invert_yaxis()
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.set_title(f"landmarks, frame {frame}")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)
