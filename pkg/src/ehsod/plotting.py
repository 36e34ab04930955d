"""Report figures and tables written next to the JSON outputs."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .engine.evaluation import EvalReport  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def write_ap_csv(report: EvalReport, path: str | os.PathLike) -> None:
    """One row per scored class plus a final ``mean`` row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "ap50", "ap50_95"])
        for name in report.ap50:
            w.writerow([name, f"{report.ap50[name]:.6f}", f"{report.ap[name]:.6f}"])
        w.writerow(["mean", f"{report.map50:.6f}", f"{report.map_coco:.6f}"])


def plot_pr_curves(report: EvalReport, path: str | os.PathLike) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for name, curve in report.curves.items():
            r = np.concatenate([[0.0], curve.recall])
            p = np.concatenate([[1.0], curve.precision])
            ax.plot(r, p, drawstyle="steps-post", label=f"{name} (AP50 {report.ap50[name]:.3f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"IoU 0.5, mAP {report.map50:.3f}")
        if report.curves:
            ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_loss_curve(history: Sequence[dict], path: str | os.PathLike, window: int = 20) -> None:
    """Per-iteration total loss with a trailing moving average."""
    it = np.array([r["iter"] for r in history])
    loss = np.array([r["total"] for r in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(it, loss, lw=0.6, alpha=0.5, label="iteration")
        if len(loss) >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(it[window - 1:], smooth, lw=1.5, label=f"mean of {window}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_cam(image: np.ndarray, cams: Sequence[np.ndarray], strides: Sequence[int],
             categories: Sequence[str], path: str | os.PathLike) -> None:
    """Grid of per-level, per-class CAM probabilities over the image.

    ``cams`` holds one ``(C, h, w)`` probability array per pyramid level; the
    maps may cover a padded canvas larger than the image.
    """
    h, w = image.shape[:2]
    n_lv, C = len(cams), len(categories)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(n_lv, C + 1, figsize=(1.6 * (C + 1), 1.6 * n_lv), squeeze=False)
        for lv, (cam, stride) in enumerate(zip(cams, strides)):
            axes[lv, 0].imshow(image)
            axes[lv, 0].set_ylabel(f"level {lv + 1}")
            for c in range(C):
                ax = axes[lv, c + 1]
                ax.imshow(image)
                ax.imshow(cam[c], cmap="jet", alpha=0.5, vmin=0, vmax=1,
                          extent=(0, cam.shape[2] * stride, cam.shape[1] * stride, 0),
                          interpolation="nearest")
                ax.set_xlim(0, w)
                ax.set_ylim(h, 0)
                if lv == 0:
                    ax.set_title(categories[c])
        for ax in axes.flat:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_report(report: EvalReport, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write ``report.json``, ``ap.csv`` and ``pr_curves.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "csv": out / "ap.csv", "pr": out / "pr_curves.png"}
    paths["report"].write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    write_ap_csv(report, paths["csv"])
    plot_pr_curves(report, paths["pr"])
    return {k: str(v) for k, v in paths.items()}
