"""Figures written next to the tab-separated run outputs (Agg backend, PNG)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .regions import NmsBenchReport  # noqa: E402
from .training import smoothed  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
}
# keep PNG bytes independent of the matplotlib build
_PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return Path(path)


def plot_pretrain_curves(rows: Sequence[dict], path: str | Path, window: int = 20) -> Path:
    """Raw (faint) and smoothed masked-token and contrastive losses, plus batch accuracy."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10.0, 4.0))
        steps = [r["step"] for r in rows]
        for key, color, label in (("mtl", "tab:blue", "masked token"), ("cl3", "tab:orange", "3-way contrastive")):
            values = [r[key] for r in rows]
            ax_loss.plot(steps, values, color=color, alpha=0.25, linewidth=0.8)
            if rows:
                ax_loss.plot(steps, smoothed(values, window), color=color, label=label)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.legend()
        acc = [r["cl3_acc"] for r in rows]
        if rows:
            ax_acc.plot(steps, smoothed(acc, window), color="tab:green")
        ax_acc.set_ylim(0.0, 1.0)
        ax_acc.set_xlabel("step")
        ax_acc.set_ylabel(f"contrastive batch accuracy ({window}-step mean)")
        return _save(fig, path)


def plot_finetune_curve(rows: Sequence[dict], path: str | Path, task: str, window: int = 20) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = [r["step"] for r in rows]
        loss = [r["loss"] for r in rows]
        ax.plot(steps, loss, color="tab:blue", alpha=0.25, linewidth=0.8)
        if rows:
            ax.plot(steps, smoothed(loss, window), color="tab:blue", label=f"{task} loss")
            ax.legend()
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        return _save(fig, path)


def plot_nms_bench(report: NmsBenchReport, path: str | Path) -> Path:
    """Side-by-side bars: suppression passes (log scale) and seconds per trial."""
    with plt.rc_context(STYLE):
        fig, (ax_n, ax_t) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        labels = ["class-agnostic", "class-aware"]
        colors = ["tab:green", "tab:red"]
        ax_n.bar(labels, [report.agnostic_invocations, report.aware_invocations], color=colors)
        ax_n.set_yscale("log")
        ax_n.set_ylabel("suppression passes")
        ax_t.bar(labels, [report.agnostic_time, report.aware_time], color=colors)
        ax_t.set_ylabel("seconds per trial")
        fig.suptitle(f"{report.n_boxes} boxes, {report.n_classes} classes, {report.trials} trials")
        return _save(fig, path)
