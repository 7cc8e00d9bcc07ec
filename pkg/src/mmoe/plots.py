"""Figures for the sweep reports, written next to their CSV files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "savefig.dpi": 150,
    "svg.hashsalt": "mmoe",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def threshold_figure(rows, path, baseline_top1=None, moe_params=None):
    """Accuracy and expected parameter load against T (left), false-stop rate (right)."""
    t = [r.threshold for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax, ax_fs) = plt.subplots(1, 2, figsize=(7.2, 2.8))
        ax.plot(t, [r.top1 for r in rows], "o-", color="C0", label="MMoE top-1")
        if baseline_top1 is not None:
            ax.axhline(baseline_top1, color="C0", ls=":", label="single model")
        ax.set_xlabel("threshold T")
        ax.set_ylabel("top-1 accuracy", color="C0")
        twin = ax.twinx()
        twin.plot(t, [r.expected_params for r in rows], "s--", color="C1", label="E[params]")
        if moe_params is not None:
            twin.axhline(moe_params, color="C1", ls=":", label="plain MoE")
        twin.set_ylabel("expected parameters loaded", color="C1")
        lines = ax.get_legend_handles_labels()
        more = twin.get_legend_handles_labels()
        ax.legend(lines[0] + more[0], lines[1] + more[1], loc="lower right")

        ax_fs.plot(t, [100 * r.false_stop_rate for r in rows], "o-", color="C3")
        ax_fs.set_xlabel("threshold T")
        ax_fs.set_ylabel("true expert stopped (%)")
        fig.tight_layout()
        return _save(fig, path)


def shared_figure(rows, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        ax.plot([k for k, _ in rows], [acc for _, acc in rows], "o-")
        ax.set_xlabel("shared conv layers k")
        ax.set_ylabel("top-1 accuracy")
        ax.set_xticks([k for k, _ in rows])
        fig.tight_layout()
        return _save(fig, path)


def curves_figure(results: dict, path):
    """Training loss per epoch for each named run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        for name, res in results.items():
            ax.plot(range(1, len(res.losses) + 1), res.losses, "o-", label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
