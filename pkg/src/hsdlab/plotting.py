"""Figure rendering for evaluation and training runs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
}


def _figure(width: float = 3.6, height: float = 3.2) -> Figure:
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata, so identical inputs give identical bytes
    fig.savefig(path, metadata={"Software": None})
    return path


def plot_roc(curve, auc: float, class_name: str, path) -> Path:
    """One ROC curve with the chance diagonal, AUC in the legend."""
    fpr, tpr, _ = curve
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(fpr, tpr, color="tab:red", lw=1.5, label=f"{class_name} (AUC = {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("False positive rate", fontsize=STYLE["axes.labelsize"])
    ax.set_ylabel("True positive rate", fontsize=STYLE["axes.labelsize"])
    ax.set_title(class_name, fontsize=STYLE["font.size"] + 1)
    ax.legend(loc="lower right", fontsize=STYLE["legend.fontsize"], frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(history: Sequence[dict], path, title: Optional[str] = None) -> Path:
    """Per-epoch BCE, contrastive and total loss, with lambda on a twin axis."""
    epochs = [h["epoch"] for h in history]
    fig = _figure(5.0, 3.2)
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(epochs, [h["bce"] for h in history], label="bce")
    if any(h.get("con") is not None for h in history):
        ax.plot(epochs, [h["con"] for h in history], label="contrastive")
    ax.plot(epochs, [h["total"] for h in history], label="total", color="k", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["lambda"] for h in history], color="tab:purple", ls=":", label="lambda")
    ax2.set_ylabel("lambda")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [l.get_label() for l in lines], fontsize=STYLE["legend.fontsize"], frameon=False)
    if title:
        ax.set_title(title, fontsize=STYLE["font.size"] + 1)
    fig.tight_layout()
    return _save(fig, path)
