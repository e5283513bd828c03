"""Figures written next to the CSV reports: training curves and confusion matrices."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _figure(ncols=1, width=3.4, height=2.6):
    return plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)


def plot_history(histories, path, title=None):
    """Loss and accuracy curves; ``histories`` maps a run name to a TrainHistory."""
    if not isinstance(histories, dict):
        histories = {"": histories}
    with plt.rc_context(STYLE):
        fig, axes = _figure(ncols=2)
        loss_ax, acc_ax = axes[0]
        for name, h in histories.items():
            epochs = h.column("epoch")
            suffix = f" {name}" if name else ""
            loss_ax.plot(epochs, h.column("train_loss"), lw=1, label=f"train{suffix}")
            acc_ax.plot(epochs, h.column("train_war"), lw=1, label=f"train{suffix}")
            if any(v is not None for v in h.column("eval_loss")):
                loss_ax.plot(epochs, h.column("eval_loss"), lw=1, ls="--", label=f"eval{suffix}")
                acc_ax.plot(epochs, h.column("eval_war"), lw=1, ls="--", label=f"eval{suffix}")
        loss_ax.set_xlabel("epoch")
        loss_ax.set_ylabel("loss")
        acc_ax.set_xlabel("epoch")
        acc_ax.set_ylabel("WAR")
        acc_ax.set_ylim(0, 1.02)
        if len(histories) <= 4:
            acc_ax.legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_confusion(M, labels, path, title=None):
    M = np.asarray(M)
    rows = M.sum(axis=1, keepdims=True)
    frac = np.divide(M, rows, out=np.zeros(M.shape), where=rows > 0)
    with plt.rc_context(STYLE):
        size = 1.2 + 0.45 * len(labels)
        fig, axes = _figure(width=size + 0.8, height=size)
        ax = axes[0][0]
        im = ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
        ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                ax.text(j, i, str(M[i, j]), ha="center", va="center",
                        color="white" if frac[i, j] > 0.5 else "black", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
