"""Matplotlib figures for reports; PNG bytes are deterministic for identical inputs."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

# Fixed style so output does not depend on the user's matplotlibrc.
STYLE = {"font.size": 9, "axes.grid": True, "grid.alpha": 0.3}
SESSION_COLORS = ("#1f77b4", "#ff7f0e", "#d62728", "#9467bd", "#2ca02c")


def save_figure(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_comparison(rows: list[dict], path) -> None:
    """Grouped bars of Accuracy / TNR / TPR (percent) per model row."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows) + 2), 3.2))
        names = [r["model"] for r in rows]
        x = np.arange(len(rows))
        for k, (key, label) in enumerate((("accuracy", "Accuracy"), ("tnr", "Specificity (TNR)"), ("tpr", "Sensitivity (TPR)"))):
            vals = [float(r[key]) for r in rows]
            ax.bar(x + (k - 1) * 0.25, vals, width=0.25, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("%")
        ax.legend(loc="lower right", fontsize=7)
        fig.tight_layout()
        save_figure(fig, path)


def plot_history(histories: dict[str, list], path) -> None:
    """Training loss and accuracy per epoch; ``histories`` maps run name to epoch records."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
        for name, hist in histories.items():
            epochs = [h.epoch for h in hist]
            ax_loss.plot(epochs, [h.loss for h in hist], marker=".", label=name)
            ax_acc.plot(epochs, [100 * h.accuracy for h in hist], marker=".", label=name)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("training accuracy (%)")
        ax_acc.legend(fontsize=7)
        fig.tight_layout()
        save_figure(fig, path)


def plot_session_histograms(hists, path) -> None:
    """Per-session ratio histograms on shared edges (step outlines)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        for h, color in zip(hists, SESSION_COLORS):
            ax.stairs(h.counts, h.edges, color=color, label=f"{h.session} (mean {h.mean:.3f})")
        lo = min(h.edges[np.argmax(h.counts > 0)] for h in hists)
        hi = max(h.edges[len(h.counts) - np.argmax(h.counts[::-1] > 0)] for h in hists)
        ax.set_xlim(lo, hi)
        ax.set_xlabel("pupil / iris ratio")
        ax.set_ylabel("images")
        ax.legend(fontsize=7)
        fig.tight_layout()
        save_figure(fig, path)


def plot_grid(rows: list[dict], path) -> None:
    """Validation accuracy per grid configuration, in table order."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.4 * len(rows) + 2), 3))
        ax.bar(np.arange(len(rows)), [float(r["accuracy"]) for r in rows])
        ax.set_xticks(np.arange(len(rows)))
        ax.set_xticklabels([str(r["index"]) for r in rows])
        ax.set_xlabel("configuration index")
        ax.set_ylabel("validation accuracy (%)")
        ax.set_ylim(0, 100)
        fig.tight_layout()
        save_figure(fig, path)
