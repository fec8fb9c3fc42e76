"""Figure rendering for the CLI report paths.

All figures go straight to files through the Agg backend; nothing here
opens a window. Map heatmaps optionally mark detected peaks, sweep
figures plot F1 and accuracy against the layer index, and training
figures plot the loss curve with validation F1 on a twin axis.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from ambimap.aggregate import AmbiguityMap
from ambimap.metrics import LayerSweepResult

_ASCII_RAMP = " .:-=+*#%@"


def ascii_render(m: AmbiguityMap) -> str:
    """Text-art view of a map, one character per cell."""
    idx = np.minimum(
        (np.asarray(m.values) * len(_ASCII_RAMP)).astype(int), len(_ASCII_RAMP) - 1
    )
    return "\n".join("".join(_ASCII_RAMP[i] for i in row) for row in idx)


def save_map_figure(
    m: AmbiguityMap,
    path: str,
    peaks: list[tuple[int, int]] | None = None,
    title: str | None = None,
) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    im = ax.imshow(m.values, cmap="viridis", vmin=0.0, vmax=1.0, interpolation="nearest")
    if peaks:
        ax.scatter(
            [c for _, c in peaks],
            [r for r, _ in peaks],
            marker="x",
            s=90,
            c="red",
            linewidths=2.0,
        )
    ax.set_xlabel("patch column")
    ax.set_ylabel("patch row")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(result: LayerSweepResult, path: str) -> None:
    layers = [r[0] for r in result.rows]
    f1 = [r[1] for r in result.rows]
    acc = [r[2] for r in result.rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(layers, f1, marker="o", label="F1")
    ax.plot(layers, acc, marker="s", label="accuracy")
    ax.set_xlabel("decoder layer")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(layers)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_figure(history: list[dict], path: str) -> None:
    epochs = [h["epoch"] for h in history]
    loss = [h["train_loss"] for h in history]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(epochs, loss, marker="o", color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.grid(True, alpha=0.3)
    if any("val_f1" in h for h in history):
        ax2 = ax.twinx()
        ax2.plot(
            epochs,
            [h.get("val_f1", float("nan")) for h in history],
            marker="s",
            color="tab:orange",
            label="val F1",
        )
        ax2.set_ylabel("validation F1")
        ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
