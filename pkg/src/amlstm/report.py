"""Run artifacts: metrics CSV, JSON summaries, and rendered figures.

Primary outputs must be byte-identical across reruns with the same config
and seed, so no timestamps or wall-clock values appear here; those go to the
plain-text run log instead.  PNGs are written with the Date metadata field
suppressed for the same reason.
"""

from __future__ import annotations

import io
import json

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .core import atomic_write_bytes, atomic_write_text
from .training import METRIC_FIELDS


def write_metrics_csv(path, history: list) -> None:
    """One row per epoch; floats via repr for lossless round-trip."""
    lines = [",".join(METRIC_FIELDS)]
    for row in history:
        lines.append(",".join(
            str(row[k]) if k == "epoch" else repr(float(row[k]))
            for k in METRIC_FIELDS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_run_log(path, lines: list) -> None:
    atomic_write_text(path, "\n".join(lines) + "\n")


def _save_png(fig, path) -> None:
    # Date metadata omitted so the byte stream is reproducible
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def render_loss_curves(path, history: list) -> None:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=110)
    ax.plot(epochs, [r["total_loss"] for r in history], label="total", lw=2)
    ax.plot(epochs, [r["main_loss"] for r in history], label="main")
    ax.plot(epochs, [r["aux_video_loss"] for r in history], label="aux video")
    ax.plot(epochs, [r["aux_audio_loss"] for r in history], label="aux audio")
    ax.plot(epochs, [r["val_loss"] for r in history], label="validation", ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("loss decomposition")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_png(fig, path)


def render_accuracy_curves(path, history: list) -> None:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=110)
    ax.plot(epochs, [r["train_accuracy"] for r in history], label="train")
    ax.plot(epochs, [r["val_accuracy"] for r in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("classification accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_png(fig, path)


def render_confusion(path, confusion: np.ndarray, mode: str) -> None:
    n = confusion.shape[0]
    fig, ax = plt.subplots(figsize=(5.5, 5), dpi=110)
    im = ax.imshow(confusion, cmap="Blues")
    for r in range(n):
        for c in range(n):
            ax.text(c, r, str(int(confusion[r, c])), ha="center", va="center",
                    color="black" if confusion[r, c] < confusion.max() * 0.6 else "white")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_title(f"confusion ({mode})")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save_png(fig, path)
