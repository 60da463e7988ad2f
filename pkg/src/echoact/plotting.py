"""File-based figures (matplotlib Agg backend) and a dependency-free PGM writer."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .echo import CHANNELS  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": "echoact"}


def _save(fig, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={**_PNG_META, **(meta or {})})
    plt.close(fig)
    return path


def write_pgm(matrix: np.ndarray, path: str | Path, scale: int = 32) -> Path:
    """Binary 8-bit PGM of a [0, 1] matrix, each cell blown up to ``scale`` pixels."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0, 1)
    img = np.kron(np.rint(255 * (1 - m)).astype(np.uint8), np.ones((scale, scale), dtype=np.uint8))
    path = Path(path)
    path.write_bytes(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
    return path


def plot_confusion(norm: np.ndarray, labels: Sequence[str], path: str | Path, title: str = "",
                   meta: dict | None = None) -> Path:
    k = len(labels)
    fig, ax = plt.subplots(figsize=(1.2 + 0.7 * k, 1.0 + 0.6 * k))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(k), labels, rotation=45, ha="right")
    ax.set_yticks(range(k), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(k):
        for j in range(k):
            if norm[i, j] > 0:
                ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path, meta)


def plot_window(data: np.ndarray, path: str | Path, frame_rate: float = 50000 / 600,
                heat: np.ndarray | None = None, title: str = "", meta: dict | None = None) -> Path:
    """Four flow channels side by side, optionally with a shared heatmap overlaid."""
    from .signal import range_resolution

    n_lag, n_frame = data.shape[1:]
    extent = (0, n_frame / frame_rate, n_lag * range_resolution() * 100, 0)
    fig, axes = plt.subplots(1, len(data), figsize=(3 * len(data), 3.6), sharey=True)
    for c, ax in enumerate(np.atleast_1d(axes)):
        ax.imshow(data[c], aspect="auto", cmap="gray", extent=extent,
                  vmax=np.percentile(data[c], 99.5) or None)
        if heat is not None:
            ax.imshow(heat, aspect="auto", cmap="jet", alpha=0.4, extent=extent, vmin=0, vmax=1)
        ax.set_title(CHANNELS[c] if c < len(CHANNELS) else f"ch{c}", fontsize=9)
        ax.set_xlabel("time (s)")
    np.atleast_1d(axes)[0].set_ylabel("distance (cm)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path, meta)


def plot_history(history: Sequence[tuple[int, float, float]], path: str | Path, title: str = "",
                 meta: dict | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ep = [h[0] for h in history]
    ax.plot(ep, [h[1] for h in history], marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path, meta)
