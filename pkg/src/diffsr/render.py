"""Fixed-colormap PNG rendering and static diagnostic plots."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# dBZ -> RGB, linearly interpolated between stops. Do not change: rendered
# PNGs are compared byte-for-byte.
REFL_STOPS = (
    (0.0, (255, 255, 255)),
    (10.0, (100, 200, 255)),
    (20.0, (0, 160, 80)),
    (30.0, (255, 230, 0)),
    (40.0, (255, 130, 0)),
    (50.0, (220, 0, 0)),
    (60.0, (160, 0, 200)),
)


def colorize(dbz: np.ndarray) -> np.ndarray:
    """(H, W) dBZ -> (H, W, 3) uint8; masked/NaN pixels render grey."""
    v = np.clip(np.nan_to_num(np.asarray(dbz, dtype=np.float64), nan=0.0), 0.0, 60.0)
    xs = np.array([s for s, _ in REFL_STOPS])
    rgb = np.stack([np.interp(v, xs, [c[k] for _, c in REFL_STOPS]) for k in range(3)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def render_png(field, path) -> None:
    rgb = colorize(field.values)
    rgb[~field.mask] = (128, 128, 128)
    Image.fromarray(rgb, mode="RGB").save(Path(path), format="PNG", optimize=False, compress_level=6)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss(losses, path, title="training loss") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.5, alpha=0.5, label="per step")
    if len(losses) >= 50:
        k = 50
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.5, label=f"{k}-step mean")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_scores(table: dict, path, title="CSI by threshold") -> None:
    """``table`` maps model name -> {column label: value}; one bar group per label."""
    plt = _pyplot()
    names = list(table)
    labels = list(next(iter(table.values())))
    x = np.arange(len(labels))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(max(6, len(labels) * 0.9), 3.5))
    for i, name in enumerate(names):
        ax.bar(x + i * width, [table[name][lab] for lab in labels], width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2, labels, rotation=30, ha="right")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
