"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or y.size < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_history(history: list[dict], path, window: int = 20) -> Path:
    """Loss curves: total and its three components, raw and smoothed."""
    steps = np.array([h["step"] for h in history])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    total = np.array([h["loss"] for h in history])
    axes[0].plot(steps, total, color="0.75", lw=0.8, label="per step")
    sm = _smooth(total, window)
    axes[0].plot(steps[len(steps) - sm.size:], sm, color="C0", lw=1.6, label=f"mean of {window}")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("objective")
    axes[0].legend(frameon=False)
    for key, color in (("class", "C1"), ("sim", "C2"), ("diff", "C3")):
        y = _smooth(np.array([h[key] for h in history]), window)
        axes[1].plot(steps[len(steps) - y.size:], y, color=color, label=key)
    axes[1].set_xlabel("step")
    axes[1].set_yscale("symlog", linthresh=1e-3)
    axes[1].legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_attention(maps: dict[str, np.ndarray], path, truth_mask: np.ndarray | None = None) -> Path:
    """One row per map, one column per frame."""
    rows = ["s_act", "s_att", "c"] + (["truth"] if truth_mask is not None else [])
    T = maps["s_act"].shape[0]
    fig, axes = plt.subplots(len(rows), T, figsize=(1.3 * T + 0.6, 1.3 * len(rows) + 0.3), squeeze=False)
    n = maps["s_act"].size
    for r, name in enumerate(rows):
        vol = truth_mask if name == "truth" else maps[name]
        if name == "s_att":
            vol = np.clip(vol * n, 0, 1)
        for t in range(T):
            ax = axes[r, t]
            ax.imshow(vol[t], vmin=0, vmax=1, cmap="gray", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if t == 0:
                ax.set_ylabel(name, fontsize=8)
            if r == 0:
                ax.set_title(f"t={t}", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ap(per_class: list[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(max(3, 0.6 * len(per_class) + 1.5), 3))
    ax.bar(range(len(per_class)), np.nan_to_num(per_class), color="C0")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("class")
    ax.set_ylabel("AP")
    ax.set_title(f"mAP {np.nanmean(per_class):.3f}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
