"""Static SVG charts of training, deployment and FoM curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "circuit-sizer"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _stack(curves: Sequence[Sequence[float]]) -> np.ndarray:
    n = min(len(c) for c in curves)
    return np.array([np.asarray(c[:n], dtype=float) for c in curves])


def training_curves(path: str | Path, x: Sequence[float], panels: dict[str, Sequence[Sequence[float]]]):
    """One panel per metric; mean line with a min-max band across seeds. NaNs are skipped."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.2), squeeze=False)
    for ax, (title, curves) in zip(axes[0], panels.items()):
        data = _stack(curves)
        xs = np.asarray(x[: data.shape[1]], dtype=float)
        keep = ~np.all(np.isnan(data), axis=0)
        if keep.any():
            d = data[:, keep]
            ax.plot(xs[keep], np.nanmean(d, axis=0), lw=1.5)
            ax.fill_between(xs[keep], np.nanmin(d, axis=0), np.nanmax(d, axis=0), alpha=0.25)
        ax.set_title(title)
        ax.set_xlabel("episodes")
        ax.grid(alpha=0.3)
    _save(fig, path)


def deployment_trace(path: str | Path, specs: np.ndarray, goal: Sequence[float], names: Sequence[str],
                     log_scale: Sequence[bool] | None = None):
    """Intermediate specifications per step with the goal as a dashed horizontal line."""
    specs = np.atleast_2d(specs)
    n = len(names)
    fig, axes = plt.subplots(1, n, figsize=(3.4 * n, 3.0), squeeze=False)
    steps = np.arange(1, len(specs) + 1)
    for k, ax in enumerate(axes[0]):
        ax.plot(steps, specs[:, k], marker=".", lw=1.2)
        ax.axhline(goal[k], ls="--", color="k", lw=1.0)
        if log_scale and log_scale[k]:
            ax.set_yscale("log")
        ax.set_title(names[k])
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    _save(fig, path)


def method_curves(path: str | Path, curves: dict[str, Sequence[Sequence[float]]], xlabel: str, ylabel: str):
    """Mean curve with min-max band per method (each method may have several seeds)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for name, runs in curves.items():
        data = _stack(runs)
        xs = np.arange(1, data.shape[1] + 1)
        ax.plot(xs, data.mean(axis=0), label=name, lw=1.5)
        if len(data) > 1:
            ax.fill_between(xs, data.min(axis=0), data.max(axis=0), alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)
