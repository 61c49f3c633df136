"""Static figure emission (PNG, Agg backend)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ._util import TOOL_VERSION, atomic_write  # noqa: E402


def _save(fig, path: str | os.PathLike, config_hash: str) -> Path:
    meta = {"Software": f"mmcoa {TOOL_VERSION}", "Description": f"config_hash={config_hash}"}
    out = atomic_write(path, lambda fh: fig.savefig(fh, format="png", dpi=120, metadata=meta))
    plt.close(fig)
    return out


def plot_interpolation(sweep, path: str | os.PathLike) -> Path:
    """Robust accuracy against clean accuracy along the interpolation path, one line per attack."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for attack, robust in sweep.robust.items():
        ax.plot(sweep.clean, robust, marker="o", label=attack)
        for lam, x, y in zip(sweep.lambdas, sweep.clean, robust):
            ax.annotate(f"{lam:g}", (x, y), fontsize=7, textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel("clean accuracy (%)")
    ax.set_ylabel("robust accuracy (%)")
    ax.set_title("weight interpolation (labels: lambda)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path, sweep.config_hash)


def plot_iteration_curves(curves: Mapping[str, Mapping[str, Sequence[tuple[int, float]]]],
                          path: str | os.PathLike, config_hash: str = "") -> Path:
    """One panel per attack type; ``curves[run][attack]`` is a list of (epoch, accuracy)."""
    attacks = list(dict.fromkeys(a for per_run in curves.values() for a in per_run))
    fig, axes = plt.subplots(1, max(len(attacks), 1), figsize=(4 * max(len(attacks), 1), 3.5), squeeze=False)
    for ax, attack in zip(axes[0], attacks):
        for run, per_run in curves.items():
            pts = per_run.get(attack, [])
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=run)
        ax.set_title(attack)
        ax.set_xlabel("training epoch")
        ax.set_ylabel("accuracy (%)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path, config_hash)


def plot_loss_curve(log: Sequence[dict], path: str | os.PathLike, config_hash: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["step"] for r in log], [r["loss"] for r in log])
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path, config_hash)
