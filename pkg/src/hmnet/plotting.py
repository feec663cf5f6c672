"""SVG figures: trajectories plus per-step speed and acceleration panels."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .motion import difference  # noqa: E402


def panel_series(history, track, frequency: float) -> dict[str, np.ndarray]:
    """Velocity and acceleration of a future ``track`` (``(T, 2)``), one row per step.

    The last two observed positions are prepended so that every predicted
    step has a velocity and an acceleration; ``v`` is
    ``difference(cat(last observed, track)) * f``.
    """
    seq = np.concatenate([np.asarray(history, dtype=np.float64)[-2:], np.asarray(track, dtype=np.float64)])
    v = difference(seq, frequency)
    a = difference(v, frequency)
    return {"t": np.arange(1, len(track) + 1) / frequency, "v": v[1:], "a": a}


def plot_scene(history, future, preds, frequency: float, path, title: str = "") -> Path:
    """Write a three-panel SVG: positions, speed and acceleration magnitude.

    ``preds`` is ``(K, T, 2)``.
    """
    history = np.asarray(history, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    alpha = 0.8 if len(preds) == 1 else 0.35
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    ax = axes[0]
    ax.plot(history[:, 0], history[:, 1], "k.-", lw=1, ms=3, label="history")
    ax.plot(future[:, 0], future[:, 1], "g.-", lw=1, ms=3, label="ground truth")
    for j, p in enumerate(preds):
        ax.plot(p[:, 0], p[:, 1], "-", color="tab:red", alpha=alpha, lw=1,
                label="prediction" if j == 0 else None)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize=7, loc="best")

    for track, style in [(future, {"color": "tab:green"})] + \
            [(p, {"color": "tab:red", "alpha": alpha}) for p in preds]:
        ser = panel_series(history, track, frequency)
        axes[1].plot(ser["t"], np.linalg.norm(ser["v"], axis=-1), lw=1, **style)
        axes[2].plot(ser["t"], np.linalg.norm(ser["a"], axis=-1), lw=1, **style)
    axes[1].set_xlabel("t (s)")
    axes[1].set_ylabel("speed (m/s)")
    axes[2].set_xlabel("t (s)")
    axes[2].set_ylabel("|acceleration| (m/s²)")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
