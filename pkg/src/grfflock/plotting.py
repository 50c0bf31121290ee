"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trajectory import Trajectory  # noqa: E402


def _float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return np.nan


def plot_learning_curve(rows: list[dict], path: str | Path) -> Path:
    """Episode reward plus the periodic greedy-evaluation metrics."""
    path = Path(path)
    eps = np.array([_float(r["episodes"]) for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    axes[0].plot(eps, [_float(r["mean_reward"]) for r in rows], lw=1.2)
    axes[0].set_xlabel("episodes")
    axes[0].set_ylabel("mean episode reward (per robot)")
    for key, label in (("phi_o", r"$\Phi_o$"), ("phi_s", r"$\Phi_s$")):
        y = np.array([_float(r.get(key)) for r in rows])
        keep = ~np.isnan(y)
        if keep.any():
            axes[1].plot(eps[keep], y[keep], marker="o", ms=3, label=label)
    axes[1].set_xlabel("episodes")
    axes[1].set_ylim(-0.05, 1.05)
    axes[1].legend(loc="lower right")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_benchmark(aggregates: list[dict], path: str | Path) -> Path:
    """Grouped bars of the final metrics per scenario cell and controller."""
    path = Path(path)
    cells = sorted({(int(a["n_robots"]), int(a["n_obstacles"])) for a in aggregates})
    controllers = sorted({a["controller"] for a in aggregates})
    lookup = {(a["controller"], int(a["n_robots"]), int(a["n_obstacles"])): a for a in aggregates}
    metrics = [("phi_o", r"$\Phi_o$"), ("phi_t", r"$\Phi_t$ [m]"), ("phi_s", r"$\Phi_s$"),
               ("ms_per_decision", "ms / decision")]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.6))
    x = np.arange(len(cells))
    width = 0.8 / max(len(controllers), 1)
    for ax, (m, label) in zip(axes, metrics):
        for k, c in enumerate(controllers):
            rows = [lookup.get((c, *cell)) for cell in cells]
            mean = [_float(r[f"{m}_mean"]) if r else np.nan for r in rows]
            std = [_float(r.get(f"{m}_std")) if r else np.nan for r in rows] if m != "ms_per_decision" else None
            ax.bar(x + (k - (len(controllers) - 1) / 2) * width, mean, width, yerr=std, label=c, capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{r}/{o}" for r, o in cells], rotation=45, fontsize=8)
        ax.set_xlabel("robots/obstacles")
        ax.set_ylabel(label)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectory(traj: Trajectory, path: str | Path) -> Path:
    """Robot paths, obstacles and reference path; collided robots drawn in red."""
    path = Path(path)
    pos = np.array([[r["p"] for r in s["robots"]] for s in traj.steps])  # (T, N, 2)
    ref = np.array([s["reference"]["p_c"] for s in traj.steps])
    collided = np.array([r["collided"] for r in traj.steps[-1]["robots"]])
    side = traj.header["scenario"]["arena_side"]

    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    for o in traj.header["obstacles"]:
        ax.add_patch(plt.Circle((o["x"], o["y"]), o["radius"], color="0.5"))
    ax.plot(ref[:, 0], ref[:, 1], "k--", lw=1, label="reference")
    for i in range(pos.shape[1]):
        color = "tab:red" if collided[i] else "tab:blue"
        ax.plot(pos[:, i, 0], pos[:, i, 1], color=color, lw=0.7, alpha=0.8)
        ax.plot(pos[-1, i, 0], pos[-1, i, 1], "o", color=color, ms=3)
    ax.set_xlim(0, side)
    ax.set_ylim(0, side)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
