"""Figures written next to the CSV outputs of the CLI commands. Rendering only."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes independent of the wall clock
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def value_slice(vg, path, k: int = 0, dims=(0, 1), labels=None) -> None:
    V = vg.values[k]
    if V.ndim > 2:
        idx = [n // 2 for n in V.shape]
        for i in dims:
            idx[i] = slice(None)
        V = V[tuple(idx)]
    axes = vg.grid.axes()
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.pcolormesh(axes[dims[0]], axes[dims[1]], V.T, shading="auto", cmap="RdBu")
    ax.contour(axes[dims[0]], axes[dims[1]], V.T, levels=[0.0], colors="k", linewidths=1.2)
    fig.colorbar(mesh, ax=ax, label=f"V_{k}")
    labels = labels or (f"x{dims[0]}", f"x{dims[1]}")
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    ax.set_title("reach-avoid value (zero level in black)")
    _save(fig, path)


def training_curves(metrics, path) -> None:
    if not metrics:
        return
    step = [r["step"] for r in metrics]
    fig, axs = plt.subplots(1, 2, figsize=(9, 3.5))
    axs[0].plot(step, [r["eval_safe_rate"] for r in metrics], marker="o")
    axs[0].set_xlabel("environment steps")
    axs[0].set_ylabel("worst-case eval safe rate")
    axs[0].set_ylim(-0.02, 1.02)
    axs[1].plot(step, [r["critic_loss"] for r in metrics], label="critic")
    axs[1].set_yscale("log")
    axs[1].set_xlabel("environment steps")
    axs[1].set_ylabel("critic loss")
    _save(fig, path)


def violation_curves(curves: dict, path) -> None:
    """``curves`` maps a label to ``(steps, cumulative_violations)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (steps, v) in curves.items():
        ax.plot(steps, v, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("cumulative safety violations")
    ax.legend()
    _save(fig, path)


def horizon_sweep(rows, path) -> None:
    fig, axs = plt.subplots(1, 2, figsize=(9, 3.5))
    for crit in dict.fromkeys(r["criterion"] for r in rows):
        sel = [r for r in rows if r["criterion"] == crit]
        h = [r["horizon"] for r in sel]
        axs[0].plot(h, [r["safe_rate"] for r in sel], marker="o", label=crit)
        axs[1].plot(h, [r["intervention_freq"] for r in sel], marker="o", label=crit)
    axs[0].set_ylabel("safe rate")
    axs[1].set_ylabel("intervention frequency")
    for ax in axs:
        ax.set_xlabel("monitor horizon (steps)")
    axs[0].legend(fontsize=8)
    _save(fig, path)


def epsilon_sweep(rows, chosen: float, path) -> None:
    eps = np.array([r["epsilon"] for r in rows], dtype=float)
    finite = np.isfinite(eps)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(eps[finite], np.array([r["safe_rate"] for r in rows])[finite], marker="o", label="safe rate")
    ax.plot(eps[finite], np.array([r["intervention_freq"] for r in rows])[finite], marker="s",
            label="intervention freq.")
    if np.isfinite(chosen):
        ax.axvline(chosen, color="k", ls="--", lw=1)
    ax.set_xlabel("critic threshold")
    ax.legend()
    _save(fig, path)


def safe_rate_matrix(mat, path) -> None:
    fig, ax = plt.subplots(figsize=(1.3 * len(mat.cols) + 2, 0.6 * len(mat.rows) + 1.5))
    im = ax.imshow(mat.values, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(mat.cols)), mat.cols, rotation=30, ha="right")
    ax.set_yticks(range(len(mat.rows)), mat.rows)
    for i in range(len(mat.rows)):
        for j in range(len(mat.cols)):
            ax.text(j, i, f"{mat.values[i, j]:.2f}", ha="center", va="center",
                    color="w" if mat.values[i, j] < 0.5 else "k", fontsize=8)
    fig.colorbar(im, ax=ax, label="safe rate")
    _save(fig, path)


def episode(traj, log, path, dims=(0, 1)) -> None:
    s = traj.states
    fig, axs = plt.subplots(1, 2, figsize=(9, 3.5))
    axs[0].plot(s[:, dims[0]], s[:, dims[1]], lw=1)
    task = np.array([r["policy"] == "task" for r in log] + [False])
    axs[0].scatter(s[~task, dims[0]], s[~task, dims[1]], s=6, c="tab:red", label="fallback")
    axs[0].scatter(s[task, dims[0]], s[task, dims[1]], s=6, c="tab:green", label="task")
    axs[0].set_xlabel(f"x{dims[0]}")
    axs[0].set_ylabel(f"x{dims[1]}")
    axs[0].legend(fontsize=8)
    axs[1].plot(traj.g_seq, label="failure margin")
    axs[1].plot(traj.l_seq, label="target margin")
    axs[1].axhline(0, color="k", lw=0.8)
    axs[1].set_xlabel("step")
    axs[1].legend(fontsize=8)
    _save(fig, path)
