"""PNG figures for CLI reports (matplotlib, non-interactive backend)."""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_landscape(grid, path, true_flow=None):
    plt = _pyplot()
    ax_vals = grid.axis
    fig, ax = plt.subplots(figsize=(4.5, 4))
    half = grid.cell / 2
    extent = [ax_vals[0] - half, ax_vals[-1] + half, ax_vals[0] - half, ax_vals[-1] + half]
    im = ax.imshow(grid.values, origin="lower", extent=extent, cmap="viridis")
    u, v = grid.argmin_flow()
    ax.plot(u, v, "r+", markersize=10, label="argmin")
    if true_flow is not None:
        ax.plot(true_flow[0], true_flow[1], "wx", markersize=8, label="true")
    ax.set_xlabel("u [px]")
    ax.set_ylabel("v [px]")
    ax.set_title(f"{'scaled' if grid.scaled else 'unscaled'} loss, d={grid.d:g}")
    ax.legend(loc="upper right", fontsize=7)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_flow(flow, path, counts=None, step=2):
    plt = _pyplot()
    flow = np.asarray(flow)
    _, h, w = flow.shape
    fig, ax = plt.subplots(figsize=(4.5, 4.5 * h / w))
    if counts is not None:
        ax.imshow(np.asarray(counts).sum(axis=0), cmap="gray_r", origin="upper")
    yy, xx = np.mgrid[0:h:step, 0:w:step]
    ax.quiver(xx, yy, flow[0, ::step, ::step], flow[1, ::step, ::step], color="tab:red",
              angles="xy", scale_units="xy", scale=1)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_title("flow [px/partition]")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training(log, path):
    plt = _pyplot()
    steps = [r["step"] for r in log]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(steps, [r["contrast_total"] for r in log], label="contrast")
    axes[0].plot(steps, [r["total"] for r in log], label="total", alpha=0.6)
    axes[0].set_title("loss")
    axes[0].legend(fontsize=7)
    act_keys = [k for k in log[0] if k.startswith("act_")] if log else []
    for k in act_keys:
        axes[1].plot(steps, [r[k] for r in log], label=k[4:])
    axes[1].set_title("activity")
    axes[1].legend(fontsize=7)
    grad_keys = [k for k in log[0] if k.startswith("grad_") and k != "grad_norm"] if log else []
    for k in grad_keys:
        axes[2].semilogy(steps, [max(r[k], 1e-300) for r in log], label=k[5:])
    axes[2].set_title("mean |grad|")
    axes[2].legend(fontsize=7)
    for a in axes:
        a.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_activity(report, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, name in enumerate(report.layers):
        ax.plot(report.per_step[:, i], label=name)
    ax.set_xlabel("partition")
    ax.set_ylabel("fraction nonzero")
    if report.flow_magnitude is not None:
        ax2 = ax.twinx()
        ax2.plot(report.flow_magnitude, "k--", alpha=0.5, label="|flow|")
        ax2.set_ylabel("mean |flow| [px]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
