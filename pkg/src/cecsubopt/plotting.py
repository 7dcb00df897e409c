"""SVG figures for tree solutions, DP value functions and scaling laws."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt keeps SVG output byte-stable across runs
plt.rcParams["svg.hashsalt"] = "cecsubopt"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_tree_fans(path, panels, h: float = 1.0, x_lb: float | None = None):
    """One panel per ``(title, tree, x_tree)``: every parent-child edge of the state tree."""
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3.5), sharey=True, squeeze=False)
    for ax, (title, tree, x_tree) in zip(axes[0], panels):
        x = np.asarray(x_tree)[:, 0]
        for k in range(tree.N):
            par = x[tree.stage_slice(k)]
            kids = x[tree.stage_slice(k + 1)].reshape(len(par), tree.m)
            for j in range(tree.m):
                ax.plot(np.array([[k, k + 1]] * len(par)).T * h, np.stack([par, kids[:, j]]),
                        color="tab:blue", lw=0.5, alpha=0.6)
        if x_lb is not None:
            ax.axhline(x_lb, color="tab:red", ls="--", lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("t")
    axes[0][0].set_ylabel("x")
    _save(fig, path)


def plot_value_functions(path, x, curves, stage_cost=None):
    """Overlay optimal and CEC value functions per sigma; ``curves`` maps sigma -> (v_star, v_cec)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for c, (sigma, (v_star, v_cec)) in zip(colors, sorted(curves.items())):
        ax.plot(x, v_star, color=c, lw=1.2, label=f"optimal, sigma={sigma:g}")
        ax.plot(x, v_cec, color=c, lw=1.2, ls="--", label=f"CEC, sigma={sigma:g}")
    if stage_cost is not None:
        ax.plot(x, stage_cost, color="black", lw=0.8, ls=":", label="L(x, 0)")
    ax.set_xlabel("x")
    ax.set_ylabel("value")
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_scaling(path, records):
    """Log-log suboptimality and root control gap versus sigma, one line per x."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for x in sorted({r.x for r in records}):
        rs = sorted((r for r in records if r.x == x and r.ok), key=lambda r: r.sigma)
        s = np.array([r.sigma for r in rs])
        dv = np.array([r.delta_v for r in rs])
        gap = np.array([r.control_gap for r in rs])
        ax1.loglog(s[dv > 0], dv[dv > 0], "o-", ms=3, label=f"x={x:g}")
        ax2.loglog(s[gap > 0], gap[gap > 0], "o-", ms=3, label=f"x={x:g}")
    for ax, order, name in ((ax1, 4, "suboptimality"), (ax2, 2, "control gap")):
        lo, hi = ax.get_xlim()
        ref = np.geomspace(lo, hi, 2)
        ymid = np.exp(np.mean(np.log(ax.get_ylim())))
        ax.loglog(ref, ymid * (ref / np.sqrt(lo * hi)) ** order, "k:", lw=0.8, label=f"slope {order}")
        ax.set_xlabel("sigma")
        ax.set_ylabel(name)
        ax.legend(fontsize=7)
    _save(fig, path)
