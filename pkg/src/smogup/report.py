"""PNG figures written next to the CSV/XYZ outputs.

matplotlib is optional and only imported when a figure is requested.
"""

from pathlib import Path

import numpy as np


class FiguresUnavailable(RuntimeError):
    pass


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise FiguresUnavailable("figures need matplotlib (pip install 'artifact[figures]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    fig.clf()
    return path


def _scatter3d(ax, pts, color, size, label=None):
    pts = np.asarray(pts)
    ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=size, c=color, depthshade=False, label=label)
    ax.set_box_aspect((1, 1, 1))
    ax.set_axis_off()


def loss_curve(log_rows, path):
    """Total and per-term losses against the step, log scale."""
    plt = _pyplot()
    steps = [r["step"] for r in log_rows]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 6), sharex=True, height_ratios=(3, 1))
    for key in ("loss", "loss_proj_coarse", "loss_proj_refined", "loss_acd"):
        vals = np.array([r[key] for r in log_rows])
        if np.all(vals > 0):
            ax.plot(steps, vals, label=key, lw=1)
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_ylabel("loss")
    ax_lr.plot(steps, [r["lr"] for r in log_rows], color="k", lw=1)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def smog_sphere(means, samples, path):
    """Mixture means (red) and drawn samples (green) on the unit sphere."""
    plt = _pyplot()
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="3d")
    u, v = np.meshgrid(np.linspace(0, 2 * np.pi, 25), np.linspace(0, np.pi, 13))
    ax.plot_wireframe(np.cos(u) * np.sin(v), np.sin(u) * np.sin(v), np.cos(v), color="0.85", lw=0.4)
    for set_lim in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
        set_lim(-1, 1)
    _scatter3d(ax, samples, "tab:green", 2, "samples")
    _scatter3d(ax, means, "tab:red", 8, "means")
    ax.legend(loc="upper right", fontsize=8)
    out = _save(fig, path)
    plt.close(fig)
    return out


def clouds(named, path):
    """Side-by-side scatter plots of ``[(title, points), ...]``."""
    plt = _pyplot()
    fig = plt.figure(figsize=(4 * len(named), 4))
    for i, (title, pts) in enumerate(named, 1):
        ax = fig.add_subplot(1, len(named), i, projection="3d")
        size = max(0.3, min(4.0, 2000.0 / max(len(pts), 1)))
        _scatter3d(ax, pts, "tab:blue", size)
        ax.set_title(f"{title} ({len(pts)})", fontsize=9)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def metric_bars(named_reports, path):
    """Grouped bars of CD/HD (and P2F when present) per shape, in 1e-3 units."""
    plt = _pyplot()
    names = [n for n, _ in named_reports]
    keys = ["cd", "hd"]
    if any(r.p2f_mean is not None for _, r in named_reports):
        keys.append("p2f_mean")
    x = np.arange(len(names))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names) + 2), 4))
    for j, key in enumerate(keys):
        vals = [(getattr(r, key) or 0.0) * 1e3 for _, r in named_reports]
        ax.bar(x + (j - (len(keys) - 1) / 2) * width, vals, width, label=key)
    ax.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("x 1e-3")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out
