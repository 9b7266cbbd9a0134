"""SVG figures derived from run CSVs. Output is a pure function of the
inputs: the SVG id salt is fixed and no creation date is written."""

import zlib
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PALETTE = plt.get_cmap("tab10").colors
SVG_META = {"Date": None, "Creator": "mixnorm"}


def _stable_rc():
    return {"svg.hashsalt": "mixnorm", "svg.fonttype": "none", "path.simplify": False}


def color_for(key):
    """Same key, same color, in every process."""
    return PALETTE[zlib.crc32(key.encode()) % len(PALETTE)]


def running_window(values, window):
    """Trailing-window mean and population std; window=1 gives zero std."""
    values = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    mean = np.empty_like(values)
    std = np.empty_like(values)
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1):i + 1]
        mean[i] = chunk.mean()
        std[i] = chunk.std()
    return mean, std


def save_svg(fig, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata=SVG_META)
    plt.close(fig)
    return out


def plot_runs(csv_paths, out, window=10.0, title="test error"):
    """Overlay test-error curves with a +-1 std band computed over a window
    of ``window`` epochs."""
    from .runner import read_run_csv

    runs = [read_run_csv(p) for p in csv_paths]
    with plt.rc_context(_stable_rc()):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for meta, record, _ in runs:
            if not record.rows:
                continue
            per_epoch = int(meta.get("evals_per_epoch", 1))
            w = max(1, int(round(window * per_epoch)))
            epochs = np.array([r.epoch for r in record.rows])
            err = 1.0 - np.array([r.test_acc for r in record.rows])
            mean, std = running_window(err, w)
            color = color_for(record.run_id)
            ax.plot(epochs, mean, color=color, lw=1.4, label=record.run_id)
            ax.fill_between(epochs, mean - std, mean + std, color=color, alpha=0.2, lw=0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test error")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        if ax.lines:
            ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        return save_svg(fig, out)


def plot_distributions(result, out):
    """One panel per channel: histogram, single Gaussian, and each GMM fit
    with its components."""
    channels = result["channels"]
    cols = min(4, len(channels))
    rows = -(-len(channels) // cols)
    with plt.rc_context(_stable_rc()):
        fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
        for ax, ch in zip(axes.ravel(), channels):
            edges = np.asarray(ch["hist_edges"])
            ax.stairs(ch["hist_density"], edges, fill=True, color="0.8")
            grid = np.linspace(edges[0], edges[-1], 300)
            for fit in ch["fits"]:
                lam, mu, var = map(np.asarray, (fit["lambda"], fit["mu"], fit["sigma2"]))
                comps = lam[:, None] * np.exp(-0.5 * (grid - mu[:, None]) ** 2 / var[:, None]) \
                    / np.sqrt(2 * np.pi * var[:, None])
                color = color_for(f"K{fit['K']}")
                ax.plot(grid, comps.sum(axis=0), color=color, lw=1.3, label=f"K={fit['K']}")
                if fit["K"] > 1:
                    for c in comps:
                        ax.plot(grid, c, color=color, lw=0.8, ls="--")
            ax.set_title(f"channel {ch['channel']}", fontsize=8)
            ax.tick_params(labelsize=6)
        for ax in axes.ravel()[len(channels):]:
            ax.axis("off")
        axes.ravel()[0].legend(fontsize=6)
        fig.tight_layout()
        return save_svg(fig, out)


def plot_cost(rows, out):
    """Iterations per second against K, with the BN rate as a reference
    line."""
    with plt.rc_context(_stable_rc()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ks = [r["K"] for r in rows if r["variant"] != "bn"]
        ips = [r["iters_per_sec"] for r in rows if r["variant"] != "bn"]
        bn = [r["iters_per_sec"] for r in rows if r["variant"] == "bn"]
        ax.plot(ks, ips, "o-", color=color_for("mn"), label="MN")
        if bn:
            ax.axhline(bn[0], color=color_for("bn"), ls="--", label="BN")
        ax.set_xlabel("K")
        ax.set_ylabel("iterations / s")
        ax.set_ylim(bottom=0)
        ax.legend()
        fig.tight_layout()
        return save_svg(fig, out)
