"""Report figures rendered to image files (no display needed)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curves(report, path):
    """Per-view loss curves of a bake report: hi, lo and self-supervision terms."""
    views = report["views"]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6), sharex=True)
    for v in views:
        for ax, key in zip(axes, ("loss_hi", "loss_lo", "loss_uv")):
            ax.plot(np.maximum(v[key], 1e-12), lw=1, label=v["descriptor"] or str(v["index"]))
    for ax, title in zip(axes, ("view loss, T", "view loss, t", "UV self-supervision")):
        ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel("step")
    axes[0].legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def psnr_bars(labels, values, path, threshold=None):
    finite = [v if np.isfinite(v) else 100.0 for v in values]
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(labels)), 3.6))
    ax.bar(range(len(labels)), finite, color="tab:blue")
    if threshold is not None:
        ax.axhline(threshold, color="tab:red", lw=1, ls="--")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def gap_histogram(update_magnitude, coverage, path, epsilon=1e-9):
    """Histogram of log10 accumulated update over covered texels."""
    m = np.asarray(update_magnitude)[np.asarray(coverage, dtype=bool)]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.hist(np.log10(np.maximum(m, 1e-16)), bins=80, color="tab:gray")
    ax.axvline(np.log10(epsilon), color="tab:red", lw=1, ls="--")
    ax.set_xlabel("log10 accumulated update")
    ax.set_ylabel("texels")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
