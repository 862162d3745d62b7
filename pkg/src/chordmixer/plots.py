"""Figure rendering for the report commands.

Every report that writes delimited output also renders a figure next to
it. The Agg backend keeps this headless-safe; figures carry no state
beyond their inputs, so re-rendering from the same data is repeatable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def length_histogram(lengths, path, title="sequence lengths"):
    lengths = np.asarray(lengths)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(lengths, bins=min(60, max(10, int(np.sqrt(lengths.size)))),
            color="tab:blue", alpha=0.85, edgecolor="white")
    ax.set_xlabel("sequence length N")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def probability_histogram(probs, path, hops):
    """Distribution of per-node reaching probabilities after a walk."""
    probs = np.asarray(probs)
    mean = probs.mean()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(probs, bins=60, color="tab:purple", alpha=0.85)
    ax.axvline(mean, color="black", linestyle="--", linewidth=1,
               label=f"mean {mean:.2e} (= 1/N)")
    ax.set_xlabel("reaching probability")
    ax.set_ylabel("nodes")
    ax.set_title(f"random-walk reaching probabilities after {hops} hops "
                 f"(std {probs.std():.2e})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def frontier_curve(frontier_sizes, n, path):
    """Receptive-field growth: positions reached per block depth."""
    depths = np.arange(len(frontier_sizes))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(depths, frontier_sizes, marker="o", color="tab:green")
    ax.axhline(n, color="black", linestyle=":", linewidth=1, label=f"full (N={n})")
    ax.set_xlabel("blocks traversed")
    ax.set_ylabel("positions reachable from position 0")
    ax.set_title(f"receptive-field growth, N={n}")
    ax.set_xticks(depths)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def loss_curves(records, path):
    """Train/val loss and metric per epoch from a metrics record stream."""
    by_split = {}
    for rec in records:
        if rec["split"] in ("train", "val"):
            by_split.setdefault(rec["split"], []).append((rec["epoch"], rec["loss"], rec["value"]))
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    for split_name, rows in sorted(by_split.items()):
        rows.sort()
        epochs = [r[0] for r in rows]
        axes[0].plot(epochs, [r[1] for r in rows], marker=".", label=split_name)
        axes[1].plot(epochs, [r[2] for r in rows], marker=".", label=split_name)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel(records[0]["metric"] if records else "metric")
    for ax in axes:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def percentile_curve(percentiles, metric_name, path, title="metric by length percentile"):
    """Metric value per equal-count length bin (the report table, drawn)."""
    values = [bin_["value"] for bin_ in percentiles]
    labels = [f"{bin_['lo']}-{bin_['hi']}" for bin_ in percentiles]
    xs = np.arange(len(values))
    fig, ax = plt.subplots(figsize=(8, 4.5))
    drawn = [(x, v) for x, v in zip(xs, values) if v is not None]
    ax.plot([x for x, _ in drawn], [v for _, v in drawn], marker="o", color="tab:red")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_xlabel("length range per percentile bin")
    ax.set_ylabel(metric_name)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def matrix_heatmap(matrix, path, title, xlabel="position", ylabel="channel"):
    """Generic dense-matrix heatmap."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    image = ax.imshow(matrix, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.colorbar(image, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def activation_heatmap(matrix, path, title):
    """Channels-by-positions heatmap of one block's output."""
    return matrix_heatmap(matrix, path, title)
