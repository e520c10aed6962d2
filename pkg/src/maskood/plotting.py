"""Static report figures rendered to PNG with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(values, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(values)), values, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(values) and min(values) > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    return _save(fig, path)


def score_histogram(scores, ood_mask, path, title="anomaly score"):
    s = np.asarray(scores).reshape(-1)
    o = np.asarray(ood_mask).reshape(-1).astype(bool)
    bins = np.linspace(0.0, 1.0, 41)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(s[~o], bins=bins, density=True, alpha=0.6, label="in-distribution")
    if o.any():
        ax.hist(s[o], bins=bins, density=True, alpha=0.6, label="anomaly")
    ax.set_xlabel("score")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(rows, label_key, metrics, path, title=""):
    labels = [str(r[label_key]) for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / max(len(metrics), 1)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3))
    for i, m in enumerate(metrics):
        ax.bar(x + i * width, [float(r.get(m, np.nan)) for r in rows], width, label=m)
    ax.set_xticks(x + width * (len(metrics) - 1) / 2)
    ax.set_xticklabels(labels, rotation=20, fontsize=7)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def heatmap(values, path, title=""):
    fig, ax = plt.subplots(figsize=(4, 3))
    im = ax.imshow(np.asarray(values), cmap="magma", vmin=0.0, vmax=1.0)
    ax.set_axis_off()
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.04)
    fig.tight_layout()
    return _save(fig, path)
