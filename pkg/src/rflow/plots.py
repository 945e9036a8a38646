"""Figure rendering for run reports.

Every report path that writes delimited data can also render the matching
matplotlib figure next to it: sample histograms, model-vs-truth comparisons,
velocity quiver fields, and loss curves.  Rendering is headless (Agg).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import Cup, Domain, HalfAnnulus, Hypercube, Simplex

_HIST_BINS = 120


def domain_outline(domain: Domain):
    """Boundary polylines for the 2-D domains, for overlaying on figures."""
    if domain.dim != 2:
        return []
    if isinstance(domain, Hypercube):
        sq = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1], [-1, -1]], dtype=float)
        return [sq]
    if isinstance(domain, Simplex):
        tri = np.array([[0, 0], [1, 0], [0, 1], [0, 0]], dtype=float)
        return [tri]
    if isinstance(domain, HalfAnnulus):
        th = np.linspace(0, np.pi, 200)
        outer = np.column_stack([domain.R * np.cos(th), domain.R * np.sin(th)])
        inner = np.column_stack([domain.r * np.cos(th[::-1]), domain.r * np.sin(th[::-1])])
        left = np.array([[-domain.R, 0.0], [-domain.r, 0.0]])
        right = np.array([[domain.r, 0.0], [domain.R, 0.0]])
        return [np.vstack([outer, left[::-1], inner, right[::-1]])]
    if isinstance(domain, Cup):
        th = np.linspace(-np.pi / 4, -3 * np.pi / 4, 200)
        arc = domain.CENTER + domain.RADIUS * np.column_stack([np.cos(th), np.sin(th)])
        poly = np.vstack([[[1.0, 0.0]], [[1.0, 2.0]], arc, [[-1.0, 2.0]], [[-1.0, 0.0]], [[1.0, 0.0]]])
        return [poly]
    return []


def _overlay(ax, domain):
    for line in domain_outline(domain):
        ax.plot(line[:, 0], line[:, 1], color="white", lw=1.0, alpha=0.8)


def save_sample_histogram(samples, domain, path, title=None):
    """2-D histogram of samples with out-of-domain points marked in red."""
    lo, hi = domain.bounding_box()
    pad = 0.1 * (hi - lo)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.hist2d(
        samples[:, 0], samples[:, 1], bins=_HIST_BINS,
        range=((lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1])),
        cmap="viridis",
    )
    outside = ~domain.contains_mask(samples, tol=0.0)
    if np.any(outside):
        ax.plot(samples[outside, 0], samples[outside, 1], "r.", ms=2)
    _overlay(ax, domain)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_comparison_histogram(model_samples, truth_samples, domain, path):
    lo, hi = domain.bounding_box()
    pad = 0.1 * (hi - lo)
    extent = ((lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]))
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5))
    for ax, pts, name in zip(axes, (model_samples, truth_samples), ("model", "ground truth")):
        ax.hist2d(pts[:, 0], pts[:, 1], bins=_HIST_BINS, range=extent, cmap="viridis")
        _overlay(ax, domain)
        ax.set_aspect("equal")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_quiver(rows, domain, path, t=None):
    """Velocity field rows (x1, x2, v1, v2) as a quiver plot."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if rows.shape[0]:
        ax.quiver(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3],
                  angles="xy", color="tab:blue", width=0.003)
    for line in domain_outline(domain):
        ax.plot(line[:, 0], line[:, 1], color="black", lw=1.0)
    ax.set_aspect("equal")
    if t is not None:
        ax.set_title(f"t = {t:g}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_loss_curve(trace, path):
    trace = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    if trace.shape[0]:
        ax.plot(trace[:, 0], trace[:, 1], lw=0.6, alpha=0.5, label="loss")
        # 100-iteration smoothing for readability
        w = min(100, trace.shape[0])
        kernel = np.ones(w) / w
        smooth = np.convolve(trace[:, 1], kernel, mode="valid")
        ax.plot(trace[w - 1 :, 0], smooth, lw=1.5, label=f"{w}-iter mean")
        ax.legend()
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
