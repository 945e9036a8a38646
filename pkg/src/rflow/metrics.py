"""Evaluation metrics: k-NN KL divergence, violation ratio, export grids.

The divergence estimator is the k-nearest-neighbor construction of
Wang, Kulkarni & Verdu (IEEE Trans. Inf. Theory, 2009):

    KL(P||Q) ~= (d/n) * sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1)),

with rho_k(i) the distance from p_i to its k-th neighbor inside P \\ {p_i}
and nu_k(i) the distance to its k-th neighbor in Q.  Estimates can be
negative at finite sample sizes and are not clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Domain

# Distances below this are floored before the log so duplicate points do not
# produce -inf.
DISTANCE_FLOOR = 1e-12
# Neighbor search switches from brute force to a k-d tree above this size.
BRUTE_FORCE_MAX = 10_000


class MetricsError(ValueError):
    pass


def _as_sample_matrix(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise MetricsError(f"{name} must be an (n, d) matrix")
    if not np.all(np.isfinite(x)):
        raise MetricsError(f"{name} contains non-finite entries")
    return x


def _kth_neighbor_brute(queries, points, k):
    """Distance from each query to its k-th nearest point (1-based, no self-skip)."""
    out = np.empty(queries.shape[0])
    block = max(1, 2**22 // max(points.shape[0], 1))
    for lo in range(0, queries.shape[0], block):
        q = queries[lo : lo + block]
        sq = np.zeros((q.shape[0], points.shape[0]))
        for j in range(points.shape[1]):
            diff = q[:, j, None] - points[None, :, j]
            sq += diff * diff
        part = np.partition(sq, k - 1, axis=1)[:, k - 1]
        out[lo : lo + q.shape[0]] = np.sqrt(part)
    return out


def _kth_neighbor_tree(queries, points, k):
    tree = cKDTree(points)
    dist, _ = tree.query(queries, k=k)
    return dist[:, k - 1] if k > 1 else np.atleast_1d(dist)


def kth_neighbor_distance(queries, points, k, force=None):
    """k-th nearest-neighbor distances; brute force below BRUTE_FORCE_MAX points."""
    if force == "brute" or (force is None and points.shape[0] <= BRUTE_FORCE_MAX):
        return _kth_neighbor_brute(queries, points, k)
    return _kth_neighbor_tree(queries, points, k)


def knn_kl(p_samples, q_samples, k=5, force=None):
    """k-NN divergence estimate KL(P||Q) from two sample sets."""
    p = _as_sample_matrix(p_samples, "p_samples")
    q = _as_sample_matrix(q_samples, "q_samples")
    if p.shape[1] != q.shape[1]:
        raise MetricsError("sample sets have different dimensions")
    n, d = p.shape
    m = q.shape[0]
    if k < 1 or k >= min(n - 1, m):
        raise MetricsError(f"need 1 <= k < min(n-1, m), got k={k}, n={n}, m={m}")
    # Self distance is always the 0-th neighbor, so ask for k+1 within P.
    rho = np.maximum(kth_neighbor_distance(p, p, k + 1, force), DISTANCE_FLOOR)
    nu = np.maximum(kth_neighbor_distance(p, q, k, force), DISTANCE_FLOOR)
    return float(d * np.mean(np.log(nu / rho)) + np.log(m / (n - 1)))


def violation_ratio(samples, domain: Domain):
    """Fraction of rows outside the closed domain (zero tolerance: a sample
    exactly on the boundary counts as inside)."""
    samples = _as_sample_matrix(samples, "samples")
    if samples.shape[0] == 0:
        return 0.0
    inside = domain.contains_mask(samples, tol=0.0)
    return float(np.count_nonzero(~inside)) / samples.shape[0]


def histogram2d(samples, bins, bounds):
    """Dense 2-D count grid plus an overflow bucket for out-of-range rows.

    ``bins`` is (nx, ny); ``bounds`` is ((xmin, xmax), (ymin, ymax)).
    Returns (grid, overflow) with grid shape (nx, ny).
    """
    samples = _as_sample_matrix(samples, "samples")
    if samples.shape[1] != 2:
        raise MetricsError("histogram2d needs 2-D samples")
    nx, ny = int(bins[0]), int(bins[1])
    if nx < 1 or ny < 1:
        raise MetricsError("bin counts must be positive")
    (xmin, xmax), (ymin, ymax) = bounds
    in_range = (
        (samples[:, 0] >= xmin)
        & (samples[:, 0] <= xmax)
        & (samples[:, 1] >= ymin)
        & (samples[:, 1] <= ymax)
    )
    grid, _, _ = np.histogram2d(
        samples[in_range, 0],
        samples[in_range, 1],
        bins=(nx, ny),
        range=((xmin, xmax), (ymin, ymax)),
    )
    overflow = int(samples.shape[0] - np.count_nonzero(in_range))
    return grid.astype(np.int64), overflow


def velocity_field_grid(net, domain: Domain, t, resolution=25):
    """Quiver rows (x1, x2, v1, v2) on an in-domain grid at time t."""
    if domain.dim != 2:
        raise MetricsError("velocity field export needs a 2-D domain")
    lo, hi = domain.bounding_box()
    xs = np.linspace(lo[0], hi[0], int(resolution))
    ys = np.linspace(lo[1], hi[1], int(resolution))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    pts = pts[domain.contains_mask(pts)]
    if pts.shape[0] == 0:
        return np.empty((0, 4))
    vel = net.forward(pts, float(t))
    return np.column_stack([pts, vel])


@dataclass
class MetricReport:
    kl: float
    violation_ratio: float
    n_used: int
    k_used: int
    seed: int | None = None
    config_hash: str = ""

    def to_text(self):
        lines = [
            f"kl: {self.kl!r}",
            f"violation_ratio: {self.violation_ratio!r}",
            f"n_used: {self.n_used}",
            f"k_used: {self.k_used}",
            f"seed: {self.seed}",
            f"config_hash: {self.config_hash}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
        return cls(
            kl=float(fields["kl"]),
            violation_ratio=float(fields["violation_ratio"]),
            n_used=int(fields["n_used"]),
            k_used=int(fields["k_used"]),
            seed=None if fields.get("seed") in (None, "None") else int(fields["seed"]),
            config_hash=fields.get("config_hash", ""),
        )
