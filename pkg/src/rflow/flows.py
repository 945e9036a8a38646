"""Conditional flows confined to a domain, plus priors and data laws.

A conditional flow phi_t(x0 | x1) moves a prior point x0 to (approximately)
a data point x1 while staying inside the domain for every t in [0, 1].  Its
time derivative is the analytic regression target for training the velocity
model, so each variant implements both the path and its exact derivative.
"""

from __future__ import annotations

import numpy as np

from .geometry import Domain, GeometryError, REJECTION_CAP, _as_batch

DEFAULT_SIGMA_MIN = 1e-5


class FlowError(ValueError):
    pass


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise FlowError("t must lie in [0, 1]")
    return t


class ConditionalFlow:
    """Base class: a per-sample path phi_t(x0|x1) inside ``domain``."""

    def __init__(self, domain: Domain, sigma_min=DEFAULT_SIGMA_MIN):
        if sigma_min < 0.0:
            raise FlowError("sigma_min must be nonnegative")
        self.domain = domain
        self.sigma_min = float(sigma_min)

    def _validate(self, x0, x1, t):
        x0, single0 = _as_batch(x0, self.domain.dim)
        x1, single1 = _as_batch(x1, self.domain.dim)
        if x0.shape != x1.shape:
            raise FlowError("x0 and x1 must have matching shapes")
        t = _check_t(t)
        if not np.all(self.domain.contains_mask(x0)):
            raise FlowError("x0 outside the domain")
        if not np.all(self.domain.contains_mask(x1)):
            raise FlowError("x1 outside the domain")
        return x0, x1, np.broadcast_to(np.atleast_1d(t), (x0.shape[0],)), single0 and single1

    def flow_at(self, x0, x1, t):
        """phi_t(x0 | x1); accepts single points or (n, d) stacks."""
        x0, x1, t, single = self._validate(x0, x1, t)
        out = self._path(x0, x1, t)
        return out[0] if single else out

    def target_velocity(self, x0, x1, t):
        """d/dt phi_t(x0 | x1), evaluated along the path."""
        x0, x1, t, single = self._validate(x0, x1, t)
        out = self._velocity(x0, x1, t)
        return out[0] if single else out

    def _path(self, x0, x1, t):
        raise NotImplementedError

    def _velocity(self, x0, x1, t):
        raise NotImplementedError


class ConvexOTFlow(ConditionalFlow):
    """Straight segment (1-(1-s)t) x0 + (1-s)t x1; needs a convex domain.

    The (1 - sigma_min) coefficient on x1 keeps the whole path inside the
    (convex) domain instead of only approximately reaching x1.
    """

    def __init__(self, domain, sigma_min=DEFAULT_SIGMA_MIN):
        if not domain.is_convex:
            raise FlowError(f"convex OT flow requires a convex domain, got {domain.kind}")
        super().__init__(domain, sigma_min)

    def _path(self, x0, x1, t):
        a = (1.0 - (1.0 - self.sigma_min) * t)[:, None]
        b = ((1.0 - self.sigma_min) * t)[:, None]
        return a * x0 + b * x1

    def _velocity(self, x0, x1, t):
        return (1.0 - self.sigma_min) * (x1 - x0)


class PolarOTFlow(ConditionalFlow):
    """Linear interpolation of radius and angle on the half annulus."""

    def __init__(self, domain, sigma_min=DEFAULT_SIGMA_MIN):
        if domain.kind != "half_annulus":
            raise FlowError("polar OT flow requires a half-annulus domain")
        super().__init__(domain, sigma_min)

    @staticmethod
    def _polar(x):
        rad = np.hypot(x[:, 0], x[:, 1])
        ang = np.arctan2(x[:, 1], x[:, 0])  # in [0, pi] since x2 >= 0
        return rad, ang

    def _interp(self, x0, x1, t):
        r0, a0 = self._polar(x0)
        r1, a1 = self._polar(x1)
        c = 1.0 - self.sigma_min
        rt = (1.0 - c * t) * r0 + c * t * r1
        at = (1.0 - c * t) * a0 + c * t * a1
        return r0, a0, r1, a1, rt, at

    def _path(self, x0, x1, t):
        *_, rt, at = self._interp(x0, x1, t)
        return np.stack([rt * np.cos(at), rt * np.sin(at)], axis=1)

    def _velocity(self, x0, x1, t):
        r0, a0, r1, a1, rt, at = self._interp(x0, x1, t)
        c = 1.0 - self.sigma_min
        rdot = c * (r1 - r0)
        adot = c * (a1 - a0)
        vx = rdot * np.cos(at) - rt * adot * np.sin(at)
        vy = rdot * np.sin(at) + rt * adot * np.cos(at)
        return np.stack([vx, vy], axis=1)


class CupFlow(ConditionalFlow):
    """Broken-line path in the cup: the height coordinate is the absolute
    value of a linear interpolant, giving one reflection at the x-axis."""

    def __init__(self, domain):
        if domain.kind != "cup":
            raise FlowError("cup flow requires the cup domain")
        super().__init__(domain, sigma_min=0.0)

    def _path(self, x0, x1, t):
        first = (1.0 - t) * x0[:, 0] + t * x1[:, 0]
        second = np.abs((1.0 - t) * x0[:, 1] - t * x1[:, 1])
        return np.stack([first, second], axis=1)

    def _velocity(self, x0, x1, t):
        # At the kink (interpolant exactly 0) the post-reflection branch is
        # used: continuity from the right of the outgoing trajectory.
        g = (1.0 - t) * x0[:, 1] - t * x1[:, 1]
        sign_branch = np.where(g > 0.0, 1.0, -1.0)
        first = x1[:, 0] - x0[:, 0]
        second = sign_branch * (-x0[:, 1] - x1[:, 1])
        return np.stack([first, second], axis=1)


FLOW_KINDS = {"convex_ot": ConvexOTFlow, "polar_ot": PolarOTFlow, "cup": CupFlow}


def make_flow(kind, domain, sigma_min=DEFAULT_SIGMA_MIN):
    if kind not in FLOW_KINDS:
        raise FlowError(f"unknown flow kind {kind!r}")
    if kind == "cup":
        return CupFlow(domain)
    return FLOW_KINDS[kind](domain, sigma_min)


# ---------------------------------------------------------------------------
# Priors


class Prior:
    dim: int

    def sample(self, rng, n=None):
        raise NotImplementedError


class UniformPrior(Prior):
    """Uniform distribution over the domain."""

    def __init__(self, domain: Domain):
        self.domain = domain
        self.dim = domain.dim

    def sample(self, rng, n=None):
        return self.domain.uniform_sample(rng, n)


class TruncatedGaussianPrior(Prior):
    """Standard Gaussian restricted to the domain by rejection."""

    def __init__(self, domain: Domain):
        self.domain = domain
        self.dim = domain.dim

    def sample(self, rng, n=None):
        m = 1 if n is None else int(n)
        out = np.empty((m, self.dim))
        filled = 0
        attempts = 0
        while filled < m:
            want = m - filled
            k = min(max(2 * want, 64), 2_000_000)
            draws = rng.standard_normal((k, self.dim))
            attempts += k
            good = draws[self.domain.contains_mask(draws, tol=0.0)]
            take = min(len(good), want)
            out[filled : filled + take] = good[:take]
            filled += take
            if filled < m and attempts > REJECTION_CAP * m:
                raise GeometryError("rejection sampling attempt cap exceeded")
        return out[0] if n is None else out


class GaussianPrior(Prior):
    """Unconstrained standard Gaussian (for unreflected baselines)."""

    def __init__(self, dim):
        self.dim = int(dim)

    def sample(self, rng, n=None):
        size = (self.dim,) if n is None else (int(n), self.dim)
        return rng.standard_normal(size)


PRIOR_KINDS = {
    "uniform": UniformPrior,
    "truncated_gaussian": TruncatedGaussianPrior,
    "gaussian": GaussianPrior,
}


def make_prior(kind, domain):
    if kind not in PRIOR_KINDS:
        raise FlowError(f"unknown prior kind {kind!r}")
    if kind == "gaussian":
        return GaussianPrior(domain.dim)
    return PRIOR_KINDS[kind](domain)


# ---------------------------------------------------------------------------
# Data distributions


class DataDistribution:
    dim: int
    num_components = 0

    def sample(self, rng, n=None, with_labels=False):
        raise NotImplementedError


class TruncatedGaussianMixture(DataDistribution):
    """Mixture of diagonal Gaussians truncated to the domain.

    Rejection redraws both the component and the point, which samples the
    truncation of the mixture (not a mixture of truncations).  Labels are
    component indices, usable as class conditions.
    """

    def __init__(self, domain: Domain, weights, means, stdevs):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        stdevs = np.atleast_2d(np.asarray(stdevs, dtype=float))
        if stdevs.shape[0] == 1 and means.shape[0] > 1:
            stdevs = np.repeat(stdevs, means.shape[0], axis=0)
        if weights.ndim != 1 or means.shape[0] != weights.shape[0] or stdevs.shape != means.shape:
            raise FlowError("mixture weights/means/stdevs shapes are inconsistent")
        if means.shape[1] != domain.dim:
            raise FlowError("mixture mean dimension does not match the domain")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise FlowError("mixture weights must be nonnegative and sum to 1")
        if np.any(stdevs < 0):
            raise FlowError("mixture stdevs must be nonnegative")
        self.domain = domain
        self.dim = domain.dim
        self.weights = weights
        self.means = means
        self.stdevs = stdevs
        self.num_components = weights.shape[0]

    def sample(self, rng, n=None, with_labels=False):
        m = 1 if n is None else int(n)
        pts = np.empty((m, self.dim))
        labels = np.empty(m, dtype=np.int64)
        filled = 0
        attempts = 0
        while filled < m:
            want = m - filled
            k = min(max(2 * want, 64), 2_000_000)
            comp = rng.choice(self.num_components, size=k, p=self.weights)
            draws = self.means[comp] + self.stdevs[comp] * rng.standard_normal((k, self.dim))
            attempts += k
            ok = self.domain.contains_mask(draws, tol=0.0)
            good = draws[ok]
            good_c = comp[ok]
            take = min(len(good), want)
            pts[filled : filled + take] = good[:take]
            labels[filled : filled + take] = good_c[:take]
            filled += take
            if filled < m and attempts > REJECTION_CAP * m:
                raise GeometryError("rejection sampling attempt cap exceeded")
        if n is None:
            return (pts[0], int(labels[0])) if with_labels else pts[0]
        return (pts, labels) if with_labels else pts


class EmpiricalData(DataDistribution):
    """Uniform choice over fixed rows, validated against the domain at load."""

    def __init__(self, domain: Domain, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[0] == 0:
            raise FlowError("empirical dataset is empty")
        if points.shape[1] != domain.dim:
            raise FlowError("empirical dataset dimension does not match the domain")
        if not np.all(domain.contains_mask(points)):
            raise FlowError("empirical dataset contains out-of-domain rows")
        self.domain = domain
        self.dim = domain.dim
        self.points = points

    @classmethod
    def from_csv(cls, domain, path):
        return cls(domain, np.loadtxt(path, delimiter=",", ndmin=2))

    def sample(self, rng, n=None, with_labels=False):
        m = 1 if n is None else int(n)
        idx = rng.integers(0, self.points.shape[0], size=m)
        pts = self.points[idx]
        labels = np.zeros(m, dtype=np.int64)
        if n is None:
            return (pts[0], 0) if with_labels else pts[0]
        return (pts, labels) if with_labels else pts
