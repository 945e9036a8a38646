import numpy as np
import pytest

from rflow.flows import (
    ConvexOTFlow,
    CupFlow,
    EmpiricalData,
    FlowError,
    GaussianPrior,
    PolarOTFlow,
    TruncatedGaussianMixture,
    TruncatedGaussianPrior,
    UniformPrior,
)
from rflow.geometry import Cup, HalfAnnulus, Hypercube, Simplex


def flow_domain_pairs():
    return [
        (ConvexOTFlow(Hypercube(2)), "convex_ot/hypercube2"),
        (ConvexOTFlow(Hypercube(10)), "convex_ot/hypercube10"),
        (ConvexOTFlow(Simplex(2)), "convex_ot/simplex2"),
        (ConvexOTFlow(Simplex(10)), "convex_ot/simplex10"),
        (PolarOTFlow(HalfAnnulus(1.0, 2.0)), "polar_ot/half_annulus"),
        (CupFlow(Cup()), "cup/cup"),
    ]


# ---------------------------------------------------------------------------
# flow_at


def test_convex_ot_midpoint():
    flow = ConvexOTFlow(Hypercube(1), sigma_min=0.0)
    assert flow.flow_at(np.array([0.0]), np.array([1.0]), 0.5) == pytest.approx([0.5])


def test_polar_ot_midpoint():
    flow = PolarOTFlow(HalfAnnulus(1.0, 3.0), sigma_min=0.0)
    out = flow.flow_at(np.array([2.0, 0.0]), np.array([0.0, 3.0]), 0.5)
    assert np.allclose(out, [2.5 / np.sqrt(2.0), 2.5 / np.sqrt(2.0)])


def test_cup_flow_value():
    flow = CupFlow(Cup())
    out = flow.flow_at(np.array([0.5, 1.0]), np.array([-0.5, 0.5]), 0.8)
    assert np.allclose(out, [-0.3, 0.2])


def test_flow_rejects_bad_t():
    flow = ConvexOTFlow(Hypercube(2))
    with pytest.raises(FlowError):
        flow.flow_at(np.zeros(2), np.zeros(2), 1.5)


def test_flow_rejects_outside_points():
    flow = ConvexOTFlow(Hypercube(2))
    with pytest.raises(FlowError):
        flow.flow_at(np.array([2.0, 0.0]), np.zeros(2), 0.5)


def test_convex_flow_requires_convex_domain():
    with pytest.raises(FlowError):
        ConvexOTFlow(Cup())


# ---------------------------------------------------------------------------
# target_velocity


def test_convex_ot_velocity_constant():
    flow = ConvexOTFlow(Hypercube(1), sigma_min=0.0)
    for t in (0.0, 0.3, 1.0):
        assert flow.target_velocity(np.array([0.0]), np.array([1.0]), t) == pytest.approx([1.0])


def test_polar_ot_velocity_at_zero():
    flow = PolarOTFlow(HalfAnnulus(1.0, 3.0), sigma_min=0.0)
    v = flow.target_velocity(np.array([2.0, 0.0]), np.array([0.0, 3.0]), 0.0)
    assert np.allclose(v, [1.0, np.pi])


def test_cup_velocity_past_kink():
    flow = CupFlow(Cup())
    v = flow.target_velocity(np.array([0.5, 1.0]), np.array([-0.5, 0.5]), 0.8)
    assert np.allclose(v, [-1.0, 1.5])


def _finite_difference(flow, x0, x1, t, h=1e-6):
    lo = np.clip(t - h, 0.0, 1.0)
    hi = np.clip(t + h, 0.0, 1.0)
    return (flow.flow_at(x0, x1, hi) - flow.flow_at(x0, x1, lo)) / (hi - lo)[:, None]


@pytest.mark.parametrize("flow,name", flow_domain_pairs(), ids=[n for _, n in flow_domain_pairs()])
def test_velocity_matches_finite_difference(flow, name, rng):
    n = 2000
    x0 = flow.domain.uniform_sample(rng, n)
    x1 = flow.domain.uniform_sample(rng, n)
    t = rng.uniform(1e-3, 1.0 - 1e-3, n)
    if isinstance(flow, CupFlow):
        # keep t away from the kink, where the derivative jumps
        tstar = x0[:, 1] / (x0[:, 1] + x1[:, 1] + 1e-300)
        keep = np.abs(t - tstar) > 1e-3
        x0, x1, t = x0[keep], x1[keep], t[keep]
    v = flow.target_velocity(x0, x1, t)
    fd = _finite_difference(flow, x0, x1, t)
    scale = np.maximum(np.linalg.norm(v, axis=1), 1.0)
    err = np.linalg.norm(v - fd, axis=1) / scale
    assert np.max(err) < 1e-6


@pytest.mark.parametrize("flow,name", flow_domain_pairs(), ids=[n for _, n in flow_domain_pairs()])
def test_flow_containment(flow, name, rng):
    n = 100_000
    x0 = flow.domain.uniform_sample(rng, n)
    x1 = flow.domain.uniform_sample(rng, n)
    t = rng.random(n)
    xt = flow.flow_at(x0, x1, t)
    inside = flow.domain.contains_mask(xt)
    assert inside.all(), f"{name}: {np.count_nonzero(~inside)} escapes"


@pytest.mark.parametrize("flow,name", flow_domain_pairs(), ids=[n for _, n in flow_domain_pairs()])
def test_flow_endpoints(flow, name, rng):
    n = 500
    x0 = flow.domain.uniform_sample(rng, n)
    x1 = flow.domain.uniform_sample(rng, n)
    start = flow.flow_at(x0, x1, 0.0)
    if isinstance(flow, PolarOTFlow):
        # the polar round trip (atan2 then cos/sin) costs a few ulps
        assert np.allclose(start, x0, rtol=1e-14, atol=1e-15)
        # endpoint slack includes the angular leg: sigma * (dr + R * dalpha)
        dom = flow.domain
        tol = flow.sigma_min * ((dom.R - dom.r) + np.pi * dom.R)
    else:
        assert np.array_equal(start, x0)
        tol = flow.sigma_min * flow.domain.diameter()
    end = flow.flow_at(x0, x1, 1.0)
    assert np.all(np.linalg.norm(end - x1, axis=1) <= tol + 1e-14)


def test_polar_angle_monotone(rng):
    flow = PolarOTFlow(HalfAnnulus(1.0, 2.0))
    x0 = flow.domain.uniform_sample(rng, 200)
    x1 = flow.domain.uniform_sample(rng, 200)
    ts = np.linspace(0.0, 1.0, 21)
    angles = []
    for t in ts:
        xt = flow.flow_at(x0, x1, t)
        angles.append(np.arctan2(xt[:, 1], xt[:, 0]))
    angles = np.array(angles)
    diffs = np.diff(angles, axis=0)
    # each trajectory's angle moves one way only (within round-off)
    widening = (diffs.max(axis=0) > 1e-12) & (diffs.min(axis=0) < -1e-12)
    assert not widening.any()


def test_cup_flow_on_axis_degenerate():
    flow = CupFlow(Cup())
    x0 = np.array([0.3, 0.0])
    x1 = np.array([-0.3, 0.0])
    for t in (0.0, 0.5, 1.0):
        assert flow.flow_at(x0, x1, t)[1] == 0.0
        assert flow.target_velocity(x0, x1, t)[1] == 0.0


# ---------------------------------------------------------------------------
# priors


def test_uniform_prior_in_domain(rng):
    pts = UniformPrior(Hypercube(2)).sample(rng, 1000)
    assert np.all(np.abs(pts) <= 1.0)


def test_truncated_gaussian_prior_symmetry(rng):
    prior = TruncatedGaussianPrior(Hypercube(2))
    pts = prior.sample(rng, 100_000)
    se = pts.std(axis=0) / np.sqrt(pts.shape[0])
    assert np.all(np.abs(pts.mean(axis=0)) < 3 * se)


def test_truncated_gaussian_prior_simplex_contained(rng):
    dom = Simplex(2)
    pts = TruncatedGaussianPrior(dom).sample(rng, 100_000)
    assert dom.contains_mask(pts, tol=0.0).all()


def test_gaussian_prior_unconstrained(rng):
    pts = GaussianPrior(3).sample(rng, 10)
    assert pts.shape == (10, 3)


# ---------------------------------------------------------------------------
# data distributions


def test_degenerate_mixture_is_constant(rng):
    dom = Hypercube(2)
    dist = TruncatedGaussianMixture(dom, [1.0], [[0.0, 0.0]], [[0.0, 0.0]])
    pts = dist.sample(rng, 50)
    assert np.all(pts == 0.0)


def test_mixture_component_balance(rng):
    dom = Hypercube(2)
    dist = TruncatedGaussianMixture(
        dom, [0.5, 0.5], [[0.5, 0.5], [-0.5, -0.5]], [[0.05, 0.05]] * 2
    )
    n = 100_000
    pts, labels = dist.sample(rng, n, with_labels=True)
    count = np.count_nonzero(labels == 0)
    se = np.sqrt(n * 0.25)
    assert abs(count - n / 2) < 3 * se
    assert dom.contains_mask(pts, tol=0.0).all()


def test_mixture_weights_must_sum_to_one():
    with pytest.raises(FlowError):
        TruncatedGaussianMixture(Hypercube(2), [0.5, 0.6], [[0, 0], [0.1, 0.1]], [[0.1, 0.1]] * 2)


def test_empirical_frequencies(rng):
    dom = Hypercube(2)
    rows = np.array([[0.0, 0.0], [0.5, 0.5], [-0.5, 0.25]])
    dist = EmpiricalData(dom, rows)
    n = 30_000
    pts = dist.sample(rng, n)
    for row in rows:
        freq = np.mean(np.all(pts == row, axis=1))
        assert abs(freq - 1 / 3) < 3 * np.sqrt((1 / 3) * (2 / 3) / n)


def test_empirical_rejects_outside_rows():
    with pytest.raises(FlowError):
        EmpiricalData(Hypercube(2), [[2.0, 0.0]])


def test_empirical_rejects_empty():
    with pytest.raises(FlowError):
        EmpiricalData(Hypercube(2), np.empty((0, 2)))
