import numpy as np
import pytest

from rflow.geometry import (
    EPS_BDRY,
    ConvexPolytope,
    Cup,
    GeometryError,
    HalfAnnulus,
    Hypercube,
    Simplex,
    unit_direction,
)

ALL_DOMAINS = [
    Hypercube(2),
    Hypercube(10),
    Simplex(2),
    Simplex(10),
    ConvexPolytope([[1, 0], [0, 1], [-1, 0], [0, -1]], [1, 1, 1, 1]),
    HalfAnnulus(1.0, 2.0),
    Cup(),
]


def _ids(domains):
    return [f"{d.kind}{d.dim}" for d in domains]


# ---------------------------------------------------------------------------
# containment


def test_hypercube_contains_interior():
    assert Hypercube(2).contains([0.5, -0.5])


def test_simplex_rejects_overweight_point():
    assert not Simplex(2).contains([0.6, 0.6])


def test_cup_contains_point_just_under_the_arc():
    # (0, 1.58578) sits a hair below the circular cap: inside the cup.
    cup = Cup()
    assert cup.contains([0.0, 1.58578])
    # directly above, inside the excluded disk
    assert not cup.contains([0.0, 1.7])
    # the bottom region is part of the cup
    assert cup.contains([0.0, 0.0])
    assert cup.contains([0.99, 1.9])
    assert not cup.contains([0.0, 2.5])


def test_contains_dimension_mismatch():
    with pytest.raises(GeometryError):
        Hypercube(3).contains([0.0, 0.0])


def test_polytope_empty_interior_rejected():
    with pytest.raises(GeometryError):
        ConvexPolytope([[1, 0], [-1, 0]], [0, 0])  # a line, no interior


def test_polytope_unbounded_rejected():
    with pytest.raises(GeometryError):
        ConvexPolytope([[1, 0], [0, 1]], [1, 1])


# ---------------------------------------------------------------------------
# ray_first_hit


def test_hypercube_axis_ray():
    s, y2, n = Hypercube(2).ray_first_hit(np.array([0.9, 0.0]), np.array([1.0, 0.0]))
    assert s == pytest.approx(0.1, abs=1e-12)
    assert np.allclose(y2, [1.0, 0.0])
    assert np.allclose(n, [1.0, 0.0])


def test_polytope_corner_ray():
    poly = ConvexPolytope([[1, 0], [0, 1], [-1, 0], [0, -1]], [1, 1, 1, 1])
    alpha = np.array([1.0, 1.0]) / np.sqrt(2.0)
    s, y2, n = poly.ray_first_hit(np.array([0.0, 0.0]), alpha)
    assert s == pytest.approx(np.sqrt(2.0), rel=1e-12)
    assert np.allclose(y2, [1.0, 1.0], atol=1e-12)


def test_half_annulus_flat_bottom_hit():
    ha = HalfAnnulus(1.0, 2.0)
    s, y2, n = ha.ray_first_hit(np.array([1.5, 0.5]), np.array([0.0, -1.0]))
    assert np.allclose(y2, [1.5, 0.0], atol=1e-12)
    assert np.allclose(n, [0.0, -1.0])


def test_half_annulus_inner_circle_hit():
    ha = HalfAnnulus(1.0, 2.0)
    s, y2, n = ha.ray_first_hit(np.array([1.5, 0.5]), unit_direction([-1.5, -0.5]))
    # heading straight at the origin: hits the inner circle first
    assert np.hypot(*y2) == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(n, -y2 / np.hypot(*y2))


def test_ray_requires_unit_direction():
    with pytest.raises(GeometryError):
        Hypercube(2).ray_first_hit(np.array([0.0, 0.0]), np.array([2.0, 0.0]))


def test_ray_requires_interior_origin():
    with pytest.raises(GeometryError):
        Hypercube(2).ray_first_hit(np.array([3.0, 0.0]), np.array([1.0, 0.0]))


def test_hit_point_on_boundary(rng):
    for dom in ALL_DOMAINS:
        for _ in range(200):
            y = dom.uniform_sample(rng)
            alpha = unit_direction(rng.standard_normal(dom.dim))
            s, y2, n = dom.ray_first_hit(y, alpha)
            assert dom.active_normals(y2, tol=1e-9), f"{dom}: hit point off boundary"
            assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-12)


def test_first_hit_minimality(rng):
    # No earlier boundary crossing: a dense grid of intermediate points along
    # the ray stays inside the domain.
    per_domain = 10_000
    grid = 64
    for dom in ALL_DOMAINS:
        ys = dom.uniform_sample(rng, per_domain)
        alphas = rng.standard_normal((per_domain, dom.dim))
        alphas /= np.linalg.norm(alphas, axis=1, keepdims=True)
        hits = np.empty(per_domain)
        for i in range(per_domain):
            hits[i] = dom.ray_first_hit(ys[i], alphas[i])[0]
        frac = (np.arange(1, grid + 1) / (grid + 1))[None, :]
        svals = EPS_BDRY + frac * np.maximum(hits[:, None] - 2 * EPS_BDRY, 0.0)
        pts = ys[:, None, :] + svals[:, :, None] * alphas[:, None, :]
        ok = dom.contains_mask(pts.reshape(-1, dom.dim))
        assert ok.all(), f"{dom}: interior point of segment left the domain"


# ---------------------------------------------------------------------------
# reflection


def test_reflect_normal_incidence():
    out = Hypercube(2).reflect_direction(np.array([1.0, 0.0]), np.array([1.0, 0.3]))
    assert np.allclose(out, [-1.0, 0.0])


def test_reflect_mirror_45deg():
    alpha = np.array([1.0, 1.0]) / np.sqrt(2.0)
    out = Hypercube(2).reflect_direction(alpha, np.array([1.0, 0.3]))
    assert np.allclose(out, [-1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)])


def test_reflect_on_outer_circle():
    ha = HalfAnnulus(1.0, 2.0)
    y = 2.0 * np.array([np.cos(np.pi / 4), np.sin(np.pi / 4)])
    out = ha.reflect_direction(np.array([1.0, 0.0]), y)
    assert np.allclose(out, [0.0, -1.0], atol=1e-12)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)


def test_reflect_requires_boundary_point():
    with pytest.raises(GeometryError):
        Hypercube(2).reflect_direction(np.array([1.0, 0.0]), np.array([0.0, 0.0]))


@pytest.mark.parametrize("dom", ALL_DOMAINS, ids=_ids(ALL_DOMAINS))
def test_reflection_isometry_and_involution(dom, rng):
    for _ in range(300):
        y = dom.uniform_sample(rng)
        alpha = unit_direction(rng.standard_normal(dom.dim))
        s, y2, n = dom.ray_first_hit(y, alpha)
        r = dom.reflect_direction(alpha, y2)
        # isometry
        assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(alpha), abs=1e-12)
        # normal component flips
        assert float(r @ n) == pytest.approx(-float(alpha @ n), abs=1e-12)
        # involution at a fixed boundary point
        rr = dom.reflect_direction(r, y2)
        assert np.allclose(rr, alpha, atol=1e-12)


# ---------------------------------------------------------------------------
# uniform sampling


def test_hypercube_sample_in_range(rng):
    pts = Hypercube(2).uniform_sample(rng, 1000)
    assert np.all(np.abs(pts) <= 1.0)


def test_simplex_marginal_means(rng):
    d = 10
    pts = Simplex(d).uniform_sample(rng, 100_000)
    # Dirichlet(1,...,1) marginals have mean 1/(d+1) and var d/((d+1)^2 (d+2))
    mean = pts.mean(axis=0)
    se = np.sqrt(d / ((d + 1) ** 2 * (d + 2)) / pts.shape[0])
    assert np.all(np.abs(mean - 1.0 / (d + 1)) < 3 * se + 1e-12)


@pytest.mark.parametrize("dom", ALL_DOMAINS, ids=_ids(ALL_DOMAINS))
def test_uniform_samples_always_contained(dom, rng):
    n = 100_000 if dom.kind == "cup" else 20_000
    pts = dom.uniform_sample(rng, n)
    assert dom.contains_mask(pts, tol=0.0).all()


def test_snap_inside_fixes_tiny_violations(rng):
    for dom in ALL_DOMAINS:
        pts = dom.uniform_sample(rng, 100)
        for p in pts:
            nudged = p + 5e-13 * rng.standard_normal(dom.dim)
            snapped = dom.snap_inside(nudged)
            assert dom.contains(snapped, tol=0.0)
