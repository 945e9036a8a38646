"""Constrained domains and their boundary queries.

Every domain is a connected, compact subset of R^d with nonempty interior.
It answers four questions: membership, the first boundary crossing of a ray
started inside, the outward unit normal at a boundary point, and the mirror
reflection of a direction about that normal.  The conditional flows and the
reflection-aware sampler are built entirely on these primitives.

All domains are immutable after construction; randomness enters only through
caller-supplied ``numpy.random.Generator`` state.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

# Absolute tolerance on geometric constraint residuals (distances, for
# O(1)-scaled domains in double precision).
EPS_BDRY = 1e-9
# |alpha . n| at or below this counts as a grazing ray: treated as no hit.
TANGENT_EPS = 1e-12
# Rejection-sampling attempt budget per requested point.
REJECTION_CAP = 10**6


class GeometryError(ValueError):
    """Dimension mismatch, off-boundary query, degenerate ray or domain."""


def _as_batch(x, dim):
    """Coerce a point or an (n, d) stack of points to 2-D, remembering which."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise GeometryError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


def unit_direction(v):
    """Normalize v to unit Euclidean norm."""
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise GeometryError("cannot normalize a zero vector")
    return v / n


class Domain:
    """Base class; concrete variants implement the boundary queries."""

    is_convex = False
    kind = "abstract"

    def __init__(self, dim):
        dim = int(dim)
        if dim < 1:
            raise GeometryError(f"dimension must be positive, got {dim}")
        self.dim = dim

    # -- membership ------------------------------------------------------

    def contains(self, x, tol=EPS_BDRY):
        """True iff x lies in the closed domain, residuals within tol."""
        pts, _ = _as_batch(x, self.dim)
        if pts.shape[0] != 1:
            raise GeometryError("contains takes a single point; use contains_mask")
        return bool(self.contains_mask(pts, tol=tol)[0])

    def contains_mask(self, xs, tol=EPS_BDRY):
        """Vectorized membership for an (n, d) array; returns (n,) bools."""
        raise NotImplementedError

    # -- boundary --------------------------------------------------------

    def ray_first_hit(self, y, alpha):
        """First exit of the ray y + s*alpha, s > EPS_BDRY, through the boundary.

        Returns (s, hit_point, outward_unit_normal), or None when the ray
        never leaves the domain (only possible for unbounded stand-ins).
        Grazing intersections (incidence below TANGENT_EPS) are skipped.
        """
        y = np.asarray(y, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        if y.shape != (self.dim,) or alpha.shape != (self.dim,):
            raise GeometryError("ray origin/direction dimension mismatch")
        if not self.contains(y):
            raise GeometryError(f"ray origin {y} lies outside the domain")
        if abs(np.linalg.norm(alpha) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be a unit vector")
        hit = self._first_exit(y, alpha)
        if hit is None:
            return None
        s, normal = hit
        return s, y + s * alpha, normal

    def _first_exit(self, y, alpha):
        """Variant hook: smallest s > EPS_BDRY where the ray exits, plus normal."""
        raise NotImplementedError

    def active_normals(self, y, tol=EPS_BDRY):
        """Outward unit normals of all boundary pieces passing through y."""
        raise NotImplementedError

    def reflect_direction(self, alpha, y):
        """Mirror alpha about the outward normal at boundary point y.

        At corners (several pieces active within tolerance) the piece with
        the largest incidence rate alpha . n is used.
        """
        alpha = np.asarray(alpha, dtype=float)
        normals = self.active_normals(y)
        if not normals:
            raise GeometryError(f"{y} is not on the boundary")
        n = max(normals, key=lambda nv: float(nv @ alpha))
        return alpha - 2.0 * float(alpha @ n) * n

    # -- sampling and metadata -------------------------------------------

    def bounding_box(self):
        """(lo, hi) arrays of the axis-aligned bounding box."""
        raise NotImplementedError

    def uniform_sample(self, rng, n=None):
        """Uniform draw(s) from the domain; (d,) for n=None, else (n, d).

        Default implementation rejects from the bounding box; containment of
        every returned point is exact (zero-tolerance membership).
        """
        m = 1 if n is None else int(n)
        lo, hi = self.bounding_box()
        out = np.empty((m, self.dim))
        filled = 0
        attempts = 0
        while filled < m:
            want = m - filled
            k = min(max(2 * want, 64), 2_000_000)
            draws = rng.uniform(lo, hi, size=(k, self.dim))
            attempts += k
            good = draws[self.contains_mask(draws, tol=0.0)]
            take = min(len(good), want)
            out[filled : filled + take] = good[:take]
            filled += take
            if filled < m and attempts > REJECTION_CAP * m:
                raise GeometryError("rejection sampling attempt cap exceeded")
        return out[0] if n is None else out

    def snap_inside(self, x):
        """Pull a point violating constraints at round-off level back inside.

        Only intended for violations of order EPS_BDRY left behind by the
        reflection walk; the result satisfies contains with zero tolerance.
        """
        raise NotImplementedError

    def diameter(self):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class Hypercube(Domain):
    """The box [-1, 1]^d."""

    is_convex = True
    kind = "hypercube"

    def contains_mask(self, xs, tol=EPS_BDRY):
        xs, _ = _as_batch(xs, self.dim)
        return np.max(np.abs(xs), axis=1) <= 1.0 + tol

    def _first_exit(self, y, alpha):
        with np.errstate(divide="ignore", invalid="ignore"):
            s_up = (1.0 - y) / alpha
            s_dn = (-1.0 - y) / alpha
        s = np.where(alpha > TANGENT_EPS, s_up, np.where(alpha < -TANGENT_EPS, s_dn, np.inf))
        s = np.where(s > EPS_BDRY, s, np.inf)
        if not np.isfinite(s).any():
            return None
        smin = float(np.min(s))
        ties = np.flatnonzero(s <= smin + EPS_BDRY)
        axis = ties[np.argmax(np.abs(alpha[ties]))]
        normal = np.zeros(self.dim)
        normal[axis] = 1.0 if alpha[axis] > 0 else -1.0
        return smin, normal

    def active_normals(self, y, tol=EPS_BDRY):
        y = np.asarray(y, dtype=float)
        out = []
        for i in range(self.dim):
            if abs(abs(y[i]) - 1.0) <= tol:
                n = np.zeros(self.dim)
                n[i] = np.sign(y[i])
                out.append(n)
        return out

    def bounding_box(self):
        return -np.ones(self.dim), np.ones(self.dim)

    def uniform_sample(self, rng, n=None):
        size = (self.dim,) if n is None else (int(n), self.dim)
        return rng.uniform(-1.0, 1.0, size=size)

    def snap_inside(self, x):
        return np.clip(x, -1.0, 1.0)

    def diameter(self):
        return 2.0 * np.sqrt(self.dim)


class ConvexPolytope(Domain):
    """{u | A u <= b} with a nonempty interior, validated at construction.

    Rows of A are normalized internally so tolerances act on geometric
    distances and row vectors double as outward unit normals.
    """

    is_convex = True
    kind = "polytope"

    def __init__(self, A, b, _validate=True, _bbox=None):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise GeometryError("A must be (m, d) and b (m,)")
        super().__init__(A.shape[1])
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0):
            raise GeometryError("zero row in constraint matrix")
        self.A = A / norms[:, None]
        self.b = b / norms
        if _bbox is not None:
            self._bbox = _bbox
        elif _validate:
            self._validate_interior()
            self._bbox = self._solve_bbox()
        else:
            self._bbox = self._solve_bbox()

    def _validate_interior(self):
        # Chebyshev center: max r s.t. A x + r <= b.  r > 0 iff nonempty interior.
        m, d = self.A.shape
        res = linprog(
            c=np.r_[np.zeros(d), -1.0],
            A_ub=np.c_[self.A, np.ones(m)],
            b_ub=self.b,
            bounds=[(None, None)] * d + [(0, None)],
            method="highs",
        )
        if not res.success or res.x[-1] <= EPS_BDRY:
            raise GeometryError("polytope has empty interior")

    def _solve_bbox(self):
        lo = np.empty(self.dim)
        hi = np.empty(self.dim)
        for i in range(self.dim):
            c = np.zeros(self.dim)
            c[i] = 1.0
            for sign, dest in ((1.0, lo), (-1.0, hi)):
                res = linprog(c=sign * c, A_ub=self.A, b_ub=self.b,
                              bounds=[(None, None)] * self.dim, method="highs")
                if res.status == 3:
                    raise GeometryError("polytope is unbounded")
                if not res.success:
                    raise GeometryError("polytope bounding box LP failed")
                dest[i] = res.x[i]
        return lo, hi

    def contains_mask(self, xs, tol=EPS_BDRY):
        xs, _ = _as_batch(xs, self.dim)
        return np.all(xs @ self.A.T <= self.b + tol, axis=1)

    def _first_exit(self, y, alpha):
        den = self.A @ alpha
        res = self.b - self.A @ y
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(den > TANGENT_EPS, res / den, np.inf)
        s = np.where(s > EPS_BDRY, s, np.inf)
        if not np.isfinite(s).any():
            return None
        smin = float(np.min(s))
        ties = np.flatnonzero(s <= smin + EPS_BDRY)
        row = ties[np.argmax(den[ties])]
        return smin, self.A[row].copy()

    def active_normals(self, y, tol=EPS_BDRY):
        y = np.asarray(y, dtype=float)
        res = np.abs(self.A @ y - self.b)
        return [self.A[i].copy() for i in np.flatnonzero(res <= tol)]

    def bounding_box(self):
        return self._bbox

    def snap_inside(self, x):
        x = np.array(x, dtype=float)
        for _ in range(self.A.shape[0]):
            res = self.A @ x - self.b
            worst = int(np.argmax(res))
            if res[worst] <= 0.0:
                return x
            x = x - res[worst] * self.A[worst]
        if not self.contains(x, tol=0.0):
            raise GeometryError("snap_inside failed; violation too large")
        return x

    def diameter(self):
        lo, hi = self._bbox
        return float(np.linalg.norm(hi - lo))


class Simplex(ConvexPolytope):
    """{x | x_i >= 0, sum x_i <= 1} in d dimensions."""

    kind = "simplex"

    def __init__(self, dim):
        dim = int(dim)
        A = np.vstack([-np.eye(dim), np.ones((1, dim))])
        b = np.r_[np.zeros(dim), 1.0]
        super().__init__(A, b, _validate=False, _bbox=(np.zeros(dim), np.ones(dim)))

    def uniform_sample(self, rng, n=None):
        # Spacings of sorted uniforms are Dirichlet(1, ..., 1); dropping the
        # last spacing gives the uniform law on {x >= 0, sum <= 1}.
        m = 1 if n is None else int(n)
        u = np.sort(rng.random((m, self.dim)), axis=1)
        pts = np.diff(u, axis=1, prepend=0.0)
        return pts[0] if n is None else pts

    def diameter(self):
        return float(np.sqrt(2.0)) if self.dim > 1 else 1.0


class HalfAnnulus(Domain):
    """{(x1, x2) | r^2 <= x1^2 + x2^2 <= R^2, x2 >= 0} with 0 < r < R."""

    is_convex = False
    kind = "half_annulus"

    def __init__(self, r=1.0, R=2.0):
        super().__init__(2)
        if not (0.0 < r < R):
            raise GeometryError(f"need 0 < r < R, got r={r}, R={R}")
        self.r = float(r)
        self.R = float(R)

    def contains_mask(self, xs, tol=EPS_BDRY):
        xs, _ = _as_batch(xs, self.dim)
        rho = np.hypot(xs[:, 0], xs[:, 1])
        return (rho >= self.r - tol) & (rho <= self.R + tol) & (xs[:, 1] >= -tol)

    @staticmethod
    def _circle_crossings(y, alpha, radius):
        # Roots of |y + s*alpha|^2 = radius^2   (alpha is unit length).
        bya = float(y @ alpha)
        c = float(y @ y) - radius * radius
        disc = bya * bya - c
        if disc < 0.0:
            return ()
        root = np.sqrt(disc)
        return (-bya - root, -bya + root)

    def _first_exit(self, y, alpha):
        cands = []  # (s, normal, is_flat)
        # Outer circle: exit through the larger root.
        roots = self._circle_crossings(y, alpha, self.R)
        if roots:
            s = roots[1]
            if s > EPS_BDRY:
                p = y + s * alpha
                n = p / np.linalg.norm(p)
                if p[1] >= -EPS_BDRY and float(alpha @ n) > TANGENT_EPS:
                    cands.append((s, n, False))
        # Inner circle: first entry into the excluded disk.
        roots = self._circle_crossings(y, alpha, self.r)
        if roots:
            s = roots[0]
            if s > EPS_BDRY:
                p = y + s * alpha
                n = -p / np.linalg.norm(p)
                if p[1] >= -EPS_BDRY and float(alpha @ n) > TANGENT_EPS:
                    cands.append((s, n, False))
        # Flat bottom x2 = 0.
        if alpha[1] < -TANGENT_EPS:
            s = -y[1] / alpha[1]
            if s > EPS_BDRY:
                x1 = y[0] + s * alpha[0]
                if self.r - EPS_BDRY <= abs(x1) <= self.R + EPS_BDRY:
                    cands.append((s, np.array([0.0, -1.0]), True))
        if not cands:
            return None
        smin = min(s for s, _, _ in cands)
        ties = [c for c in cands if c[0] <= smin + EPS_BDRY]
        # Flat-curved junction points take the flat-segment normal.
        for s, n, flat in ties:
            if flat:
                return s, n
        s, n, _ = ties[0]
        return s, n

    def active_normals(self, y, tol=EPS_BDRY):
        y = np.asarray(y, dtype=float)
        rho = float(np.hypot(y[0], y[1]))
        out = []
        if abs(y[1]) <= tol:
            out.append(np.array([0.0, -1.0]))
        if abs(rho - self.R) <= tol:
            out.append(y / rho)
        if abs(rho - self.r) <= tol:
            out.append(-y / rho)
        return out

    def bounding_box(self):
        return np.array([-self.R, 0.0]), np.array([self.R, self.R])

    def snap_inside(self, x):
        x = np.array(x, dtype=float)
        if x[1] < 0.0:
            x[1] = 0.0
        rho = float(np.hypot(x[0], x[1]))
        if rho > self.R:
            x *= self.R / rho
        elif rho < self.r:
            x *= self.r / rho
        if not self.contains(x, tol=0.0):
            raise GeometryError("snap_inside failed; violation too large")
        return x

    def diameter(self):
        return 2.0 * self.R


class Cup(Domain):
    """Cup-shaped region: the strip -1 <= x1 <= 1 above the x-axis, capped
    from above by the lower arc of the circle of radius sqrt(2) centered at
    (0, 3).  Boundary pieces: two vertical walls (x2 in [0, 2]), the flat
    bottom on the x-axis, and the concave arc between (-1, 2) and (1, 2).
    """

    is_convex = False
    kind = "cup"

    CENTER = np.array([0.0, 3.0])
    RADIUS = np.sqrt(2.0)

    def __init__(self):
        super().__init__(2)

    def contains_mask(self, xs, tol=EPS_BDRY):
        xs, _ = _as_batch(xs, self.dim)
        dist = np.hypot(xs[:, 0] - self.CENTER[0], xs[:, 1] - self.CENTER[1])
        return (
            (np.abs(xs[:, 0]) <= 1.0 + tol)
            & (xs[:, 1] >= -tol)
            & (xs[:, 1] <= self.CENTER[1])
            & (dist >= self.RADIUS - tol)
        )

    def _first_exit(self, y, alpha):
        cands = []
        # Vertical walls.
        if abs(alpha[0]) > TANGENT_EPS:
            wall = 1.0 if alpha[0] > 0 else -1.0
            s = (wall - y[0]) / alpha[0]
            if s > EPS_BDRY:
                x2 = y[1] + s * alpha[1]
                if -EPS_BDRY <= x2 <= 2.0 + EPS_BDRY:
                    cands.append((s, np.array([wall, 0.0])))
        # Flat bottom.
        if alpha[1] < -TANGENT_EPS:
            s = -y[1] / alpha[1]
            if s > EPS_BDRY:
                x1 = y[0] + s * alpha[0]
                if abs(x1) <= 1.0 + EPS_BDRY:
                    cands.append((s, np.array([0.0, -1.0])))
        # Arc: first entry into the excluded disk.
        rel = y - self.CENTER
        bya = float(rel @ alpha)
        c = float(rel @ rel) - 2.0
        disc = bya * bya - c
        if disc >= 0.0:
            s = -bya - np.sqrt(disc)
            if s > EPS_BDRY:
                p = y + s * alpha
                n = (self.CENTER - p) / np.linalg.norm(self.CENTER - p)
                if abs(p[0]) <= 1.0 + EPS_BDRY and p[1] <= self.CENTER[1] and float(alpha @ n) > TANGENT_EPS:
                    cands.append((s, n))
        if not cands:
            return None
        smin = min(s for s, _ in cands)
        ties = [(s, n) for s, n in cands if s <= smin + EPS_BDRY]
        s, n = max(ties, key=lambda c: float(c[1] @ alpha))
        return s, n

    def active_normals(self, y, tol=EPS_BDRY):
        y = np.asarray(y, dtype=float)
        out = []
        if abs(y[1]) <= tol:
            out.append(np.array([0.0, -1.0]))
        for wall in (-1.0, 1.0):
            if abs(y[0] - wall) <= tol:
                out.append(np.array([wall, 0.0]))
        dist = float(np.linalg.norm(y - self.CENTER))
        if abs(dist - self.RADIUS) <= tol and y[1] <= self.CENTER[1]:
            out.append((self.CENTER - y) / dist)
        return out

    def bounding_box(self):
        return np.array([-1.0, 0.0]), np.array([1.0, 2.0])

    def snap_inside(self, x):
        x = np.array(x, dtype=float)
        x[0] = np.clip(x[0], -1.0, 1.0)
        if x[1] < 0.0:
            x[1] = 0.0
        rel = x - self.CENTER
        dist = float(np.linalg.norm(rel))
        if dist < self.RADIUS:
            x = self.CENTER + rel * (self.RADIUS / dist)
            x[0] = np.clip(x[0], -1.0, 1.0)
            if x[1] < 0.0:
                x[1] = 0.0
        if not self.contains(x, tol=0.0):
            raise GeometryError("snap_inside failed; violation too large")
        return x

    def diameter(self):
        # Opposite corners (-1, 0) and (1, 2).
        return float(np.sqrt(8.0))


DOMAIN_KINDS = {
    "hypercube": Hypercube,
    "simplex": Simplex,
    "polytope": ConvexPolytope,
    "half_annulus": HalfAnnulus,
    "cup": Cup,
}
