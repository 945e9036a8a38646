import numpy as np
import pytest

from rflow.geometry import Domain


class WholeSpace(Domain):
    """Unbounded stand-in that never reports boundary hits.

    Sampling through it must reduce to the plain (unreflected) solver.
    """

    kind = "whole_space"
    is_convex = True

    def contains_mask(self, xs, tol=None):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return np.ones(xs.shape[0], dtype=bool)

    def _first_exit(self, y, alpha):
        return None

    def active_normals(self, y, tol=None):
        return []

    def bounding_box(self):
        big = np.full(self.dim, 1e9)
        return -big, big

    def snap_inside(self, x):
        return np.asarray(x, dtype=float)

    def diameter(self):
        return np.inf


@pytest.fixture
def rng():
    return np.random.default_rng(20240520)


def make_rng(seed=0):
    return np.random.default_rng(seed)
