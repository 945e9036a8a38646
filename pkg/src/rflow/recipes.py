"""Built-in toy experiment recipes.

Each recipe is a full configuration for one constrained domain: truncated
Gaussian mixture target, uniform prior, the domain's conditional flow, and
third-order Heun sampling at 100 steps.  Full scale follows the 512-wide,
6-block, 200k-iteration setup; desk scale shrinks the network and schedule
to minutes on a laptop while keeping the same pipeline.
"""

from __future__ import annotations

import copy

from .config import ConfigError, parse_config

# Desk scale: calibrated so that each domain trains, samples 50k points, and
# evaluates in a few minutes on two CPU cores while staying comfortably
# inside the accuracy thresholds of the acceptance suite.
DESK_OVERRIDES = {
    "net": {"hidden_width": 128, "num_layers": 3, "time_embed_dim": 128},
    "train": {"total_iters": 12_000, "batch_size": 256},
    "sample": {"n": 50_000},
    "eval": {"n": 50_000},
}


def _base(domain, flow_kind, data, dim=None):
    cfg = {
        "domain": domain,
        "flow": {"kind": flow_kind, "sigma_min": 1e-5},
        "prior": {"kind": "uniform"},
        "data": data,
        "sample": {"solver": "heun3", "steps": 100, "n": 500_000},
        "eval": {"k": 5, "n": 50_000},
    }
    if dim is not None:
        cfg["domain"]["dim"] = dim
    return cfg


def _recipe_hypercube2():
    means = [[0.6, 0.6], [-0.6, 0.6], [0.6, -0.6], [-0.6, -0.6]]
    data = {
        "kind": "mixture",
        "weights": [0.25, 0.25, 0.25, 0.25],
        "means": means,
        "stdevs": [[0.35, 0.35]] * 4,
    }
    return _base({"kind": "hypercube"}, "convex_ot", data, dim=2)


def _recipe_hypercube10():
    data = {
        "kind": "mixture",
        "weights": [0.5, 0.5],
        "means": [[0.5] * 10, [-0.5] * 10],
        "stdevs": [[0.4] * 10] * 2,
    }
    return _base({"kind": "hypercube"}, "convex_ot", data, dim=10)


def _recipe_simplex2():
    data = {
        "kind": "mixture",
        "weights": [1 / 3, 1 / 3, 1 / 3],
        "means": [[0.6, 0.2], [0.2, 0.6], [0.15, 0.15]],
        "stdevs": [[0.12, 0.12]] * 3,
    }
    return _base({"kind": "simplex"}, "convex_ot", data, dim=2)


def _recipe_simplex10():
    m1 = [0.04] * 10
    m1[0] = 0.35
    m2 = [0.04] * 10
    m2[1] = 0.35
    data = {
        "kind": "mixture",
        "weights": [0.5, 0.5],
        "means": [m1, m2],
        "stdevs": [[0.05] * 10] * 2,
    }
    return _base({"kind": "simplex"}, "convex_ot", data, dim=10)


def _recipe_half_annulus():
    data = {
        "kind": "mixture",
        "weights": [0.5, 0.5],
        "means": [[0.75, 1.3], [-0.75, 1.3]],
        "stdevs": [[0.25, 0.25]] * 2,
    }
    return _base({"kind": "half_annulus", "r": 1.0, "R": 2.0}, "polar_ot", data)


def _recipe_cup():
    data = {
        "kind": "mixture",
        "weights": [0.5, 0.5],
        "means": [[-0.45, 0.5], [0.45, 0.5]],
        "stdevs": [[0.25, 0.25]] * 2,
    }
    return _base({"kind": "cup"}, "cup", data)


RECIPES = {
    "hypercube2": _recipe_hypercube2,
    "hypercube10": _recipe_hypercube10,
    "simplex2": _recipe_simplex2,
    "simplex10": _recipe_simplex10,
    "half_annulus": _recipe_half_annulus,
    "cup": _recipe_cup,
}


def recipe_config(name, desk=False, seed=0):
    """Resolved configuration dict for a named recipe."""
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    raw = RECIPES[name]()
    raw["seed"] = int(seed)
    if desk:
        for section, overrides in DESK_OVERRIDES.items():
            raw.setdefault(section, {})
            raw[section] = {**raw[section], **copy.deepcopy(overrides)}
    return parse_config(raw)
