"""Experiment configuration: strict schema, canonical hashing, builders.

Configurations are YAML files with fixed sections.  Parsing is strict:
unknown sections or keys are rejected so a typo cannot silently fall back
to a default.  The canonical content hash of the fully-resolved config is
embedded in run artifacts and checked when artifacts are combined.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np
import yaml

from .flows import EmpiricalData, TruncatedGaussianMixture, make_flow, make_prior
from .geometry import ConvexPolytope, Cup, HalfAnnulus, Hypercube, Simplex
from .net import NetConfig, VelocityNet
from .train import TrainConfig


class ConfigError(ValueError):
    pass


_UNSET = object()

# section -> key -> (caster, default); _UNSET defaults are required keys or
# keys whose requiredness depends on the chosen kind.
_SCHEMA = {
    "": {
        "seed": (int, 0),
        "out_dir": (str, None),
        "threads": (int, None),
        "figures": (bool, True),
    },
    "domain": {
        "kind": (str, _UNSET),
        "dim": (int, None),
        "r": (float, 1.0),
        "R": (float, 2.0),
        "A": (list, None),
        "b": (list, None),
    },
    "flow": {
        "kind": (str, _UNSET),
        "sigma_min": (float, 1e-5),
    },
    "prior": {
        "kind": (str, "uniform"),
    },
    "data": {
        "kind": (str, _UNSET),
        "weights": (list, None),
        "means": (list, None),
        "stdevs": (list, None),
        "csv_path": (str, None),
    },
    "net": {
        "hidden_width": (int, 512),
        "num_layers": (int, 6),
        "time_embed_dim": (int, 512),
        "num_classes": (int, 0),
    },
    "train": {
        "batch_size": (int, 512),
        "total_iters": (int, 200_000),
        "lr_init": (float, 3e-4),
        "lr_decay": (float, 0.75),
        "lr_decay_every": (int, 10_000),
        "adam_beta1": (float, 0.9),
        "adam_beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "uncond_drop_prob": (float, 0.1),
        "warmup_iters": (int, 0),
        "checkpoint_every": (int, 0),
        "log_every": (int, 100),
    },
    "sample": {
        "solver": (str, "heun3"),
        "steps": (int, 100),
        "n": (int, 50_000),
        "atol": (float, 1e-5),
        "rtol": (float, 1e-5),
        "fast_fold": (bool, True),
        "guidance_weight": (float, None),
        "guidance_class": (int, None),
        "chunk": (int, 16_384),
    },
    "eval": {
        "k": (int, 5),
        "n": (int, 50_000),
    },
}

_SOLVERS = ("euler", "midpoint", "heun3", "rk4", "dopri5")


def _cast(section, key, caster, value):
    if value is None:
        return None
    if caster is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if caster is list:
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key} must be a list")
        return value
    if caster is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if caster is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer")
        return value
    if caster is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    if not isinstance(value, caster):
        raise ConfigError(f"{section}.{key} has the wrong type")
    return value


def parse_config(raw):
    """Resolve a raw nested dict against the schema; strict on unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    resolved = {}
    seen_sections = set()
    for key, value in raw.items():
        if key in _SCHEMA[""]:
            resolved[key] = _cast("", key, _SCHEMA[""][key][0], value)
        elif key in _SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            seen_sections.add(key)
            resolved[key] = {}
            for k, v in value.items():
                if k not in _SCHEMA[key]:
                    raise ConfigError(f"unknown key {key}.{k}")
                resolved[key][k] = _cast(key, k, _SCHEMA[key][k][0], v)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    # Fill defaults.
    for key, (_, default) in _SCHEMA[""].items():
        resolved.setdefault(key, default)
    for section in _SCHEMA:
        if not section:
            continue
        resolved.setdefault(section, {})
        for k, (_, default) in _SCHEMA[section].items():
            if k not in resolved[section]:
                if default is _UNSET and section in ("domain", "flow", "data"):
                    raise ConfigError(f"missing required key {section}.{k}")
                resolved[section][k] = None if default is _UNSET else default
    _validate(resolved)
    return resolved


def _validate(cfg):
    d = cfg["domain"]
    if d["kind"] not in ("hypercube", "simplex", "polytope", "half_annulus", "cup"):
        raise ConfigError(f"unknown domain kind {d['kind']!r}")
    if d["kind"] in ("hypercube", "simplex") and not d.get("dim"):
        raise ConfigError("domain.dim is required for hypercube/simplex")
    if d["kind"] == "polytope" and (d.get("A") is None or d.get("b") is None):
        raise ConfigError("polytope domains need domain.A and domain.b")
    if cfg["flow"]["kind"] not in ("convex_ot", "polar_ot", "cup"):
        raise ConfigError(f"unknown flow kind {cfg['flow']['kind']!r}")
    if cfg["prior"]["kind"] not in ("uniform", "truncated_gaussian", "gaussian"):
        raise ConfigError(f"unknown prior kind {cfg['prior']['kind']!r}")
    if cfg["data"]["kind"] not in ("mixture", "csv"):
        raise ConfigError(f"unknown data kind {cfg['data']['kind']!r}")
    if cfg["data"]["kind"] == "mixture":
        for key in ("weights", "means", "stdevs"):
            if cfg["data"].get(key) is None:
                raise ConfigError(f"mixture data needs data.{key}")
    if cfg["data"]["kind"] == "csv" and not cfg["data"].get("csv_path"):
        raise ConfigError("csv data needs data.csv_path")
    if cfg["sample"]["solver"] not in _SOLVERS:
        raise ConfigError(f"unknown solver {cfg['sample']['solver']!r}")
    gw, gc = cfg["sample"]["guidance_weight"], cfg["sample"]["guidance_class"]
    if (gw is None) != (gc is None):
        raise ConfigError("guidance_weight and guidance_class must be given together")
    if gc is not None and cfg["net"]["num_classes"] == 0:
        raise ConfigError("guidance requires a class-conditioned network")
    if cfg["seed"] < 0:
        raise ConfigError("seed must be nonnegative")


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return parse_config(raw)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def apply_overrides(raw, assignments):
    """Apply 'section.key=value' (or 'key=value') strings onto a raw dict."""
    raw = copy.deepcopy(raw)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, text = item.partition("=")
        value = yaml.safe_load(text) if text != "" else None
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            raw[parts[0]] = value
        elif len(parts) == 2:
            raw.setdefault(parts[0], {})
            if not isinstance(raw[parts[0]], dict):
                raise ConfigError(f"cannot override non-section {parts[0]!r}")
            raw[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"override key {dotted!r} nests too deep")
    return raw


def config_hash(cfg):
    """Content hash of the canonical (resolved, sorted) configuration."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Builders


def build_domain(cfg):
    d = cfg["domain"]
    kind = d["kind"]
    if kind == "hypercube":
        return Hypercube(d["dim"])
    if kind == "simplex":
        return Simplex(d["dim"])
    if kind == "polytope":
        return ConvexPolytope(np.asarray(d["A"], dtype=float), np.asarray(d["b"], dtype=float))
    if kind == "half_annulus":
        return HalfAnnulus(d["r"], d["R"])
    return Cup()


def build_flow(cfg, domain):
    return make_flow(cfg["flow"]["kind"], domain, cfg["flow"]["sigma_min"])


def build_prior(cfg, domain):
    return make_prior(cfg["prior"]["kind"], domain)


def build_data(cfg, domain):
    d = cfg["data"]
    if d["kind"] == "mixture":
        return TruncatedGaussianMixture(domain, d["weights"], d["means"], d["stdevs"])
    return EmpiricalData.from_csv(domain, d["csv_path"])


def net_config(cfg, domain):
    n = cfg["net"]
    return NetConfig(
        input_dim=domain.dim,
        hidden_width=n["hidden_width"],
        num_layers=n["num_layers"],
        time_embed_dim=n["time_embed_dim"],
        num_classes=n["num_classes"],
        seed=cfg["seed"],
    )


def build_net(cfg, domain):
    ncfg = net_config(cfg, domain)
    if ncfg.num_classes > 0:
        data = cfg["data"]
        if data["kind"] != "mixture" or len(data["weights"]) != ncfg.num_classes:
            raise ConfigError(
                "net.num_classes must match the number of mixture components"
            )
    return VelocityNet(ncfg)


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        batch_size=t["batch_size"],
        total_iters=t["total_iters"],
        lr_init=t["lr_init"],
        lr_decay=t["lr_decay"],
        lr_decay_every=t["lr_decay_every"],
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        uncond_drop_prob=t["uncond_drop_prob"],
        warmup_iters=t["warmup_iters"],
        seed=cfg["seed"],
    )


def checkpoint_compatible(ckpt_cfg: NetConfig, cfg, domain):
    """Structural match between a checkpoint and a run config (seed excluded)."""
    want = net_config(cfg, domain)
    return (
        ckpt_cfg.input_dim == want.input_dim
        and ckpt_cfg.hidden_width == want.hidden_width
        and ckpt_cfg.num_layers == want.num_layers
        and ckpt_cfg.time_embed_dim == want.time_embed_dim
        and ckpt_cfg.num_classes == want.num_classes
    )
