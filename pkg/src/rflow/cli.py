"""Command line: train, sample, eval, field, and repro pipelines.

Every subcommand is deterministic given (config, seed).  Artifacts embed the
canonical config hash; eval refuses to mix artifacts from different configs
unless forced.  Exit codes: 0 success, 2 usage/config error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    apply_overrides,
    build_data,
    build_domain,
    build_flow,
    build_net,
    build_prior,
    checkpoint_compatible,
    config_hash,
    dump_config,
    load_config,
    parse_config,
    train_config,
)
from .flows import FlowError
from .geometry import GeometryError
from .metrics import MetricReport, MetricsError, histogram2d, knn_kl, velocity_field_grid, violation_ratio
from .net import CheckpointError, NetError, VelocityNet, load_checkpoint, save_checkpoint
from .recipes import recipe_config
from .sample import GuidanceConfig, SamplingError, sample_batch
from .train import TrainingDiverged, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# Numerical failures (exit 3) versus configuration/usage errors (exit 2).
# Degenerate-domain errors count as configuration problems.
_RUN_ERRORS = (TrainingDiverged, SamplingError, FloatingPointError)
_BUILD_ERRORS = (ConfigError, CheckpointError, FlowError, NetError, MetricsError, GeometryError, OSError)

OUT_ROOT_ENV = "RFLOW_OUT_ROOT"


def _out_dir(args, default_name):
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args):
    cfg = load_config(args.config)
    raw = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "no_figures", False):
        raw["figures"] = False
    return parse_config(raw)


def _thread_limits(threads):
    if threads is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=int(threads))


def _write_manifest(path, cfg, seed, started, artifacts):
    manifest = {
        "config_hash": config_hash(cfg),
        "tool_version": __version__,
        "seed": seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return manifest


def _now():
    return datetime.now(timezone.utc).isoformat()


def _write_samples_csv(path, samples):
    np.savetxt(path, samples, delimiter=",", fmt="%.17g")


def _read_samples_csv(path, dim):
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, dim)
    if data.shape[1] != dim:
        raise ConfigError(f"{path} has {data.shape[1]} columns, expected {dim}")
    return data


# ---------------------------------------------------------------------------
# train


def run_train(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    domain = build_domain(cfg)
    flow = build_flow(cfg, domain)
    prior = build_prior(cfg, domain)
    data = build_data(cfg, domain)
    net = build_net(cfg, domain)
    tcfg = train_config(cfg)
    ckpt_path = out_dir / "checkpoint.rfmc"
    every = cfg["train"]["checkpoint_every"]

    def callback(it, loss, lr, live_net):
        if every > 0 and (it + 1) % every == 0:
            save_checkpoint(live_net, ckpt_path)

    with _thread_limits(cfg["threads"]):
        trace = train(tcfg, net, flow, prior, data, callback=callback)
    save_checkpoint(net, ckpt_path)
    trace_path = out_dir / "loss_trace.csv"
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("iter,loss,lr\n")
        for it, loss, lr in trace:
            fh.write(f"{it},{loss!r},{lr!r}\n")
    artifacts = {"checkpoint": ckpt_path, "loss_trace": trace_path}
    if cfg["figures"]:
        from .plots import save_loss_curve

        fig_path = out_dir / "loss_curve.png"
        save_loss_curve(trace, fig_path)
        artifacts["loss_curve"] = fig_path
    manifest = _write_manifest(out_dir / "manifest.json", cfg, cfg["seed"], started, artifacts)
    return ckpt_path, trace, manifest


def cmd_train(args):
    cfg = _load(args)
    out_dir = _out_dir(args, Path(args.config).stem)
    run_train(cfg, out_dir)
    print(f"checkpoint written to {out_dir / 'checkpoint.rfmc'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def run_sample(cfg, ckpt_path, out_dir, n=None, seed=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = build_domain(cfg)
    prior = build_prior(cfg, domain)
    net = load_checkpoint(ckpt_path)
    if not checkpoint_compatible(net.config, cfg, domain):
        raise ConfigError("checkpoint architecture does not match the run config")
    s = cfg["sample"]
    guidance = None
    class_index = None
    if s["guidance_weight"] is not None:
        if net.config.num_classes == 0:
            raise ConfigError("guidance requested on an unconditional checkpoint")
        guidance = GuidanceConfig(weight=s["guidance_weight"], class_index=s["guidance_class"])
    n = s["n"] if n is None else int(n)
    seed = cfg["seed"] if seed is None else int(seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    with _thread_limits(cfg["threads"]):
        report = sample_batch(
            domain,
            prior,
            net,
            s["solver"],
            n=n,
            rng=rng,
            steps=s["steps"],
            atol=s["atol"],
            rtol=s["rtol"],
            guidance=guidance,
            class_index=class_index,
            fast_fold=s["fast_fold"],
            chunk=s["chunk"],
            seed=seed,
        )
    samples_path = out_dir / "samples.csv"
    _write_samples_csv(samples_path, report.samples)
    sidecar = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "n": n,
        "solver": s["solver"],
        "steps": report.steps,
        "nfe": report.nfe,
        "reflections": report.reflections,
        "accepted_steps": report.accepted_steps,
        "rejected_steps": report.rejected_steps,
        "guidance_weight": s["guidance_weight"],
        "guidance_class": s["guidance_class"],
    }
    report_path = out_dir / "sample_report.json"
    report_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if cfg["figures"] and domain.dim == 2 and n > 0:
        from .plots import save_sample_histogram

        save_sample_histogram(report.samples, domain, out_dir / "samples_hist.png")
    return samples_path, report, sidecar


def cmd_sample(args):
    cfg = _load(args)
    raw_over = {}
    if args.solver:
        raw_over["sample.solver"] = args.solver
    if args.steps:
        raw_over["sample.steps"] = args.steps
    if args.guidance_weight is not None:
        cfg = parse_config(apply_overrides(cfg, [
            f"sample.guidance_weight={args.guidance_weight}",
            f"sample.guidance_class={args.guidance_class}",
        ]))
    if raw_over:
        cfg = parse_config(apply_overrides(cfg, [f"{k}={v}" for k, v in raw_over.items()]))
    out_dir = _out_dir(args, Path(args.config).stem + "-samples")
    _, report, _ = run_sample(cfg, args.checkpoint, out_dir, n=args.n, seed=args.seed)
    print(f"wrote {report.samples.shape[0]} samples to {out_dir / 'samples.csv'} "
          f"(nfe={report.nfe}, reflections={report.reflections})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def run_eval(cfg, samples_path, out_dir, groundtruth_path=None, force=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = build_domain(cfg)
    model = _read_samples_csv(samples_path, domain.dim)
    cfg_hash = config_hash(cfg)
    sidecar = Path(samples_path).parent / "sample_report.json"
    seed = cfg["seed"]
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if meta.get("config_hash") != cfg_hash and not force:
            raise ConfigError(
                "samples were produced under a different config hash "
                f"({meta.get('config_hash')} != {cfg_hash}); pass --force to override"
            )
        seed = meta.get("seed", seed)
    e = cfg["eval"]
    if groundtruth_path is not None:
        truth = _read_samples_csv(groundtruth_path, domain.dim)
    else:
        data = build_data(cfg, domain)
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(3,)))
        truth = data.sample(rng, e["n"])
    n_used = min(model.shape[0], e["n"])
    m_used = min(truth.shape[0], e["n"])
    if n_used <= e["k"] + 1 or m_used <= e["k"]:
        raise MetricsError("not enough samples for the requested k")
    with _thread_limits(cfg["threads"]):
        kl = knn_kl(model[:n_used], truth[:m_used], k=e["k"])
        ratio = violation_ratio(model, domain)
    report = MetricReport(
        kl=kl,
        violation_ratio=ratio,
        n_used=n_used,
        k_used=e["k"],
        seed=seed,
        config_hash=cfg_hash,
    )
    metrics_path = out_dir / "metrics.txt"
    metrics_path.write_text(report.to_text(), encoding="utf-8")
    artifacts = {"metrics": metrics_path}
    if domain.dim == 2:
        lo, hi = domain.bounding_box()
        bounds = ((lo[0], hi[0]), (lo[1], hi[1]))
        for name, pts in (("model", model), ("groundtruth", truth)):
            grid, overflow = histogram2d(pts, (100, 100), bounds)
            grid_path = out_dir / f"{name}_hist.csv"
            np.savetxt(grid_path, grid, delimiter=",", fmt="%d")
            artifacts[f"{name}_hist"] = grid_path
        if cfg["figures"]:
            from .plots import save_comparison_histogram

            save_comparison_histogram(model, truth, domain, out_dir / "eval_hist.png")
    return report, artifacts


def cmd_eval(args):
    cfg = _load(args)
    out_dir = _out_dir(args, Path(args.config).stem + "-eval")
    report, _ = run_eval(cfg, args.samples, out_dir,
                         groundtruth_path=args.groundtruth, force=args.force)
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# field


def run_field(cfg, ckpt_path, times, resolution, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = build_domain(cfg)
    if domain.dim != 2:
        raise ConfigError("velocity-field export needs a 2-D domain")
    net = load_checkpoint(ckpt_path)
    if not checkpoint_compatible(net.config, cfg, domain):
        raise ConfigError("checkpoint architecture does not match the run config")
    paths = []
    for t in times:
        rows = velocity_field_grid(net, domain, t, resolution=resolution)
        csv_path = out_dir / f"field_t{t:.3f}.csv"
        np.savetxt(csv_path, rows, delimiter=",", fmt="%.17g")
        paths.append(csv_path)
        if cfg["figures"]:
            from .plots import save_quiver

            save_quiver(rows, domain, out_dir / f"field_t{t:.3f}.png", t=t)
    return paths


def cmd_field(args):
    cfg = _load(args)
    out_dir = _out_dir(args, Path(args.config).stem + "-field")
    paths = run_field(cfg, args.checkpoint, args.t, args.resolution, out_dir)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


# ---------------------------------------------------------------------------
# repro


def run_repro(cfg, out_dir):
    """Full train -> sample -> eval pipeline into out_dir; returns the report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    dump_config(cfg, out_dir / "config.yaml")
    ckpt_path, _, _ = run_train(cfg, out_dir / "train")
    samples_path, _, _ = run_sample(cfg, ckpt_path, out_dir / "sample")
    report, _ = run_eval(cfg, samples_path, out_dir / "eval")
    artifacts = {
        "config": out_dir / "config.yaml",
        "checkpoint": ckpt_path,
        "samples": samples_path,
        "metrics": out_dir / "eval" / "metrics.txt",
    }
    _write_manifest(out_dir / "manifest.json", cfg, cfg["seed"], started, artifacts)
    return report


def cmd_repro(args):
    cfg = recipe_config(args.recipe, desk=args.desk, seed=args.seed or 0)
    if args.set:
        cfg = parse_config(apply_overrides(cfg, args.set))
    if args.no_figures:
        cfg = parse_config(apply_overrides(cfg, ["figures=false"]))
    suffix = "-desk" if args.desk else ""
    out_dir = _out_dir(args, f"{args.recipe}{suffix}")
    report = run_repro(cfg, out_dir)
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="rflow", description=__doc__)
    p.add_argument("--version", action="version", version=f"rflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="YAML experiment configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (section.key=value)")
        sp.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    sp = sub.add_parser("train", help="train a velocity model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="sample from a trained model")
    common(sp)
    sp.add_argument("checkpoint", help="checkpoint file")
    sp.add_argument("--n", type=int, default=None, help="number of samples")
    sp.add_argument("--solver", default=None, choices=["euler", "midpoint", "heun3", "rk4", "dopri5"])
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--guidance-weight", type=float, default=None)
    sp.add_argument("--guidance-class", type=int, default=None)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="metrics for a sample file")
    common(sp)
    sp.add_argument("--samples", required=True, help="model samples CSV")
    sp.add_argument("--groundtruth", default=None, help="ground-truth CSV (default: fresh draws)")
    sp.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("field", help="export the learned velocity field on a grid")
    common(sp)
    sp.add_argument("checkpoint", help="checkpoint file")
    sp.add_argument("--t", type=float, nargs="+", required=True, help="times to export")
    sp.add_argument("--resolution", type=int, default=25)
    sp.set_defaults(func=cmd_field)

    sp = sub.add_parser("repro", help="run a built-in toy experiment end to end")
    common(sp, config=False)
    sp.add_argument("recipe", help="recipe name (e.g. hypercube2, cup)")
    sp.add_argument("--desk", action="store_true", help="desk-scale settings")
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except _RUN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _BUILD_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
