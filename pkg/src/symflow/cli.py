"""Command-line front end: run, evaluate, reproduce-table, histogram, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import csv
import json
import os
import sys
from concurrent import futures
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint as ckpt
from . import configio
from . import flow as fl
from . import inference as inf
from . import symmetry as sym
from . import targets as tg
from . import trainer as tr
from .configio import ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

OBSERVABLES = ("magnetization", "component_<i>", "re_sum", "im_sum")


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=tr.METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def execute_run(cfg, out_dir):
    """Train per config and write metrics.csv, checkpoints and manifest.json.

    The final metrics row is the post-training evaluation on
    output.eval_samples fresh samples (loss and lr are left empty there).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler, train_cfg, output = configio.build_experiment(cfg)

    def hook(step, current):
        ckpt.save_checkpoint(out_dir / f"checkpoint_{step:06d}.npz", cfg,
                             current.parameters(), step=step)

    run = tr.train(sampler, train_cfg, checkpoint_hook=hook)
    ckpt.save_checkpoint(out_dir / "checkpoint_final.npz", cfg,
                         sampler.parameters(), step=len(run.metrics))

    report = tr.evaluate(sampler, n_samples=int(output["eval_samples"]),
                         seed=train_cfg.seed + 1_000_003)
    final_row = dict.fromkeys(tr.METRIC_FIELDS, float("nan"))
    final_row.update(step=len(run.metrics), ess=report["ess"],
                     log_z_hat=report["log_z_hat"], b=report["b"],
                     r_model=report["r_model"], r_empirical=report["r_empirical"],
                     penalty_violation_rate=report["penalty_violation_rate"])
    _write_metrics(out_dir / "metrics.csv", run.metrics + [final_row])

    manifest = {"schema_version": configio.SCHEMA_VERSION, "code_version": __version__,
                "config": cfg, "seed": train_cfg.seed, "steps_run": len(run.metrics),
                "wall_seconds": run.wall_seconds, "evaluation": report}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
    return report


def cmd_run(args):
    cfg = configio.load_config(args.config)
    if args.paper_scale:
        cfg = configio.apply_paper_scale(cfg)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    out_dir = args.out or cfg["output"]["directory"]
    if not out_dir:
        raise ConfigError("output.directory", "no output directory (set it or pass --out)")
    report = execute_run(cfg, out_dir)
    print(json.dumps(report, default=_json_default))
    return EXIT_OK


def _load_sampler_from_checkpoint(path):
    meta, params = ckpt.load_checkpoint(path)
    sampler, train_cfg, output = configio.build_experiment(meta["config"])
    ckpt.restore_parameters(sampler, params)
    return sampler, train_cfg, output, meta


def cmd_evaluate(args):
    sampler, train_cfg, output, meta = _load_sampler_from_checkpoint(args.checkpoint)
    n = args.samples or int(output["eval_samples"])
    report = tr.evaluate(sampler, n_samples=n, seed=args.seed)
    report["report_version"] = 1
    report["checkpoint"] = str(args.checkpoint)
    report["target"] = meta["config"]["target"]
    if isinstance(sampler.target, tg.HubbardTarget):
        report["r_oracle"] = sampler.target.quadrature_breaking_ratio()
    text = json.dumps(report, indent=2, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def observable_values(target, x, name):
    x = np.asarray(x)
    if name == "magnetization":
        if hasattr(target, "magnetization"):
            return target.magnetization(x)
        return x.sum(axis=1) / x.shape[1]
    if name.startswith("component_"):
        idx = int(name.split("_", 1)[1])
        if not 0 <= idx < x.shape[1]:
            raise ValueError(f"component index {idx} out of range for dim {x.shape[1]}")
        return x[:, idx]
    if name in ("re_sum", "im_sum"):
        if not (isinstance(target, tg.Phi4Target) and target.complex_field):
            raise ValueError(f"{name} needs a complex-field target")
        half = target.volume
        cols = x[:, :half] if name == "re_sum" else x[:, half:]
        return cols.sum(axis=1)
    raise ValueError(f"unknown observable {name!r}; valid: {', '.join(OBSERVABLES)}")


def cmd_histogram(args):
    sampler, train_cfg, output, meta = _load_sampler_from_checkpoint(args.checkpoint)
    try:
        probe = observable_values(sampler.target, np.zeros((1, sampler.target.dim)),
                                  args.observable)
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.default_rng(args.seed)
    values = []
    remaining = args.samples or int(output["eval_samples"])
    while remaining > 0:
        n = min(10_000, remaining)
        batch, _ = sampler.batch(n, rng)
        values.append(observable_values(sampler.target, batch.x_values, args.observable))
        remaining -= n
    data = inf.histogram_data(np.concatenate(values), bins=args.bins)
    data["observable"] = args.observable
    text = json.dumps(data, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


SUITES = {
    "gmm": ["gmm_realnvp", "gmm_canonicalization", "gmm_sesamo"],
    "hubbard": ["hubbard_realnvp", "hubbard_canonicalization", "hubbard_sesamo"],
    "phi4_real": ["phi4_real_canonicalization", "phi4_real_sesamo"],
    "phi4_complex_small": ["phi4_complex_realnvp", "phi4_complex_sesamo"],
}


def bundled_config_path(name):
    path = resources.files("symflow").joinpath("configs", f"{name}.yaml")
    if not path.is_file():
        raise ConfigError("suite", f"bundled config {name}.yaml not found")
    return path


def _run_cell(payload):
    """Worker for reproduce-table: one (config, seed) run in its own directory."""
    name, cfg, seed, out_dir = payload
    cfg = json.loads(cfg)
    cfg["train"]["seed"] = seed
    try:
        report = execute_run(cfg, out_dir)
        return name, seed, report["ess"], None
    except Exception as err:  # partial failures are recorded per cell
        return name, seed, float("nan"), f"{type(err).__name__}: {err}"


def cmd_reproduce_table(args):
    if args.suite not in SUITES:
        raise ConfigError("suite", f"must be one of {sorted(SUITES)}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for name in SUITES[args.suite]:
        with bundled_config_path(name).open() as fh:
            import yaml
            cfg = configio.normalize_config(yaml.safe_load(fh))
        if args.paper_scale:
            cfg = configio.apply_paper_scale(cfg)
        for seed in seeds:
            jobs.append((name, json.dumps(cfg), seed,
                         str(out_dir / name / f"seed{seed}")))

    os.environ.setdefault("OMP_NUM_THREADS", "1")
    results = {}
    workers = min(len(jobs), args.jobs)
    if workers > 1:
        with futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for name, seed, ess, err in pool.map(_run_cell, jobs):
                results.setdefault(name, []).append((seed, ess, err))
    else:
        for job in jobs:
            name, seed, ess, err = _run_cell(job)
            results.setdefault(name, []).append((seed, ess, err))

    table_path = out_dir / "table.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "seeds", "ess_mean", "ess_std", "n_ok", "failures"])
        for name in SUITES[args.suite]:
            cells = results.get(name, [])
            ok = [ess for _, ess, err in cells if err is None and np.isfinite(ess)]
            failures = "; ".join(f"seed{seed}: {err}" for seed, _, err in cells if err)
            writer.writerow([name, ",".join(str(s) for s, _, _ in cells),
                             np.mean(ok) if ok else float("nan"),
                             np.std(ok) if ok else float("nan"), len(ok), failures])
    print(table_path)
    return EXIT_OK


def cmd_grad_check(args):
    """Finite-difference verification of a small end-to-end model."""
    rng = np.random.default_rng(args.seed)
    target = tg.GaussianTarget(2, mean=1.0)
    model = fl.build_flow(2, 2, 1, 6, "tanh", rng)
    for p in model.parameters():
        p.value = p.value + 0.2 * rng.standard_normal(p.value.shape)
    mod = sym.SignFlipModulation(broken=True, b_init=np.log(0.4))
    penalty = sym.Penalty([sym.half_space_lambda])
    z, log_q0 = model.prior.sample(32, rng)
    u = mod.sample_u(32, rng)

    def loss_fn():
        x, logdet = model.forward(ad.constant(z))
        pen = penalty(x)
        x, log_ps = mod.apply(x, u)
        log_q = ad.add(ad.sub(ad.constant(log_q0), logdet), log_ps)
        batch = inf.WeightedBatch(x, log_q, target.log_prob_unnorm(x), penalty=pen)
        return inf.self_reparam_kl(batch, inf.LossConfig(0.5))

    report = tr.grad_check(loss_fn, model.parameters() + [mod.b],
                           tolerance=args.tolerance)
    print(json.dumps({"max_rel_err": report["max_rel_err"],
                      "tolerance": report["tolerance"], "passed": report["passed"]},
                     default=_json_default))
    return EXIT_OK if report["passed"] else EXIT_RUNTIME


def build_parser():
    parser = argparse.ArgumentParser(prog="symflow",
                                     description="Symmetry-aware normalizing flows "
                                                 "for Boltzmann sampling")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="importance-sampling report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce-table", help="train a suite over seeds, tabulate ESS")
    p.add_argument("--suite", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_reproduce_table)

    p = sub.add_parser("histogram", help="observable histogram data from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--observable", required=True)
    p.add_argument("--bins", type=int, default=60)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("grad-check", help="finite-difference check of a small model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
