"""Experiment configuration: YAML schema, validation, and object assembly.

A config file has five blocks (target, flow, symmetry, train, output) plus a
schema_version field. Validation reports the offending field by dotted path;
``build_experiment`` turns a validated config into a ready Sampler and
TrainConfig.
"""

import numpy as np
import yaml

from . import flow as fl
from . import symmetry as sym
from . import targets as tg
from .trainer import Sampler, TrainConfig

SCHEMA_VERSION = 1

LN_HALF = float(np.log(0.5))


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _require(cond, field, message):
    if not cond:
        raise ConfigError(field, message)


def _get(block, key, default=None):
    value = block.get(key, default)
    return default if value is None else value


def load_config(path):
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    _require(isinstance(cfg, dict), "<root>", "config must be a mapping")
    return normalize_config(cfg)


TARGET_FIELDS = {
    "gaussian": {"dim", "mean", "var"},
    "gmm": {"n_modes", "radius"},
    "phi4_real": {"shape", "kappa", "lam_c", "alpha"},
    "phi4_complex": {"shape", "kappa", "lam_c", "alpha"},
    "hubbard": {"u_coupling", "beta", "kappa_hop"},
}

MODULATION_KINDS = {"identity", "z2_exact", "z2_broken", "zM", "u1_exact", "u1_broken"}


def normalize_config(cfg):
    """Validate a raw config mapping and fill in defaults."""
    cfg = dict(cfg)
    version = cfg.setdefault("schema_version", SCHEMA_VERSION)
    _require(version == SCHEMA_VERSION, "schema_version", f"expected {SCHEMA_VERSION}")

    target = dict(cfg.get("target") or {})
    kind = target.get("kind")
    _require(kind in TARGET_FIELDS, "target.kind",
             f"must be one of {sorted(TARGET_FIELDS)}, got {kind!r}")
    unknown = set(target) - TARGET_FIELDS[kind] - {"kind"}
    _require(not unknown, f"target.{sorted(unknown)[0]}" if unknown else "target",
             f"unknown field for target kind {kind!r}")
    if kind == "gmm":
        _require(int(_get(target, "n_modes", 8)) >= 1, "target.n_modes", "must be >= 1")
        _require(float(_get(target, "radius", 12.0)) >= 0, "target.radius", "must be >= 0")
    if kind in ("phi4_real", "phi4_complex"):
        shape = _get(target, "shape", [8, 4])
        _require(isinstance(shape, (list, tuple)) and len(shape) == 2
                 and all(int(s) >= 2 for s in shape), "target.shape",
                 "must be two lattice extents >= 2")
        target["shape"] = [int(s) for s in shape]
    if kind == "hubbard":
        _require(float(_get(target, "u_coupling", 4.0)) > 0, "target.u_coupling",
                 "must be positive")
        _require(float(_get(target, "beta", 2.0)) > 0, "target.beta", "must be positive")
    if kind == "gaussian":
        _require(float(_get(target, "var", 1.0)) > 0, "target.var", "must be positive")
    cfg["target"] = target

    flow_block = dict(cfg.get("flow") or {})
    flow_block.setdefault("n_couplings", 6)
    flow_block.setdefault("n_layers", 4)
    flow_block.setdefault("n_neurons", 40)
    flow_block.setdefault("activation", "relu")
    flow_block.setdefault("scale_cap", 2.0)
    for key in ("n_couplings", "n_layers", "n_neurons"):
        _require(int(flow_block[key]) >= 1, f"flow.{key}", "must be >= 1")
    _require(flow_block["activation"] in fl.ACTIVATIONS, "flow.activation",
             f"must be one of {sorted(fl.ACTIVATIONS)}")
    cfg["flow"] = flow_block

    symmetry = dict(cfg.get("symmetry") or {})
    mode = symmetry.setdefault("mode", "none")
    _require(mode in ("none", "canonicalization", "sesamo"), "symmetry.mode",
             "must be none, canonicalization or sesamo")
    mods = symmetry.setdefault("modulations", [])
    _require(isinstance(mods, list), "symmetry.modulations", "must be a list")
    for i, mod in enumerate(mods):
        mkind = (mod or {}).get("kind")
        _require(mkind in MODULATION_KINDS, f"symmetry.modulations[{i}].kind",
                 f"must be one of {sorted(MODULATION_KINDS)}")
        if mkind == "zM":
            _require(int(mod.get("n_branches", 0)) >= 2,
                     f"symmetry.modulations[{i}].n_branches", "must be >= 2")
        if mkind == "z2_broken":
            b_init = float(mod.get("b_init", LN_HALF))
            _require(b_init < 0, f"symmetry.modulations[{i}].b_init", "must be negative")
    if mode == "sesamo":
        _require(len(mods) >= 1, "symmetry.modulations",
                 "sesamo mode needs at least one modulation")
    penalty = dict(symmetry.get("penalty") or {})
    penalty.setdefault("enabled", True)
    penalty.setdefault("amplitude", 100.0)
    penalty.setdefault("gradient_scale", 10.0)
    _require(float(penalty["amplitude"]) > 0, "symmetry.penalty.amplitude",
             "must be positive")
    symmetry["penalty"] = penalty
    cfg["symmetry"] = symmetry

    train = dict(cfg.get("train") or {})
    defaults = {"batch_size": 1000, "lr_init": 5e-4, "max_steps": 10_000, "gamma": 0.5,
                "seed": 0, "prior_mean": 0.0, "prior_var": 1.0, "scheduler_window": 2000,
                "scheduler_factor": 0.92, "lr_floor": 1e-6, "checkpoint_every": 1000,
                "stop_ess": None, "stop_patience": 20}
    for key, val in defaults.items():
        train.setdefault(key, val)
    _require(float(train["prior_var"]) > 0, "train.prior_var", "must be positive")
    _require(0.0 <= float(train["gamma"]) <= 1.0, "train.gamma", "must lie in [0, 1]")
    for key in ("batch_size", "max_steps", "scheduler_window"):
        _require(int(train[key]) >= 1, f"train.{key}", "must be >= 1")
    _require(float(train["lr_floor"]) <= float(train["lr_init"]), "train.lr_floor",
             "must not exceed lr_init")
    cfg["train"] = train

    output = dict(cfg.get("output") or {})
    output.setdefault("eval_samples", 100_000)
    output.setdefault("directory", None)
    _require(int(output["eval_samples"]) >= 1, "output.eval_samples", "must be >= 1")
    cfg["output"] = output
    return cfg


def _build_target(block):
    kw = {k: v for k, v in block.items() if k != "kind"}
    if "shape" in kw:
        kw["shape"] = tuple(kw["shape"])
    return tg.build_target(block["kind"], **kw)


def _build_modulations(mod_blocks):
    mods = []
    for i, block in enumerate(mod_blocks):
        kind = block["kind"]
        name = f"mod{i}_{kind}"
        if kind == "identity":
            mods.append(sym.IdentityModulation())
        elif kind == "z2_exact":
            mods.append(sym.SignFlipModulation(broken=False,
                                               component=block.get("component"), name=name))
        elif kind == "z2_broken":
            mods.append(sym.SignFlipModulation(broken=True,
                                               b_init=float(block.get("b_init", LN_HALF)),
                                               component=block.get("component"), name=name))
        elif kind == "zM":
            mods.append(sym.RotationModulation(int(block["n_branches"])))
        elif kind == "u1_exact":
            mods.append(sym.PhaseModulation())
        elif kind == "u1_broken":
            spline = fl.SplineMap(name=f"{name}/spline", n_bins=int(block.get("n_bins", 8)))
            mods.append(sym.PhaseModulation(spline))
    return mods


def _auto_canonicalizer(target):
    if isinstance(target, tg.GmmTarget):
        return sym.SectorCanonicalizer(target.n_modes)
    if isinstance(target, tg.HubbardTarget):
        return sym.ComponentSignCanonicalizer([+1.0, -1.0])
    if isinstance(target, tg.Phi4Target) and not target.complex_field:
        return sym.SignCanonicalizer()
    if isinstance(target, tg.GaussianTarget):
        return sym.SignCanonicalizer()
    raise ConfigError("symmetry.mode",
                      "canonicalization is not applicable to this target")


def _auto_penalty_lambdas(mode, target, canonicalizer, modulations):
    if mode == "canonicalization":
        if isinstance(canonicalizer, sym.SectorCanonicalizer):
            return sym.sector_lambda_pair(canonicalizer.M)
        if isinstance(canonicalizer, sym.ComponentSignCanonicalizer):
            return [sym.component_lambda(i, s)
                    for i, s in enumerate(canonicalizer.signs)]
        return [sym.half_space_lambda]
    lambdas = []
    for mod in modulations:
        if isinstance(mod, sym.RotationModulation):
            lambdas.extend(sym.sector_lambda_pair(mod.M))
        elif isinstance(mod, sym.PhaseModulation):
            lambdas.append(sym.half_space_lambda)
        elif isinstance(mod, sym.SignFlipModulation):
            if mod.component is None:
                lambdas.append(sym.component_lambda(0, +1.0))
            else:
                lambdas.append(sym.component_lambda(mod.component, -1.0))
    return lambdas


def build_experiment(cfg):
    """Construct (sampler, train_config, output_block) from a normalized config."""
    cfg = normalize_config(cfg)
    target = _build_target(cfg["target"])
    mode = cfg["symmetry"]["mode"]
    modulations = _build_modulations(cfg["symmetry"]["modulations"]) if mode == "sesamo" else []

    complex_lift = (isinstance(target, tg.Phi4Target) and target.complex_field
                    and any(isinstance(m, sym.PhaseModulation) for m in modulations))
    if any(isinstance(m, sym.PhaseModulation) for m in modulations):
        _require(complex_lift, "symmetry.modulations",
                 "u1 modulations need a phi4_complex target")
    flow_dim = target.volume if complex_lift else target.dim

    fb = cfg["flow"]
    tb = cfg["train"]
    rng = np.random.default_rng(int(tb["seed"]))
    if isinstance(target, tg.Phi4Target):
        channels = 1 if (complex_lift or not target.complex_field) else 2
        masks = fl.checkerboard_masks(target.shape, int(fb["n_couplings"]), channels)
    else:
        masks = None
    prior_mean = tb["prior_mean"]
    if isinstance(prior_mean, (list, tuple)):
        prior_mean = np.asarray(prior_mean, dtype=np.float64)
        _require(prior_mean.size == flow_dim, "train.prior_mean",
                 f"needs {flow_dim} entries")
    model = fl.build_flow(flow_dim, int(fb["n_couplings"]), int(fb["n_layers"]),
                          int(fb["n_neurons"]), fb["activation"], rng, masks=masks,
                          prior_mean=prior_mean, prior_var=float(tb["prior_var"]),
                          scale_cap=float(fb["scale_cap"]))

    canonicalizer = _auto_canonicalizer(target) if mode == "canonicalization" else None
    pb = cfg["symmetry"]["penalty"]
    penalty = None
    if pb["enabled"] and mode in ("canonicalization", "sesamo"):
        lambdas = _auto_penalty_lambdas(mode, target, canonicalizer, modulations)
        if lambdas:
            penalty = sym.Penalty(lambdas, amplitude=float(pb["amplitude"]),
                                  gradient_scale=float(pb["gradient_scale"]))

    sampler = Sampler(model, target, mode=mode, canonicalizer=canonicalizer,
                      modulations=modulations, penalty=penalty, complex_lift=complex_lift)
    train_cfg = TrainConfig(
        batch_size=int(tb["batch_size"]), lr_init=float(tb["lr_init"]),
        max_steps=int(tb["max_steps"]), gamma=float(tb["gamma"]), seed=int(tb["seed"]),
        scheduler_window=int(tb["scheduler_window"]),
        scheduler_factor=float(tb["scheduler_factor"]), lr_floor=float(tb["lr_floor"]),
        checkpoint_every=int(tb["checkpoint_every"]),
        stop_ess=None if tb["stop_ess"] is None else float(tb["stop_ess"]),
        stop_patience=int(tb["stop_patience"]))
    return sampler, train_cfg, cfg["output"]


PAPER_SCALE = {
    "gmm": {"batch_size": 8000, "max_steps": 10_000},
    "gaussian": {"batch_size": 8000, "max_steps": 10_000},
    "phi4_real": {"batch_size": 8000, "max_steps": 100_000, "shape": [16, 8]},
    "phi4_complex": {"batch_size": 8000, "max_steps": 400_000, "shape": [8, 8],
                     "n_neurons": 100},
    "phi4_complex_small": {},
    "hubbard": {"batch_size": 8000, "max_steps": 6000},
}


def apply_paper_scale(cfg):
    """Swap desk-scale batch/steps/lattice for the published settings."""
    cfg = normalize_config(cfg)
    scale = PAPER_SCALE.get(cfg["target"]["kind"], {})
    if "batch_size" in scale:
        cfg["train"]["batch_size"] = scale["batch_size"]
        cfg["train"]["max_steps"] = scale["max_steps"]
        cfg["train"]["stop_ess"] = None
    if "shape" in scale:
        cfg["target"]["shape"] = scale["shape"]
    if "n_neurons" in scale:
        cfg["flow"]["n_neurons"] = scale["n_neurons"]
    return cfg
