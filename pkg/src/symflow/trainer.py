"""Optimization loop: batch pipeline, Adam, plateau LR scheduler, grad checks.

One training step samples the prior, optionally canonicalizes, runs the flow,
applies the inverse map or the stochastic modulations, assembles the model
log-density, evaluates the self-reparametrized KL and takes an Adam step. The
graph is rebuilt from scratch every step.
"""

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import inference as inf
from .symmetry import SignFlipModulation, lift_to_complex

logger = logging.getLogger(__name__)


class TrainAbort(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainConfig:
    batch_size: int = 1000
    lr_init: float = 5e-4
    max_steps: int = 10_000
    gamma: float = 0.5
    seed: int = 0
    scheduler_window: int = 2000
    scheduler_factor: float = 0.92
    lr_floor: float = 1e-6
    checkpoint_every: int = 1000
    stop_ess: float | None = None
    stop_patience: int = 20

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 1 or self.scheduler_window < 1:
            raise ValueError("counts must be >= 1")
        if self.lr_floor > self.lr_init:
            raise ValueError("lr_floor must not exceed lr_init")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


class Sampler:
    """Bundles flow, symmetry treatment and target into a batch generator."""

    def __init__(self, flow_model, target, mode="none", canonicalizer=None,
                 modulations=(), penalty=None, complex_lift=False):
        if mode not in ("none", "canonicalization", "sesamo"):
            raise ValueError(f"unknown symmetry mode {mode!r}")
        if mode == "canonicalization" and canonicalizer is None:
            raise ValueError("canonicalization mode needs a canonicalizer")
        self.flow = flow_model
        self.target = target
        self.mode = mode
        self.canonicalizer = canonicalizer
        self.modulations = list(modulations)
        self.penalty = penalty
        self.complex_lift = complex_lift
        expected = target.dim // 2 if complex_lift else target.dim
        if flow_model.dim != expected:
            raise ValueError(f"flow dimension {flow_model.dim} does not match "
                             f"target dimension {target.dim} (lift={complex_lift})")

    def parameters(self):
        params = list(self.flow.parameters())
        for mod in self.modulations:
            params.extend(mod.parameters())
        return params

    def broken_modulation(self):
        for mod in self.modulations:
            if getattr(mod, "broken", False):
                return mod
        return None

    def clamp_parameters(self):
        for mod in self.modulations:
            if getattr(mod, "broken", False):
                mod.b.value = np.minimum(mod.b.value, SignFlipModulation.B_MAX)

    def batch(self, n, rng):
        """One sampled batch as (WeightedBatch, info dict)."""
        z, log_q0 = self.flow.prior.sample(n, rng)
        info = {}
        if self.mode == "canonicalization":
            z_c, branch = self.canonicalizer.canonicalize(z)
            flowed, logdet = self.flow.forward(ad.constant(z_c))
            penalty_vals = self.penalty(flowed) if self.penalty else None
            info["flow_output"] = flowed.value
            x = self.canonicalizer.decanonicalize(flowed, branch)
            log_ps = None
        else:
            flowed, logdet = self.flow.forward(ad.constant(z))
            penalty_vals = (self.penalty(flowed)
                            if self.penalty and self.mode == "sesamo" else None)
            info["flow_output"] = flowed.value
            x = flowed
            log_ps = None
            if self.mode == "sesamo":
                if self.complex_lift:
                    x = lift_to_complex(x)
                info["pre_modulation"] = x.value
                for mod in self.modulations:
                    u = mod.sample_u(n, rng)
                    x, lps = mod.apply(x, u)
                    log_ps = lps if log_ps is None else ad.add(log_ps, lps)
        log_q = ad.sub(ad.constant(log_q0), logdet)
        if log_ps is not None:
            log_q = ad.add(log_q, log_ps)
        log_p = self.target.log_prob_unnorm(x)
        batch = inf.WeightedBatch(x, log_q, log_p, penalty=penalty_vals)
        if self.penalty is not None:
            info["violation_rate"] = self.penalty.violation_rate(info["flow_output"])
        return batch, info

    def home_sign(self, info):
        """Majority class of the un-modulated samples under the target classifier."""
        classifier = getattr(self.target, "classifier", None)
        values = info.get("pre_modulation", info.get("flow_output"))
        if classifier is None or values is None:
            return None
        labels = classifier(values)
        return 1 if labels.sum() >= 0 else -1


class Adam:
    """Standard Adam; every trainable parameter appears exactly once."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate parameter names in optimizer: {dupes}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}
        self.t = 0

    def step(self, grads, lr):
        """Apply one update; skipped entirely if any gradient is non-finite."""
        for p in self.params:
            if not np.all(np.isfinite(grads[p.name])):
                logger.warning("skipping step: non-finite gradient for %s", p.name)
                return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            g = grads[p.name]
            self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            m_hat = self.m[p.name] / (1 - b1 ** self.t)
            v_hat = self.v[p.name] / (1 - b2 ** self.t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


class PlateauScheduler:
    """Cut the learning rate when the loss std stops decreasing across windows."""

    def __init__(self, lr_init, window=2000, factor=0.92, floor=1e-6):
        self.lr = float(lr_init)
        self.window = int(window)
        self.factor = float(factor)
        self.floor = float(floor)

    def update(self, losses):
        """Call once per step with the full loss history; returns the current lr."""
        n = len(losses)
        if n >= 2 * self.window and n % self.window == 0:
            current = np.std(losses[-self.window:])
            previous = np.std(losses[-2 * self.window:-self.window])
            if current >= previous:
                self.lr = max(self.lr * self.factor, self.floor)
        return self.lr


@dataclass
class TrainRun:
    config: TrainConfig
    metrics: list = field(default_factory=list)
    wall_seconds: float = 0.0
    final_loss: float = float("nan")

    def metric_series(self, key):
        return np.array([row[key] for row in self.metrics])


METRIC_FIELDS = ["step", "loss", "ess", "log_z_hat", "lr", "b",
                 "r_model", "r_empirical", "penalty_violation_rate"]


def train(sampler, cfg, checkpoint_hook=None):
    """Run the optimization loop; returns a TrainRun with per-step metrics.

    ``checkpoint_hook(step, sampler)`` is invoked every ``checkpoint_every``
    steps and at exit (used by the CLI to write checkpoint files).
    """
    rng = np.random.default_rng(cfg.seed)
    params = sampler.parameters()
    opt = Adam(params)
    sched = PlateauScheduler(cfg.lr_init, cfg.scheduler_window,
                             cfg.scheduler_factor, cfg.lr_floor)
    run = TrainRun(config=cfg)
    losses = []
    start = time.perf_counter()
    above_target = 0
    for step in range(1, cfg.max_steps + 1):
        try:
            batch, info = sampler.batch(cfg.batch_size, rng)
        except ValueError as err:
            raise TrainAbort(f"invalid batch at step {step}: {err}",
                             {"step": step}) from err
        loss = inf.self_reparam_kl(batch, inf.LossConfig(cfg.gamma))
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            snapshot = {"step": step, "loss": loss_val,
                        "log_q": batch.log_q.value[:8].tolist(),
                        "log_p": batch.log_p_unnorm.value[:8].tolist()}
            raise TrainAbort(f"non-finite loss at step {step}", snapshot)
        grads = ad.backward(loss, params=params)
        opt.step(grads, sched.lr)
        sampler.clamp_parameters()
        losses.append(loss_val)
        lr = sched.update(losses)

        row = dict.fromkeys(METRIC_FIELDS, float("nan"))
        row.update(step=step, loss=loss_val, lr=lr,
                   ess=inf.ess(batch.log_w), log_z_hat=inf.log_z_hat(batch.log_w))
        if "violation_rate" in info:
            row["penalty_violation_rate"] = info["violation_rate"]
        broken = sampler.broken_modulation()
        if broken is not None:
            home = sampler.home_sign(info) or 1
            row["b"] = float(broken.b.value)
            row["r_model"] = home * inf.model_breaking_ratio(broken.b.value)
        classifier = getattr(sampler.target, "classifier", None)
        if classifier is not None:
            row["r_empirical"] = inf.breaking_ratio_estimate(batch.x_values, classifier)
        run.metrics.append(row)

        if checkpoint_hook and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint_hook(step, sampler)
        if cfg.stop_ess is not None:
            above_target = above_target + 1 if row["ess"] >= cfg.stop_ess else 0
            if above_target >= cfg.stop_patience:
                break
    run.wall_seconds = time.perf_counter() - start
    run.final_loss = losses[-1]
    if checkpoint_hook:
        checkpoint_hook(len(losses), sampler)
    return run


def evaluate(sampler, n_samples=100_000, seed=12345, chunk=10_000):
    """Importance-sampling diagnostics on a freshly sampled set, chunked."""
    rng = np.random.default_rng(seed)
    log_w = []
    labels = []
    home_votes = 0
    violations = []
    classifier = getattr(sampler.target, "classifier", None)
    remaining = n_samples
    while remaining > 0:
        n = min(chunk, remaining)
        batch, info = sampler.batch(n, rng)
        log_w.append(batch.log_w.value)
        if classifier is not None:
            labels.append(classifier(batch.x_values))
            values = info.get("pre_modulation", info.get("flow_output"))
            home_votes += int(classifier(values).sum())
        if "violation_rate" in info:
            violations.append(info["violation_rate"] * n)
        remaining -= n
    log_w = np.concatenate(log_w)
    report = {
        "n_samples": int(n_samples),
        "ess": inf.ess(log_w),
        "log_z_hat": inf.log_z_hat(log_w),
        "r_empirical": float("nan"),
        "r_model": float("nan"),
        "b": float("nan"),
        "penalty_violation_rate": (float(np.sum(violations) / n_samples)
                                   if violations else float("nan")),
    }
    if labels:
        labels = np.concatenate(labels)
        report["r_empirical"] = float((labels == 1).sum() - (labels == -1).sum()) / labels.size
    broken = sampler.broken_modulation()
    if broken is not None:
        home = 1 if home_votes >= 0 else -1
        report["b"] = float(broken.b.value)
        report["r_model"] = home * inf.model_breaking_ratio(broken.b.value)
    return report


def grad_check(loss_fn, params, tolerance=1e-5, step=1e-6):
    """Central finite differences against analytic gradients for small models."""
    total = sum(p.value.size for p in params)
    if total > 1000:
        raise ValueError(f"grad_check is meant for small models ({total} parameters)")
    grads = ad.backward(loss_fn(), params=params)
    report = {"max_rel_err": 0.0, "per_param": {}, "tolerance": tolerance}
    for p in params:
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().value)
            flat[i] = orig - step
            fm = float(loss_fn().value)
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            analytic = grads[p.name].reshape(-1)[i]
            rel = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
        report["per_param"][p.name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    report["passed"] = report["max_rel_err"] < tolerance
    return report
