"""Training objective and importance-sampling diagnostics.

All weight arithmetic happens in log space; the partition-function estimate
inside the loss is differentiated through (no stop-gradient), which is what
gives the symmetry-breaking parameter its training signal.
"""

import logging

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)


class LossConfig:
    def __init__(self, gamma=0.5, penalty=None):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        self.gamma = float(gamma)
        self.penalty = penalty


class WeightedBatch:
    """Samples with model log-density, target log-density and log-weights.

    ``penalty`` carries the per-sample cell-violation term evaluated at the
    flow output (before any de-canonicalization or modulation).
    """

    def __init__(self, x, log_q, log_p_unnorm, penalty=None):
        self.x = x
        self.log_q = ad.as_node(log_q)
        self.log_p_unnorm = ad.as_node(log_p_unnorm)
        self.penalty = None if penalty is None else ad.as_node(penalty)
        if not np.all(np.isfinite(self.log_w.value)):
            raise ValueError("non-finite log importance weights in batch")

    @property
    def size(self):
        return self.log_q.value.shape[0]

    @property
    def log_w(self):
        return ad.sub(self.log_p_unnorm, self.log_q)

    @property
    def x_values(self):
        return self.x.value if isinstance(self.x, ad.Node) else np.asarray(self.x)


def self_reparam_kl(batch, cfg):
    """Monte-Carlo self-reparametrized KL: reverse KL plus gamma ln Z_hat plus penalty."""
    n = batch.size
    if n == 1 and cfg.gamma > 0:
        logger.warning("single-sample batch with gamma > 0: partition estimate is degenerate")
    log_w = batch.log_w
    loss = ad.mean(ad.neg(log_w))
    if cfg.gamma != 0.0:
        log_z = ad.sub(ad.logsumexp(log_w), np.log(n))
        loss = ad.add(loss, ad.mul(log_z, cfg.gamma))
    if batch.penalty is not None:
        loss = ad.add(loss, ad.mean(batch.penalty))
    return loss


def _log_w_values(log_w):
    lw = log_w.value if isinstance(log_w, ad.Node) else np.asarray(log_w, dtype=np.float64)
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise ValueError("effective sample size undefined: no usable weights")
    return lw


def ess(log_w):
    """Normalized effective sample size (sum w)^2 / (N sum w^2), in log space."""
    lw = _log_w_values(log_w)
    m = lw.max()
    s1 = np.log(np.exp(lw - m).sum()) + m
    s2 = np.log(np.exp(2.0 * (lw - m)).sum()) + 2.0 * m
    return float(np.exp(2.0 * s1 - s2 - np.log(lw.size)))


def log_z_hat(log_w):
    """Log of the importance-weighted partition estimate, logsumexp(log w) - ln N."""
    lw = _log_w_values(log_w)
    m = lw.max()
    return float(np.log(np.exp(lw - m).sum()) + m - np.log(lw.size))


def breaking_ratio_estimate(x, classifier):
    """Empirical mode imbalance (N+ - N-) / (N+ + N-) under a +-1 classifier."""
    labels = np.asarray(classifier(np.asarray(x)))
    total = labels.size
    if total == 0:
        raise ValueError("cannot estimate a breaking ratio from zero samples")
    return float((labels == 1).sum() - (labels == -1).sum()) / total


def model_breaking_ratio(b):
    """Breaking ratio implied by the learned parameter, 1 - 2 exp(b)."""
    return 1.0 - 2.0 * float(np.exp(b))


def histogram_data(values, bins=60, value_range=None):
    """Bin a sample for external plotting; returns edges and counts."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins,
                                 range=value_range)
    return {"edges": edges.tolist(), "counts": counts.tolist(),
            "n_samples": int(np.asarray(values).size)}
