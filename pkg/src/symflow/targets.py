"""Unnormalized target log-densities with their analytic oracles.

Targets expose ``log_prob_unnorm`` on graph nodes (so actions are
differentiable for training) plus plain-array oracles used by tests and
diagnostics: the exact Gaussian-mixture density, the closed-form 2x1 Hubbard
density, quadrature mass splits, and the analytic breaking ratio of the
tilted bimodal magnetization profile.
"""

import numpy as np
from scipy import integrate, optimize, special

from . import autodiff as ad


class InvalidRegimeError(RuntimeError):
    pass


class GmmTarget:
    """N equal Gaussians on a circle of radius R; normalized by construction."""

    def __init__(self, n_modes=8, radius=12.0):
        if n_modes < 1 or radius < 0:
            raise ValueError("need n_modes >= 1 and radius >= 0")
        self.n_modes = int(n_modes)
        self.radius = float(radius)
        k = np.arange(1, self.n_modes + 1)
        self.means = self.radius * np.stack(
            [np.cos(2 * np.pi * k / self.n_modes), np.sin(2 * np.pi * k / self.n_modes)], axis=1)
        self.dim = 2
        self.classifier = None

    def log_prob_unnorm(self, x):
        x = ad.as_node(x)
        cols = []
        for mu in self.means:
            diff = ad.sub(x, ad.constant(mu))
            cols.append(ad.reshape(ad.mul(ad.sum(ad.mul(diff, diff), axis=1), -0.5), (-1, 1)))
        lse = ad.logsumexp(ad.concat(cols, axis=1), axis=1)
        return ad.sub(lse, np.log(2 * np.pi * self.n_modes))

    def log_density(self, x):
        return self.log_prob_unnorm(ad.constant(np.asarray(x))).value


class GaussianTarget:
    """Isotropic normal with exact (normalized) log density; Z = 1."""

    def __init__(self, dim, mean=0.0, var=1.0):
        if var <= 0:
            raise ValueError("variance must be positive")
        self.dim = int(dim)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (self.dim,)).copy()
        self.var = float(var)
        self.classifier = None

    def log_prob_unnorm(self, x):
        x = ad.as_node(x)
        diff = ad.sub(x, ad.constant(self.mean))
        quad = ad.sum(ad.mul(diff, diff), axis=1)
        norm = self.dim * np.log(2.0 * np.pi * self.var)
        return ad.mul(ad.add(ad.mul(quad, 1.0 / self.var), norm), -0.5)


class Phi4Target:
    """Scalar phi^4 lattice action with periodic boundaries.

    Real fields use one channel, complex fields two stacked channels
    [re | im] with the U(1)-invariant conjugated nearest-neighbour bilinear;
    the alpha term couples to the real channel and breaks the symmetry.
    """

    def __init__(self, shape, kappa, lam_c, alpha=0.0, complex_field=False):
        self.shape = tuple(int(s) for s in shape)
        if len(self.shape) != 2:
            raise ValueError("phi^4 lattice must be two-dimensional")
        self.kappa = float(kappa)
        self.lam_c = float(lam_c)
        self.alpha = float(alpha)
        self.complex_field = bool(complex_field)
        self.volume = self.shape[0] * self.shape[1]
        self.dim = 2 * self.volume if complex_field else self.volume
        self.classifier = None if complex_field else magnetization_sign

    def _channels(self, x):
        n = x.value.shape[0]
        if x.value.shape[1] != self.dim:
            raise ValueError(f"expected fields of dimension {self.dim}, got {x.value.shape[1]}")
        h, w = self.shape
        if self.complex_field:
            re = ad.reshape(x[:, : self.volume], (n, h, w))
            im = ad.reshape(x[:, self.volume:], (n, h, w))
            return re, im
        return ad.reshape(x, (n, h, w)), None

    @staticmethod
    def _neighbor_sum(field):
        return ad.add(ad.roll(field, -1, axis=1), ad.roll(field, -1, axis=2))

    def action(self, x):
        x = ad.as_node(x)
        re, im = self._channels(x)
        kin = ad.mul(re, self._neighbor_sum(re))
        quad = ad.mul(re, re)
        if im is not None:
            kin = ad.add(kin, ad.mul(im, self._neighbor_sum(im)))
            quad = ad.add(quad, ad.mul(im, im))
        site = ad.add(ad.mul(kin, -2.0 * self.kappa),
                      ad.add(ad.mul(quad, 1.0 - 2.0 * self.lam_c),
                             ad.mul(ad.power(quad, 2.0), self.lam_c)))
        if self.alpha != 0.0:
            site = ad.add(site, ad.mul(re, self.alpha))
        return ad.sum(site, axis=(1, 2))

    def log_prob_unnorm(self, x):
        return ad.neg(self.action(x))

    def magnetization(self, x):
        """Mean field value per sample; the real channel for complex fields."""
        x = np.asarray(x)
        if self.complex_field:
            return x[:, : self.volume].sum(axis=1) / self.volume
        return x.sum(axis=1) / self.volume


def magnetization_sign(x):
    return np.where(np.asarray(x).sum(axis=1) >= 0, 1, -1)


def diagonal_pair_sign(x):
    """+1 for the main-diagonal mode pair (x1*x2 > 0), -1 for the anti-diagonal."""
    x = np.asarray(x)
    return np.where(x[:, 0] * x[:, 1] >= 0, 1, -1)


class HubbardTarget:
    """2x1 Hubbard model auxiliary-field action at a single time slice.

    The fermion matrix is M[x] = I + e^h diag(e^{x_j}) with hopping matrix
    h = kappa_t on the off-diagonal; the action couples both determinants,
    f = x.x/(2*u_tilde) - ln det M[x] - ln det M[-x], and is exactly
    proportional to the closed-form density hh(x) hh(-x) exp(-|x|^2/(U beta))
    with u_tilde = U beta / 2.
    """

    def __init__(self, u_coupling=4.0, beta=2.0, kappa_hop=1.0):
        self.u_coupling = float(u_coupling)
        self.beta = float(beta)
        self.kappa_hop = float(kappa_hop)
        self.kappa_t = self.kappa_hop * self.beta
        self.u_tilde = 0.5 * self.u_coupling * self.beta
        self.dim = 2
        self.classifier = diagonal_pair_sign

    def fermion_matrix(self, x):
        """Stack of 2x2 fermion matrices for a batch of auxiliary fields."""
        x = ad.as_node(x)
        n = x.value.shape[0]
        c, s = np.cosh(self.kappa_t), np.sinh(self.kappa_t)
        e1 = ad.exp(x[:, 0:1])
        e2 = ad.exp(x[:, 1:2])
        entries = ad.concat([ad.add(ad.mul(e1, c), 1.0), ad.mul(e2, s),
                             ad.mul(e1, s), ad.add(ad.mul(e2, c), 1.0)], axis=1)
        return ad.reshape(entries, (n, 2, 2))

    def action(self, x):
        x = ad.as_node(x)
        gauss = ad.mul(ad.sum(ad.mul(x, x), axis=1), 1.0 / (2.0 * self.u_tilde))
        ld_pos, sign_pos = ad.logdet(self.fermion_matrix(x))
        ld_neg, sign_neg = ad.logdet(self.fermion_matrix(ad.neg(x)))
        if np.any(sign_pos * sign_neg <= 0):
            raise InvalidRegimeError("fermion determinant product is not positive")
        return ad.sub(gauss, ad.add(ld_pos, ld_neg))

    def log_prob_unnorm(self, x):
        return ad.neg(self.action(x))

    def analytic_log_density(self, x):
        """Closed-form unnormalized log density, exact for the 2x1 volume."""
        x = np.asarray(x, dtype=np.float64)
        hh = lambda v: (np.cosh(0.5 * (v[..., 0] + v[..., 1]))
                        + np.cosh(0.5 * (v[..., 0] - v[..., 1])) * np.cosh(self.kappa_t))
        gauss = (x ** 2).sum(axis=-1) / (self.u_coupling * self.beta)
        return np.log(hh(x)) + np.log(hh(-x)) - gauss

    def quadrature_masses(self, n_grid=2501):
        """Normalized probability mass of the two diagonal mode classes."""
        ub = self.u_coupling * self.beta
        half_width = 2.0 * ub + 8.0 * np.sqrt(ub) + 4.0 * self.kappa_t + 10.0
        pts = np.linspace(-half_width, half_width, n_grid)
        xx, yy = np.meshgrid(pts, pts, indexing="ij")
        grid = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=-1)
        logp = self.analytic_log_density(grid)
        dens = np.exp(logp - logp.max()).reshape(n_grid, n_grid)
        edge = max(dens[0, :].max(), dens[-1, :].max(), dens[:, 0].max(), dens[:, -1].max())
        if edge > 1e-12 * dens.max():
            raise ValueError("quadrature box too small for the chosen couplings")
        main = np.where((xx * yy) >= 0, dens, 0.0)
        m_main = np.trapezoid(np.trapezoid(main, pts, axis=1), pts)
        m_total = np.trapezoid(np.trapezoid(dens, pts, axis=1), pts)
        m_plus = m_main / m_total
        return m_plus, 1.0 - m_plus

    def quadrature_breaking_ratio(self):
        """(mass_main - mass_anti) / total for the diagonal-pair classifier."""
        m_plus, m_minus = self.quadrature_masses()
        return m_plus - m_minus


class Phi4FitParams:
    """Bimodal magnetization profile parameters (amplitude, location, width, volume)."""

    def __init__(self, amplitude, mu, sigma, volume):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.amplitude = float(amplitude)
        self.mu = float(mu)
        self.sigma = float(sigma)
        self.volume = float(volume)

    def profile(self, m, alpha=0.0):
        """Tilted two-Gaussian magnetization density, unnormalized."""
        m = np.asarray(m, dtype=np.float64)
        tilt = -alpha * self.volume * m
        # combined exponents stay bounded above even where the tilt alone overflows
        return self.amplitude * (np.exp(-((m - self.mu) ** 2) / (2 * self.sigma ** 2) + tilt)
                                 + np.exp(-((m + self.mu) ** 2) / (2 * self.sigma ** 2) + tilt))


def breaking_ratio_analytic(fit, alpha):
    """Closed-form mode imbalance R(alpha) of the tilted bimodal profile.

    R = (N+ - N-)/(N+ + N-) with N± the profile mass on each half line;
    evaluated in a form stable for large alpha*V*mu.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    sigma, mu, volume = fit.sigma, fit.mu, fit.volume
    y = volume * alpha * mu
    tau_minus = sigma / np.sqrt(2.0) * (volume * alpha - mu / sigma ** 2)
    tau_plus = sigma / np.sqrt(2.0) * (volume * alpha + mu / sigma ** 2)
    decay = np.exp(-2.0 * y)
    num = decay * (1.0 + special.erf(tau_minus)) + (1.0 + special.erf(tau_plus))
    return 1.0 - num / (1.0 + decay)


def breaking_ratio_quadrature(fit, alpha):
    """Half-line quadrature oracle for the breaking ratio."""
    n_minus, _ = integrate.quad(lambda m: fit.profile(m, alpha), -np.inf, 0.0)
    n_plus, _ = integrate.quad(lambda m: fit.profile(m, alpha), 0.0, np.inf)
    return (n_plus - n_minus) / (n_plus + n_minus)


def fit_magnetization_profile(mags, volume, n_bins=80):
    """Fit the symmetric two-Gaussian profile to a magnetization sample."""
    mags = np.asarray(mags, dtype=np.float64)
    counts, edges = np.histogram(mags, bins=n_bins, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])

    def model(m, amplitude, mu, sigma):
        return amplitude * (np.exp(-((m - mu) ** 2) / (2 * sigma ** 2))
                            + np.exp(-((m + mu) ** 2) / (2 * sigma ** 2)))

    mu0 = np.abs(mags).mean()
    sigma0 = max(np.abs(mags).std(), 1e-3)
    amp0 = counts.max() if counts.max() > 0 else 1.0
    popt, pcov = optimize.curve_fit(model, centers, counts, p0=[amp0, mu0, sigma0],
                                    maxfev=20000)
    amplitude, mu, sigma = popt
    fit = Phi4FitParams(amplitude, abs(mu), abs(sigma), volume)
    fit.param_cov = pcov  # (amplitude, mu, sigma) covariance from the fit
    return fit


def breaking_ratio_fit_sigma(fit, alpha, step=1e-4):
    """Propagate the (mu, sigma) fit covariance into R(alpha)."""
    cov = getattr(fit, "param_cov", None)
    if cov is None:
        return 0.0
    grads = []
    for attr in ("mu", "sigma"):
        bumped = Phi4FitParams(fit.amplitude, fit.mu, fit.sigma, fit.volume)
        setattr(bumped, attr, getattr(fit, attr) + step)
        hi = breaking_ratio_analytic(bumped, alpha)
        setattr(bumped, attr, getattr(fit, attr) - step)
        lo = breaking_ratio_analytic(bumped, alpha)
        grads.append((hi - lo) / (2 * step))
    grads = np.asarray(grads)
    return float(np.sqrt(grads @ cov[1:, 1:] @ grads))


def build_target(kind, **kw):
    kinds = {
        "gaussian": GaussianTarget,
        "gmm": GmmTarget,
        "phi4_real": lambda **k: Phi4Target(complex_field=False, **k),
        "phi4_complex": lambda **k: Phi4Target(complex_field=True, **k),
        "hubbard": HubbardTarget,
    }
    if kind not in kinds:
        raise ValueError(f"unknown target kind {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](**kw)
