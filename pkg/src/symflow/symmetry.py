"""Symmetry injection: canonicalization maps, stochastic modulations, penalty.

Canonicalizers map prior samples into a canonical cell and remember the branch
so the inverse can be applied after the flow; all branch transforms are
orthogonal, so they contribute nothing to the log-Jacobian. Modulations apply
a random symmetry transformation after the flow and return the log of the
modulation probability, which is added to the model log-density. The penalty
keeps the flow's output inside the cell so branch images stay disjoint.
"""

import numpy as np

from . import autodiff as ad


class SignCanonicalizer:
    """Global sign flip with cell {z : sum_i z_i >= 0}; the boundary keeps branch 0."""

    n_branches = 2

    def canonicalize(self, z):
        z = np.asarray(z, dtype=np.float64)
        branch = (z.sum(axis=1) < 0).astype(np.int64)
        sign = 1.0 - 2.0 * branch
        return z * sign[:, None], branch

    def decanonicalize(self, x, branch):
        sign = 1.0 - 2.0 * np.asarray(branch, dtype=np.float64)
        return ad.mul(x, ad.constant(sign[:, None]))


class SectorCanonicalizer:
    """Rotation into the angular sector (-pi/M, pi/M] of the plane."""

    def __init__(self, n_sectors):
        self.M = int(n_sectors)

    @property
    def n_branches(self):
        return self.M

    def _branch(self, z):
        angle = np.arctan2(z[:, 1], z[:, 0])
        half = np.pi / self.M
        return np.ceil((angle - half) / (2 * half)).astype(np.int64) % self.M

    def _rotate(self, x, angles):
        c, s = np.cos(angles), np.sin(angles)
        if isinstance(x, ad.Node):
            x1, x2 = x[:, 0:1], x[:, 1:2]
            c, s = ad.constant(c[:, None]), ad.constant(s[:, None])
            return ad.concat([ad.sub(ad.mul(c, x1), ad.mul(s, x2)),
                              ad.add(ad.mul(s, x1), ad.mul(c, x2))], axis=1)
        return np.stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]], axis=1)

    def canonicalize(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[1] != 2:
            raise ValueError("sector canonicalization acts on 2-vectors")
        branch = self._branch(z)
        return self._rotate(z, -2 * np.pi * branch / self.M), branch

    def decanonicalize(self, x, branch):
        branch = np.asarray(branch)
        if branch.min() < 0 or branch.max() >= self.M:
            raise ValueError(f"branch index out of range for M={self.M}")
        return self._rotate(x, 2 * np.pi * branch / self.M)


class ComponentSignCanonicalizer:
    """Per-component sign flips into a fixed orthant (the Hubbard quadrant cell)."""

    def __init__(self, signs):
        self.signs = np.asarray(signs, dtype=np.float64)
        if not np.all(np.abs(self.signs) == 1):
            raise ValueError("cell orientation entries must be +-1")

    @property
    def n_branches(self):
        return 2 ** self.signs.size

    def _flips(self, branch):
        bits = (np.asarray(branch)[:, None] >> np.arange(self.signs.size)) & 1
        return 1.0 - 2.0 * bits

    def canonicalize(self, z):
        z = np.asarray(z, dtype=np.float64)
        flip = (z * self.signs < 0)
        branch = (flip << np.arange(self.signs.size)).sum(axis=1)
        return z * (1.0 - 2.0 * flip), branch

    def decanonicalize(self, x, branch):
        if np.asarray(branch).max() >= self.n_branches:
            raise ValueError("branch index out of range")
        return ad.mul(x, ad.constant(self._flips(branch)))


def canonicalized_flow(canon, model):
    """The equivariant composite: decanonicalize(flow(canonicalize(z)))."""

    def apply(z):
        z_c, branch = canon.canonicalize(z)
        x, logdet = model.forward(ad.constant(z_c))
        return canon.decanonicalize(x, branch).value, logdet.value

    return apply


class IdentityModulation:
    kind = "identity"

    def parameters(self):
        return []

    def sample_u(self, n, rng):
        return np.zeros(n, dtype=np.int64)

    def apply(self, x, u):
        return x, ad.constant(np.zeros(len(u)))


class SignFlipModulation:
    """Z2 modulation, exact (p=1/2) or broken with learnable b = ln P(flip).

    ``component=None`` flips the whole field; an integer flips one coordinate,
    which composes the broken-Z4 modulation out of two Z2 factors.
    """

    B_MAX = -1e-6

    def __init__(self, broken=False, b_init=np.log(0.5), component=None, name="mod_z2"):
        self.kind = "z2_broken" if broken else "z2_exact"
        self.broken = broken
        self.component = component
        self.b = ad.Parameter(f"{name}/b", np.array(min(b_init, self.B_MAX))) if broken else None

    def parameters(self):
        return [self.b] if self.broken else []

    def flip_probability(self):
        return float(np.exp(self.b.value)) if self.broken else 0.5

    def sample_u(self, n, rng):
        return (rng.uniform(size=n) < self.flip_probability()).astype(np.int64)

    def log_ps(self, u):
        u = np.asarray(u, dtype=np.float64)
        if not self.broken:
            return ad.constant(np.full(u.shape, -np.log(2.0)))
        stay = ad.log(ad.sub(1.0, ad.exp(self.b.node)))
        return ad.add(ad.mul(ad.constant(u), self.b.node),
                      ad.mul(ad.constant(1.0 - u), stay))

    def apply(self, x, u):
        factor = (1.0 - 2.0 * np.asarray(u, dtype=np.float64))[:, None]
        if self.component is None:
            flipped = ad.mul(x, ad.constant(factor))
        else:
            c = self.component
            cols = [x[:, :c], ad.mul(x[:, c:c + 1], ad.constant(factor)), x[:, c + 1:]]
            flipped = ad.concat([col for col in cols if col.value.shape[1] > 0], axis=1)
        return flipped, self.log_ps(u)


class RotationModulation:
    """Z_M modulation: rotate a 2-vector by 2*pi*u/M with p_S = 1/M."""

    kind = "zM"

    def __init__(self, n_branches):
        self.M = int(n_branches)

    def parameters(self):
        return []

    def sample_u(self, n, rng):
        return rng.integers(0, self.M, size=n)

    def apply(self, x, u):
        if x.value.shape[1] != 2:
            raise ValueError("Z_M modulation acts on 2-vectors")
        angles = 2 * np.pi * np.asarray(u, dtype=np.float64) / self.M
        c = ad.constant(np.cos(angles)[:, None])
        s = ad.constant(np.sin(angles)[:, None])
        x1, x2 = x[:, 0:1], x[:, 1:2]
        out = ad.concat([ad.sub(ad.mul(c, x1), ad.mul(s, x2)),
                         ad.add(ad.mul(s, x1), ad.mul(c, x2))], axis=1)
        return out, ad.constant(np.full(len(u), -np.log(self.M)))


class PhaseModulation:
    """Global U(1) phase rotation of a two-channel complex field.

    The rotation angle is 2*pi*h(u) with u uniform on [0, 1); h is either the
    identity (exact symmetry) or a trainable monotone spline (broken symmetry).
    The modulation probability density is (2*pi)^-1 |dh/du|^-1.
    """

    def __init__(self, spline=None):
        self.kind = "u1_broken" if spline is not None else "u1_exact"
        self.spline = spline

    def parameters(self):
        return self.spline.parameters() if self.spline is not None else []

    def sample_u(self, n, rng):
        return rng.uniform(0.0, 1.0, size=n)

    def apply(self, x, u):
        if x.value.ndim != 2 or x.value.shape[1] % 2 != 0:
            raise ValueError("U(1) modulation needs two-channel (complex) samples")
        u = np.asarray(u, dtype=np.float64)
        if self.spline is None:
            phi = ad.constant(2 * np.pi * u)
            log_ps = ad.constant(np.full(u.shape, -np.log(2 * np.pi)))
        else:
            h, log_dh = self.spline.apply(u)
            phi = ad.mul(h, 2 * np.pi)
            log_ps = ad.sub(-np.log(2 * np.pi), log_dh)
        half = x.value.shape[1] // 2
        re, im = x[:, :half], x[:, half:]
        c = ad.reshape(ad.cos(phi), (-1, 1))
        s = ad.reshape(ad.sin(phi), (-1, 1))
        out = ad.concat([ad.sub(ad.mul(c, re), ad.mul(s, im)),
                         ad.add(ad.mul(s, re), ad.mul(c, im))], axis=1)
        return out, log_ps


def lift_to_complex(x):
    """Embed a real field as the real channel of a two-channel complex field."""
    return ad.concat([x, ad.constant(np.zeros(x.value.shape))], axis=1)


def half_space_lambda(x):
    """Signed distance proxy for the cell {sum_i x_i >= 0}."""
    return ad.neg(ad.sum(x, axis=1))


def component_lambda(index, sign=1.0):
    """Cell {sign * x_index >= 0}."""

    def lam(x):
        return ad.neg(ad.mul(ad.reshape(x[:, index:index + 1], (-1,)), sign))

    return lam


def sector_lambda_pair(n_sectors):
    """The +-boundary pair for the Z_M sector cell around the x1 axis."""
    t = np.tan(np.pi / n_sectors)
    scale = 1.0 / (1.0 + t) ** 2

    def make(sign):
        def lam(x):
            x1 = ad.reshape(x[:, 0:1], (-1,))
            x2 = ad.reshape(x[:, 1:2], (-1,))
            return ad.add(ad.mul(x1, -t), ad.mul(x2, sign * scale))

        return lam

    return [make(-1.0), make(+1.0)]


class Penalty:
    """Soft cell-confinement term A * sigmoid(B * lambda) * heaviside(lambda).

    Zero on and inside the cell boundary (heaviside(0) = 0), monotone in
    lambda, saturating at A outside; one term per configured lambda function.
    """

    def __init__(self, lambda_fns, amplitude=100.0, gradient_scale=10.0):
        self.lambda_fns = list(lambda_fns)
        self.amplitude = float(amplitude)
        self.gradient_scale = float(gradient_scale)

    def __call__(self, x):
        n = x.value.shape[0] if isinstance(x, ad.Node) else len(x)
        total = ad.constant(np.zeros(n))
        for lam_fn in self.lambda_fns:
            lam = lam_fn(ad.as_node(x))
            outside = (lam.value > 0).astype(np.float64)
            term = ad.mul(ad.mul(ad.sigmoid(ad.mul(lam, self.gradient_scale)),
                                 ad.constant(outside)), self.amplitude)
            total = ad.add(total, term)
        return total

    def violation_rate(self, x):
        """Fraction of samples strictly outside the cell."""
        if not self.lambda_fns:
            return 0.0
        x = ad.constant(np.asarray(x))
        outside = np.zeros(x.value.shape[0], dtype=bool)
        for lam_fn in self.lambda_fns:
            outside |= lam_fn(x).value > 0
        return float(outside.mean())
