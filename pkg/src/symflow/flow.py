"""Coupling-based normalizing flow with exact inverses and log-Jacobians.

Layers operate on flat (batch, dim) float64 arrays wrapped in autodiff nodes.
Conditioner networks receive the frozen half of the coordinates (zeroed
elsewhere) and emit per-coordinate scale/shift; the scale is bounded through
tanh times a learnable cap so every layer stays invertible. Final conditioner
layers start at zero, so a freshly built flow is the identity map.
"""

import numpy as np

from . import autodiff as ad


class FlowError(RuntimeError):
    pass


ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class PriorSpec:
    """Isotropic Gaussian prior with per-coordinate mean."""

    def __init__(self, dim, mean=0.0, var=1.0):
        if var <= 0:
            raise ValueError(f"prior variance must be positive, got {var}")
        self.dim = dim
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,)).copy()
        self.var = float(var)

    def sample(self, n, rng):
        z = self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))
        return z, self.log_prob(z)

    def log_prob(self, z):
        z = np.asarray(z, dtype=np.float64)
        quad = ((z - self.mean) ** 2).sum(axis=-1) / self.var
        return -0.5 * (quad + self.dim * np.log(2.0 * np.pi * self.var))

    def log_prob_node(self, z):
        """Differentiable version of log_prob for graph-valued z."""
        diff = ad.sub(z, ad.constant(self.mean))
        quad = ad.sum(ad.mul(diff, diff), axis=-1)
        norm = self.dim * np.log(2.0 * np.pi * self.var)
        return ad.mul(ad.add(ad.mul(quad, 1.0 / self.var), norm), -0.5)

    def to_dict(self):
        return {"dim": self.dim, "mean": self.mean.tolist(), "var": self.var}

    @classmethod
    def from_dict(cls, d):
        return cls(d["dim"], np.asarray(d["mean"]), d["var"])


class Mlp:
    """Fully connected conditioner; the output layer is zero-initialized."""

    def __init__(self, name, dim_in, dim_out, n_layers, n_neurons, activation, rng):
        self.activation = ACTIVATIONS[activation]
        self.params = []
        widths = [dim_in] + [n_neurons] * n_layers + [dim_out]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            w = np.zeros((a, b)) if last else rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
            self.params.append(ad.Parameter(f"{name}/w{i}", w))
            self.params.append(ad.Parameter(f"{name}/b{i}", np.zeros(b)))

    def __call__(self, x):
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = ad.add(ad.matmul(h, w.node), b.node)
            if i < n_layers - 1:
                h = self.activation(h)
        return h


class CouplingLayer:
    """Affine coupling: frozen coordinates condition a scale/shift of the rest."""

    def __init__(self, name, mask, n_layers, n_neurons, activation, rng, scale_cap=2.0):
        self.mask = np.asarray(mask, dtype=np.float64)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.active = 1.0 - self.mask
        dim = self.mask.size
        self.scale_net = Mlp(f"{name}/scale", dim, dim, n_layers, n_neurons, activation, rng)
        self.translate_net = Mlp(f"{name}/shift", dim, dim, n_layers, n_neurons, activation, rng)
        self.scale_cap = ad.Parameter(f"{name}/cap", np.array(scale_cap))

    def parameters(self):
        return self.scale_net.params + self.translate_net.params + [self.scale_cap]

    def _scale_shift(self, frozen):
        s = ad.mul(ad.mul(ad.tanh(self.scale_net(frozen)), self.scale_cap.node),
                   ad.constant(self.active))
        t = ad.mul(self.translate_net(frozen), ad.constant(self.active))
        return s, t

    def forward(self, x):
        frozen = ad.mul(x, ad.constant(self.mask))
        s, t = self._scale_shift(frozen)
        y = ad.add(frozen, ad.mul(ad.add(ad.mul(x, ad.exp(s)), t), ad.constant(self.active)))
        return y, ad.sum(s, axis=1)

    def inverse(self, y):
        frozen = ad.mul(y, ad.constant(self.mask))
        s, t = self._scale_shift(frozen)
        x = ad.add(frozen, ad.mul(ad.mul(ad.sub(y, t), ad.exp(ad.neg(s))),
                                  ad.constant(self.active)))
        return x, ad.neg(ad.sum(s, axis=1))


class GlobalAffineLayer:
    """Trainable per-coordinate affine map, the coupling stand-in for dim 1."""

    def __init__(self, name, dim):
        self.dim = dim
        self.log_scale = ad.Parameter(f"{name}/log_scale", np.zeros(dim))
        self.shift = ad.Parameter(f"{name}/shift", np.zeros(dim))

    def parameters(self):
        return [self.log_scale, self.shift]

    def _logdet(self, n):
        return ad.mul(ad.constant(np.ones(n)), ad.sum(self.log_scale.node))

    def forward(self, x):
        y = ad.add(ad.mul(x, ad.exp(self.log_scale.node)), self.shift.node)
        return y, self._logdet(x.value.shape[0])

    def inverse(self, y):
        x = ad.mul(ad.sub(y, self.shift.node), ad.exp(ad.neg(self.log_scale.node)))
        return x, ad.neg(self._logdet(y.value.shape[0]))


class FlowModel:
    """Prior plus an ordered stack of invertible layers."""

    def __init__(self, prior, layers):
        self.prior = prior
        self.layers = layers
        self.dim = prior.dim

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def forward(self, z):
        x = ad.as_node(z)
        logdet = ad.constant(np.zeros(x.value.shape[0]))
        for i, layer in enumerate(self.layers):
            x, ld = layer.forward(x)
            if not np.all(np.isfinite(x.value)):
                raise FlowError(f"non-finite values produced by layer {i}")
            logdet = ad.add(logdet, ld)
        return x, logdet

    def inverse(self, x):
        z = ad.as_node(x)
        logdet = ad.constant(np.zeros(z.value.shape[0]))
        for i, layer in reversed(list(enumerate(self.layers))):
            z, ld = layer.inverse(z)
            if not np.all(np.isfinite(z.value)):
                raise FlowError(f"non-finite values produced by layer {i} (inverse)")
            logdet = ad.add(logdet, ld)
        return z, logdet

    def log_prob(self, x):
        z, logdet_inv = self.inverse(x)
        return ad.add(self.prior.log_prob_node(z), logdet_inv)

    def sample(self, n, rng):
        """Draw prior samples and push them through the flow.

        Returns (z, x, logdet, log_q0) with z and log_q0 as plain arrays.
        """
        z, log_q0 = self.prior.sample(n, rng)
        x, logdet = self.forward(ad.constant(z))
        return z, x, logdet, log_q0


def alternating_masks(dim, n_masks):
    """Half masks alternating which coordinates are frozen."""
    idx = np.arange(dim)
    return [((idx % 2) == (k % 2)).astype(np.float64) for k in range(n_masks)]


def checkerboard_masks(shape, n_masks, channels=1):
    """Site-parity masks for a 2D lattice, repeated across field channels."""
    h, w = shape
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parity = ((i + j) % 2).reshape(-1)
    return [np.tile((parity == (k % 2)).astype(np.float64), channels) for k in range(n_masks)]


def build_flow(dim, n_couplings, n_layers, n_neurons, activation, rng,
               masks=None, prior_mean=0.0, prior_var=1.0, scale_cap=2.0):
    prior = PriorSpec(dim, prior_mean, prior_var)
    if dim == 1:
        layers = [GlobalAffineLayer("c0", dim)]
    else:
        if masks is None:
            masks = alternating_masks(dim, n_couplings)
        layers = [CouplingLayer(f"c{k}", masks[k], n_layers, n_neurons, activation, rng,
                                scale_cap=scale_cap)
                  for k in range(n_couplings)]
    return FlowModel(prior, layers)


def _softplus_inverse(y):
    return np.log(np.expm1(y))


class SplineMap:
    """Monotone rational-quadratic map of [0, 1) onto itself.

    Knot widths and heights come from softmaxed parameters with a minimum bin
    size, knot derivatives from a softplus with a positive floor; the
    initialization is exactly the identity.
    """

    MIN_BIN = 1e-3
    MIN_DERIVATIVE = 1e-3

    def __init__(self, name="spline", n_bins=8):
        self.n_bins = n_bins
        self.raw_widths = ad.Parameter(f"{name}/widths", np.zeros(n_bins))
        self.raw_heights = ad.Parameter(f"{name}/heights", np.zeros(n_bins))
        d0 = _softplus_inverse(1.0 - self.MIN_DERIVATIVE)
        self.raw_derivs = ad.Parameter(f"{name}/derivs", np.full(n_bins + 1, d0))
        self._cum = ad.constant(np.tril(np.ones((n_bins, n_bins))).T)

    def parameters(self):
        return [self.raw_widths, self.raw_heights, self.raw_derivs]

    def _bins(self, raw):
        w = ad.exp(ad.sub(raw, ad.logsumexp(raw)))
        w = ad.add(ad.mul(w, 1.0 - self.n_bins * self.MIN_BIN), self.MIN_BIN)
        edges = ad.concat([ad.constant(np.zeros(1)), ad.matmul(w, self._cum)])
        return w, edges

    def apply(self, u):
        """Evaluate (h(u), log|dh/du|) for u in [0, 1)."""
        u = np.asarray(u, dtype=np.float64)
        if np.any(u < 0.0) or np.any(u >= 1.0):
            raise ValueError("spline input must lie in [0, 1)")
        widths, xedges = self._bins(self.raw_widths)
        heights, yedges = self._bins(self.raw_heights)
        derivs = ad.add(ad.softplus(self.raw_derivs.node), self.MIN_DERIVATIVE)

        idx = np.clip(np.searchsorted(xedges.value, u, side="right") - 1, 0, self.n_bins - 1)
        onehot = np.zeros((u.size, self.n_bins))
        onehot[np.arange(u.size), idx] = 1.0
        sel = ad.constant(onehot)

        wb = ad.matmul(sel, widths)
        hb = ad.matmul(sel, heights)
        xl = ad.matmul(sel, xedges[: self.n_bins])
        yl = ad.matmul(sel, yedges[: self.n_bins])
        d0 = ad.matmul(sel, derivs[: self.n_bins])
        d1 = ad.matmul(sel, derivs[1:])
        delta = ad.div(hb, wb)

        theta = ad.div(ad.sub(ad.constant(u), xl), wb)
        t1m = ad.mul(theta, ad.sub(1.0, theta))
        denom = ad.add(delta, ad.mul(ad.sub(ad.add(d0, d1), ad.mul(delta, 2.0)), t1m))
        numer = ad.mul(hb, ad.add(ad.mul(delta, ad.power(theta, 2.0)), ad.mul(d0, t1m)))
        out = ad.add(yl, ad.div(numer, denom))

        deriv_numer = ad.mul(ad.power(delta, 2.0),
                             ad.add(ad.add(ad.mul(d1, ad.power(theta, 2.0)),
                                           ad.mul(ad.mul(delta, 2.0), t1m)),
                                    ad.mul(d0, ad.power(ad.sub(1.0, theta), 2.0))))
        log_deriv = ad.sub(ad.log(deriv_numer), ad.mul(ad.log(denom), 2.0))
        return out, log_deriv
