import numpy as np
import pytest

from symflow import autodiff as ad
from symflow import targets as tg


def action_grad_check(target, x, rtol=1e-5, step=1e-6):
    """Analytic field-gradient of the action against central differences."""
    leaf = ad.Node(np.array(x, dtype=np.float64))
    ad.backward(ad.sum(target.log_prob_unnorm(leaf)))
    analytic = leaf.grad
    numeric = np.zeros_like(analytic)
    flat = leaf.value.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(ad.sum(target.log_prob_unnorm(ad.constant(leaf.value))).value)
        flat[i] = orig - step
        fm = float(ad.sum(target.log_prob_unnorm(ad.constant(leaf.value))).value)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * step)
    scale = np.maximum(np.abs(numeric), 1.0)
    assert np.max(np.abs(analytic - numeric) / scale) < rtol


def test_gmm_single_centered_mode_is_standard_normal():
    target = tg.GmmTarget(n_modes=1, radius=0.0)
    x = np.random.default_rng(0).standard_normal((16, 2))
    expected = -0.5 * (x ** 2).sum(axis=1) - np.log(2 * np.pi)
    np.testing.assert_allclose(target.log_density(x), expected, rtol=1e-14)


def test_gmm_density_at_mode_center():
    target = tg.GmmTarget(n_modes=8, radius=12.0)
    val = np.exp(target.log_density(target.means[:1]))
    # cross-mode contributions are below 1e-15 relative at R=12
    assert abs(val[0] - 1.0 / (16 * np.pi)) < 1e-15


def test_gmm_z8_rotation_invariance():
    target = tg.GmmTarget(n_modes=8, radius=12.0)
    rng = np.random.default_rng(1)
    x = 6.0 * rng.standard_normal((64, 2))
    phi = 2 * np.pi / 8
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    np.testing.assert_allclose(target.log_density(x @ rot.T), target.log_density(x),
                               rtol=0, atol=1e-10)


def test_gmm_density_integrates_to_one():
    target = tg.GmmTarget(n_modes=8, radius=12.0)
    pts = np.linspace(-20, 20, 901)
    xx, yy = np.meshgrid(pts, pts, indexing="ij")
    grid = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    dens = np.exp(target.log_density(grid)).reshape(901, 901)
    integral = np.trapezoid(np.trapezoid(dens, pts, axis=1), pts)
    assert abs(integral - 1.0) < 1e-4


def test_gmm_gradient_matches_finite_differences():
    target = tg.GmmTarget(n_modes=8, radius=12.0)
    action_grad_check(target, 4.0 * np.random.default_rng(2).standard_normal((5, 2)))


def test_phi4_action_vanishes_on_zero_field():
    target = tg.Phi4Target((4, 4), kappa=0.3, lam_c=0.022)
    f = target.action(ad.constant(np.zeros((3, 16))))
    np.testing.assert_array_equal(f.value, 0.0)


def test_phi4_constant_field_hand_expansion():
    kappa, lam_c, c = 0.3, 0.022, 1.7
    target = tg.Phi4Target((4, 2), kappa=kappa, lam_c=lam_c)
    volume = 8
    f = target.action(ad.constant(np.full((1, volume), c)))
    expected = volume * (-4 * kappa * c ** 2 + (1 - 2 * lam_c) * c ** 2 + lam_c * c ** 4)
    np.testing.assert_allclose(f.value, expected, rtol=1e-13)


def test_phi4_alpha_term_on_constant_field():
    c, alpha, volume = -0.9, 0.37, 8
    base = tg.Phi4Target((4, 2), kappa=0.3, lam_c=0.022, alpha=0.0)
    tilted = tg.Phi4Target((4, 2), kappa=0.3, lam_c=0.022, alpha=alpha)
    x = ad.constant(np.full((1, volume), c))
    np.testing.assert_allclose(tilted.action(x).value - base.action(x).value,
                               alpha * volume * c, rtol=1e-12)


def test_phi4_real_sign_flip_invariance():
    target = tg.Phi4Target((4, 4), kappa=0.3, lam_c=0.022, alpha=0.0)
    x = np.random.default_rng(3).standard_normal((32, 16))
    f_pos = target.action(ad.constant(x)).value
    f_neg = target.action(ad.constant(-x)).value
    np.testing.assert_allclose(f_pos, f_neg, rtol=0, atol=1e-10)


def test_phi4_complex_u1_invariance():
    target = tg.Phi4Target((3, 4), kappa=0.3, lam_c=0.022, alpha=0.0, complex_field=True)
    rng = np.random.default_rng(4)
    v = target.volume
    x = rng.standard_normal((16, 2 * v))
    f0 = target.action(ad.constant(x)).value
    for phi in rng.uniform(0, 1, size=5):
        c, s = np.cos(2 * np.pi * phi), np.sin(2 * np.pi * phi)
        rotated = np.concatenate([c * x[:, :v] - s * x[:, v:],
                                  s * x[:, :v] + c * x[:, v:]], axis=1)
        np.testing.assert_allclose(target.action(ad.constant(rotated)).value, f0,
                                   rtol=0, atol=1e-10)


def test_phi4_complex_alpha_breaks_u1():
    target = tg.Phi4Target((3, 4), kappa=0.3, lam_c=0.022, alpha=0.01, complex_field=True)
    v = target.volume
    x = np.abs(np.random.default_rng(5).standard_normal((8, 2 * v)))
    rotated = np.concatenate([-x[:, :v], x[:, v:]], axis=1)  # phase pi on re channel
    f0 = target.action(ad.constant(x)).value
    f1 = target.action(ad.constant(rotated)).value
    assert np.all(np.abs(f0 - f1) > 1e-6)


def test_phi4_rejects_wrong_shape():
    target = tg.Phi4Target((4, 4), kappa=0.3, lam_c=0.022)
    with pytest.raises(ValueError):
        target.action(ad.constant(np.zeros((2, 15))))


def test_phi4_gradients_match_finite_differences():
    real = tg.Phi4Target((3, 3), kappa=0.3, lam_c=0.022, alpha=0.002)
    action_grad_check(real, np.random.default_rng(6).standard_normal((4, 9)))
    cplx = tg.Phi4Target((2, 3), kappa=0.3, lam_c=0.022, alpha=0.005, complex_field=True)
    action_grad_check(cplx, np.random.default_rng(7).standard_normal((4, 12)))


def test_phi4_magnetization_is_mean_field():
    target = tg.Phi4Target((2, 2), kappa=0.3, lam_c=0.022)
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert target.magnetization(x)[0] == 2.5


def test_hubbard_action_at_zero_field():
    target = tg.HubbardTarget(u_coupling=4.0, beta=2.0, kappa_hop=1.0)
    f = target.action(ad.constant(np.zeros((1, 2)))).value
    expected = -np.log(4.0 * (1.0 + np.cosh(target.kappa_t)) ** 2)
    np.testing.assert_allclose(f, expected, rtol=1e-13)


def test_hubbard_action_symmetries():
    target = tg.HubbardTarget(u_coupling=4.0, beta=2.0)
    x = 3.0 * np.random.default_rng(8).standard_normal((64, 2))
    f = target.action(ad.constant(x)).value
    np.testing.assert_allclose(target.action(ad.constant(-x)).value, f, rtol=0, atol=1e-10)
    np.testing.assert_allclose(target.action(ad.constant(x[:, ::-1].copy())).value, f,
                               rtol=0, atol=1e-10)


def test_hubbard_action_proportional_to_analytic_density():
    # exp(-f) / (hh(x) hh(-x) exp(-|x|^2/(U beta))) must be a constant
    target = tg.HubbardTarget(u_coupling=4.0, beta=2.0)
    x = 4.0 * np.random.default_rng(9).standard_normal((100, 2))
    log_ratio = target.log_prob_unnorm(ad.constant(x)).value - target.analytic_log_density(x)
    ratio = np.exp(log_ratio - log_ratio.mean())
    assert np.std(ratio) / np.mean(ratio) < 1e-8
    # the constant is exactly det-normalization 4 under u_tilde = U beta / 2
    np.testing.assert_allclose(np.exp(log_ratio), 4.0, rtol=1e-10)


def test_hubbard_determinant_signs_are_positive():
    target = tg.HubbardTarget(u_coupling=4.0, beta=3.0)
    x = 5.0 * np.random.default_rng(10).standard_normal((200, 2))
    _, sign = ad.logdet(target.fermion_matrix(ad.constant(x)))
    assert np.all(sign > 0)


def test_hubbard_gradient_matches_finite_differences():
    target = tg.HubbardTarget(u_coupling=4.0, beta=2.0)
    action_grad_check(target, 2.0 * np.random.default_rng(11).standard_normal((6, 2)))


def test_hubbard_analytic_density_symmetries():
    target = tg.HubbardTarget(u_coupling=4.0, beta=2.0)
    x = 3.0 * np.random.default_rng(12).standard_normal((64, 2))
    lp = target.analytic_log_density(x)
    np.testing.assert_allclose(target.analytic_log_density(-x), lp, atol=1e-12)
    np.testing.assert_allclose(target.analytic_log_density(x[:, ::-1]), lp, atol=1e-12)


def test_hubbard_quadrature_masses_normalize():
    target = tg.HubbardTarget(u_coupling=4.0, beta=2.0)
    m_plus, m_minus = target.quadrature_masses()
    assert abs(m_plus + m_minus - 1.0) < 1e-12
    # the anti-diagonal pair is enhanced by cosh(kappa_t) > 1
    assert m_minus > m_plus
    assert -1.0 < target.quadrature_breaking_ratio() < 0.0


def test_breaking_ratio_vanishes_without_tilt():
    fit = tg.Phi4FitParams(0.499, 2.126, 0.629, 128)
    assert abs(tg.breaking_ratio_analytic(fit, 0.0)) < 1e-14


def test_breaking_ratio_saturates_at_minus_one():
    fit = tg.Phi4FitParams(0.499, 2.126, 0.629, 128)
    assert abs(tg.breaking_ratio_analytic(fit, 1.0) + 1.0) < 1e-12


def test_breaking_ratio_matches_quadrature_oracle():
    fit = tg.Phi4FitParams(0.499, 2.126, 0.629, 128)
    assert abs(tg.breaking_ratio_analytic(fit, 0.001)
               - tg.breaking_ratio_quadrature(fit, 0.001)) < 1e-6
    for alpha in np.linspace(0.0, 0.01, 11):
        delta = tg.breaking_ratio_analytic(fit, alpha) - tg.breaking_ratio_quadrature(fit, alpha)
        assert abs(delta) < 1e-6


def test_breaking_ratio_rejects_negative_alpha():
    fit = tg.Phi4FitParams(0.499, 2.126, 0.629, 128)
    with pytest.raises(ValueError):
        tg.breaking_ratio_analytic(fit, -0.001)


def test_fit_recovers_bimodal_profile():
    rng = np.random.default_rng(13)
    mu, sigma = 2.1, 0.6
    signs = rng.choice([-1.0, 1.0], size=200_000)
    mags = signs * mu + sigma * rng.standard_normal(200_000)
    fit = tg.fit_magnetization_profile(mags, volume=128)
    assert abs(fit.mu - mu) < 0.02
    assert abs(fit.sigma - sigma) < 0.02


def test_classifiers():
    assert tg.magnetization_sign(np.array([[1.0, 2.0], [-3.0, 1.0]])).tolist() == [1, -1]
    assert tg.diagonal_pair_sign(np.array([[2.0, 1.0], [2.0, -1.0]])).tolist() == [1, -1]


def test_build_target_rejects_unknown_kind():
    with pytest.raises(ValueError):
        tg.build_target("ising")
