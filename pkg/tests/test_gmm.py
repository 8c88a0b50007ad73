import numpy as np
import pytest

from gelboot import rng as rngmod
from gelboot.dgp import DgpSpec, simulate
from gelboot.gmm import GmmOptions, first_step, gmm_criterion, gmm_estimate
from gelboot.models import FunctionMomentModel, PanelMomentModel

from conftest import QuadraticModel, exp_regression_data, iv_data


def test_just_identified_zero_j(rng):
    model, data = iv_data(rng, n=200, over=0)
    fit = gmm_estimate(model, data)
    assert fit.j_stat == pytest.approx(0.0, abs=1e-18)
    assert fit.df == 0
    np.testing.assert_allclose(fit.theta_hat, fit.first_step_theta, atol=1e-10)


def test_large_n_consistency():
    data = simulate(DgpSpec("C1", 4, 30_000), rngmod.stream(12, 0))
    fit = gmm_estimate(PanelMomentModel(4), data)
    assert abs(fit.theta_hat[0] - 0.4) < 0.02


def test_scale_invariance_second_step(rng):
    model, data = iv_data(rng, n=300)
    c = 5.0
    scaled = FunctionMomentModel(
        2, model.dims.l_g,
        lambda X, t: c * model.moments(X, t),
        lambda X, t: c * model.jacobian(X, t),
    )
    a = gmm_estimate(model, data)
    b = gmm_estimate(scaled, data)
    np.testing.assert_allclose(b.theta_hat, a.theta_hat, atol=1e-8)
    assert b.j_stat == pytest.approx(a.j_stat, rel=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_step_two_criterion_not_worse(seed):
    rng = np.random.default_rng(seed)
    model, data = iv_data(rng, n=150)
    fit = gmm_estimate(model, data)
    W = fit.weight_matrix
    assert gmm_criterion(model, data, fit.theta_hat, W) <= gmm_criterion(model, data, fit.first_step_theta, W) + 1e-14
    assert fit.j_stat >= 0 and fit.df == 2
    assert np.allclose(W, W.T) and np.min(np.linalg.eigvalsh(W)) > 0
    assert np.min(np.linalg.eigvalsh(fit.sigma_c)) >= -1e-12


def test_nonlinear_model_recovers_truth():
    rng = np.random.default_rng(3)
    model = QuadraticModel(2, 4)
    data = exp_regression_data(rng, 4000, 2, 4, theta=np.array([0.3, -0.2]))
    fit = gmm_estimate(model, data, GmmOptions(theta0=(0.0, 0.0)))
    np.testing.assert_allclose(fit.theta_hat, [0.3, -0.2], atol=0.05)
    assert np.all(fit.se() > 0)


def test_first_step_is_identity_weighted(rng):
    model, data = iv_data(rng, n=120)
    th1 = first_step(model, data)
    I = np.eye(model.dims.l_g)
    base = gmm_criterion(model, data, th1, I)
    for d in ([1e-4, 0], [0, 1e-4], [-1e-4, 1e-4]):
        assert gmm_criterion(model, data, th1 + np.array(d), I) >= base
