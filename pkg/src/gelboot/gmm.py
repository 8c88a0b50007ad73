"""Two-step GMM with the conventional sandwich variance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import EstimationError, InputError
from .models import Dataset, MomentModel, evaluate

__all__ = ["GmmFit", "GmmOptions", "gmm_estimate", "first_step", "gmm_criterion"]


@dataclass(frozen=True)
class GmmOptions:
    theta0: tuple | None = None
    xtol: float = 1e-12
    ridge: float = 1e-8


@dataclass(frozen=True)
class GmmFit:
    theta_hat: np.ndarray
    first_step_theta: np.ndarray
    weight_matrix: np.ndarray
    sigma_c: np.ndarray
    j_stat: float
    df: int
    n: int

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma_c) / self.n)


def gmm_criterion(model: MomentModel, data: Dataset, theta, W) -> float:
    gbar = evaluate(model, data, theta).g.mean(axis=0)
    return float(gbar @ W @ gbar)


def _minimize(model, data, W, theta0, opts):
    if model.linear:
        # g = a - B theta, so the minimizer of gbar'W gbar is a weighted LS solve
        ev = evaluate(model, data, np.zeros(model.dims.l_theta), order=1)
        abar = ev.g.mean(axis=0)
        Bbar = -ev.G.mean(axis=0)
        return np.linalg.solve(Bbar.T @ W @ Bbar, Bbar.T @ W @ abar)
    C = np.linalg.cholesky(W)

    def resid(th):
        return C.T @ evaluate(model, data, th).g.mean(axis=0)

    def jac(th):
        return C.T @ evaluate(model, data, th, order=1).G.mean(axis=0)

    sol = least_squares(resid, theta0, jac=jac, method="lm", xtol=opts.xtol, ftol=1e-15, gtol=1e-15)
    if not np.all(np.isfinite(sol.x)):
        raise EstimationError("GMM minimization diverged")
    return sol.x


def _weight(model, data, theta, opts):
    g = evaluate(model, data, theta).g
    omega = g.T @ g / data.n
    try:
        if np.linalg.cond(omega) > 1e12:
            raise np.linalg.LinAlgError
        W = np.linalg.inv(omega)
    except np.linalg.LinAlgError:
        warnings.warn("second-step weight matrix is near singular; adding a ridge", RuntimeWarning, stacklevel=3)
        W = np.linalg.inv(omega + opts.ridge * np.trace(omega) / omega.shape[0] * np.eye(omega.shape[0]))
    return 0.5 * (W + W.T)


def first_step(model: MomentModel, data: Dataset, opts: GmmOptions | None = None) -> np.ndarray:
    """Identity-weighted GMM estimate."""
    opts = opts or GmmOptions()
    k = model.dims.l_theta
    theta0 = np.zeros(k) if opts.theta0 is None else np.asarray(opts.theta0, dtype=float)
    return _minimize(model, data, np.eye(model.dims.l_g), theta0, opts)


def gmm_estimate(model: MomentModel, data: Dataset, opts: GmmOptions | None = None) -> GmmFit:
    """Two-step efficient GMM.

    Step one uses the identity weight; step two uses the inverse of the
    uncentered second-moment matrix of the moments at the first-step
    estimate. The variance is the general sandwich, which collapses to
    ``(G'WG)^{-1}`` at the efficient weight.
    """
    opts = opts or GmmOptions()
    dims = model.dims
    if data.n < 2:
        raise InputError("GMM needs at least two observations")
    th1 = first_step(model, data, opts)
    W = _weight(model, data, th1, opts)
    th2 = _minimize(model, data, W, th1, opts)
    ev = evaluate(model, data, th2, order=1)
    gbar = ev.g.mean(axis=0)
    Gbar = ev.G.mean(axis=0)
    omega = ev.g.T @ ev.g / data.n
    bread = np.linalg.inv(Gbar.T @ W @ Gbar)
    sigma = bread @ Gbar.T @ W @ omega @ W @ Gbar @ bread
    sigma = 0.5 * (sigma + sigma.T)
    j = float(data.n * gbar @ W @ gbar)
    return GmmFit(th2, th1, W, sigma, max(j, 0.0), dims.l_g - dims.l_theta, data.n)
