"""t statistics, Wald statistics, overidentification tests and normal-theory intervals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .errors import GelbootError, InputError, VarianceError
from .models import Dataset, MomentModel, evaluate
from .rho import Kind
from .variance import RobustCovariance, safe_inverse

__all__ = [
    "TStat",
    "RestrictionFn",
    "JTestResult",
    "t_stat",
    "wald_stat",
    "wald_form",
    "j_tests",
    "j_test",
    "asymptotic_ci",
    "wald_region_contains",
    "variance_of",
]


@dataclass(frozen=True)
class TStat:
    value: float
    r: int
    flavor: str


@dataclass(frozen=True)
class JTestResult:
    variant: str
    statistic: float
    df: int
    p_value: float

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha


class RestrictionFn:
    """Restriction ``eta(theta)`` with an analytic or finite-difference Jacobian."""

    def __init__(self, fn: Callable, jacobian: Callable | None = None, step: float = 1e-6):
        self.fn = fn
        self._jac = jacobian
        self.step = step

    def __call__(self, theta) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.fn(np.asarray(theta, dtype=float)), dtype=float))

    def jacobian(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self._jac is not None:
            D = np.atleast_2d(np.asarray(self._jac(theta), dtype=float))
        else:
            k = theta.shape[0]
            cols = []
            for a in range(k):
                h = self.step * max(1.0, abs(theta[a]))
                e = np.zeros(k)
                e[a] = h
                cols.append((self(theta + e) - self(theta - e)) / (2 * h))
            D = np.column_stack(cols)
        if D.shape[0] > D.shape[1]:
            raise InputError("more restrictions than parameters")
        if np.linalg.matrix_rank(D) < D.shape[0]:
            raise VarianceError("restriction Jacobian is rank deficient at theta-hat")
        return D

    @classmethod
    def linear(cls, R, c=None) -> "RestrictionFn":
        """``eta(theta) = R theta - c``."""
        R = np.atleast_2d(np.asarray(R, dtype=float))
        c = np.zeros(R.shape[0]) if c is None else np.atleast_1d(np.asarray(c, dtype=float))
        return cls(lambda th: R @ th - c, lambda th: R)

    @classmethod
    def coordinate(cls, r: int, value: float, l_theta: int) -> "RestrictionFn":
        """``eta(theta) = theta_r - value``."""
        R = np.zeros((1, l_theta))
        R[0, r] = 1.0
        return cls.linear(R, [value])


def variance_of(cov: RobustCovariance, flavor: str) -> np.ndarray:
    flavor = flavor.upper()
    if flavor == "MR":
        return cov.sigma_mr
    if flavor == "C":
        return cov.sigma_c
    raise InputError(f"unknown variance flavor {flavor!r}; use MR or C")


def t_stat(fit, cov: RobustCovariance, r: int, null_value: float, flavor: str = "MR") -> TStat:
    """``(theta_r - null) / sqrt(Sigma_rr / n)``."""
    theta = np.asarray(fit.theta_hat)
    if not 0 <= r < theta.shape[0]:
        raise InputError(f"coordinate {r} out of range")
    v = float(variance_of(cov, flavor)[r, r])
    if not v > 0:
        raise VarianceError(f"variance of coordinate {r} is not positive ({v})")
    return TStat(float((theta[r] - null_value) / np.sqrt(v / cov.n)), r, flavor.upper())


def wald_form(diff: np.ndarray, D: np.ndarray, sigma: np.ndarray, n: int) -> float:
    """``n diff' (D Sigma D')^{-1} diff``."""
    M = safe_inverse(D @ sigma @ D.T, "restriction variance")
    return float(max(n * diff @ M @ diff, 0.0))


def wald_stat(fit, cov: RobustCovariance, eta: RestrictionFn) -> float:
    theta = np.asarray(fit.theta_hat)
    return wald_form(eta(theta), eta.jacobian(theta), cov.sigma_mr, cov.n)


def wald_region_contains(fit, cov: RobustCovariance, eta: RestrictionFn, point, critical: float) -> bool:
    """Whether ``eta(theta) = point`` lies in the Wald region at ``critical``.

    ``point`` is a value of ``eta``; the quadratic form is evaluated at
    ``eta(theta-hat) - point``.
    """
    theta = np.asarray(fit.theta_hat)
    diff = eta(theta) - np.atleast_1d(np.asarray(point, dtype=float))
    if not np.any(diff):
        return True
    return wald_form(diff, eta.jacobian(theta), cov.sigma_mr, cov.n) <= critical


def _result(variant, stat, df):
    stat = max(float(stat), 0.0)
    return JTestResult(variant, stat, df, float(stats.chi2.sf(stat, df)))


def j_tests(fit, model: MomentModel, data: Dataset, opts=None) -> list[JTestResult]:
    """Overidentification statistics evaluated at ``fit.theta_hat``.

    Returns GMM-J, LR-EL, LR-ET and LR-ETEL. The LR statistics re-solve the
    relevant inner problem at ``theta-hat``, so the variant matching the
    fit's own kind equals its criterion statistic; the others are first-order
    equivalent. A statistic whose inner problem fails is reported as NaN.
    """
    from .gel import SolveOptions, _etel_value, _maximize
    from .rho import EL_RHO, ET_RHO

    dims = model.dims
    df = dims.l_g - dims.l_theta
    if df < 1:
        raise InputError("no overidentifying restrictions: the model is just identified")
    opts = opts or SolveOptions()
    n = data.n
    g = evaluate(model, data, fit.theta_hat).g
    gbar = g.mean(axis=0)
    omega = g.T @ g / n
    out = [_result("GMM-J", n * gbar @ safe_inverse(omega, "Omega-hat") @ gbar, df)]
    try:
        _, el_val, _ = _maximize(EL_RHO, g, opts)
        out.append(_result("LR-EL", 2.0 * n * el_val, df))
    except GelbootError:
        out.append(JTestResult("LR-EL", np.nan, df, np.nan))
    try:
        lam, et_val, _ = _maximize(ET_RHO, g, opts)
        tau = 1.0 - et_val  # mean exp(lambda'g)
        out.append(_result("LR-ET", -2.0 * n * np.log(tau), df))
        out.append(_result("LR-ETEL", 2.0 * n * _etel_value(g, lam), df))
    except GelbootError:
        out += [JTestResult(v, np.nan, df, np.nan) for v in ("LR-ET", "LR-ETEL")]
    return out


def j_test(fit, model: MomentModel, data: Dataset, variant: str, opts=None) -> JTestResult:
    """One named statistic from :func:`j_tests`."""
    for res in j_tests(fit, model, data, opts):
        if res.variant == variant:
            return res
    raise InputError(f"unknown J test variant {variant!r}")


def asymptotic_ci(fit, cov: RobustCovariance, r: int, alpha: float, side: str = "symmetric", flavor: str = "MR"):
    """Normal-theory interval for ``theta_r``.

    ``side="lower"`` returns ``(theta_r - z_alpha se, inf)``; ``"symmetric"``
    returns ``theta_r -/+ z_{alpha/2} se``.
    """
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    th = float(fit.theta_hat[r])
    se = float(np.sqrt(variance_of(cov, flavor)[r, r] / cov.n))
    if side == "lower":
        return (th - stats.norm.ppf(1 - alpha) * se, np.inf)
    if side == "symmetric":
        z = stats.norm.ppf(1 - alpha / 2)
        return (th - z * se, th + z * se)
    raise InputError(f"unknown interval side {side!r}")
