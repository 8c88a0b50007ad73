"""Just-identified first-order-condition system and sandwich variance.

For EL and ET the stacked parameter is ``beta = (theta, lambda)`` and each
observation contributes

    psi_i = [rho_1(lambda'g_i) G_i' lambda ; rho_1(lambda'g_i) g_i].

For ETEL ``beta = (theta, lambda, kappa, tau)`` and ``psi_i`` has four
blocks built from ``e_i = exp(lambda'g_i)``. The estimator solves
``mean(psi_i) = 0``; the misspecification-robust variance of ``theta`` is
the upper-left block of ``Gamma^{-1} Psi Gamma^{-T}``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, VarianceError
from .models import Dataset, MomentModel, evaluate
from .rho import Kind, rho_for

__all__ = [
    "StackedBeta",
    "RobustCovariance",
    "psi",
    "psi_jacobian",
    "covariance",
    "psi_arrays",
    "psi_jacobian_arrays",
    "safe_inverse",
    "COND_LIMIT",
]

COND_LIMIT = 1e12


@dataclass(frozen=True)
class StackedBeta:
    kind: Kind
    theta: np.ndarray
    lam: np.ndarray
    kappa: np.ndarray | None = None
    tau: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(-1))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float).reshape(-1))
        if self.kind is Kind.ETEL:
            if self.kappa is None or self.tau is None:
                raise ValueError("ETEL needs kappa and tau")
            object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=float).reshape(-1))
            object.__setattr__(self, "tau", float(self.tau))
            if self.kappa.shape != self.lam.shape:
                raise ValueError("kappa and lambda must have the same length")

    @property
    def dim(self) -> int:
        k, lg = self.theta.shape[0], self.lam.shape[0]
        return k + lg if self.kind is not Kind.ETEL else k + 2 * lg + 1

    def vector(self) -> np.ndarray:
        parts = [self.theta, self.lam]
        if self.kind is Kind.ETEL:
            parts += [self.kappa, [self.tau]]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, kind, vec, l_theta: int, l_g: int) -> "StackedBeta":
        kind = Kind.parse(kind)
        vec = np.asarray(vec, dtype=float)
        theta, lam = vec[:l_theta], vec[l_theta : l_theta + l_g]
        if kind is Kind.ETEL:
            return cls(kind, theta, lam, vec[l_theta + l_g : l_theta + 2 * l_g], vec[-1])
        return cls(kind, theta, lam)


@dataclass(frozen=True)
class RobustCovariance:
    gamma_hat: np.ndarray
    psi_hat: np.ndarray
    sandwich: np.ndarray
    sigma_mr: np.ndarray
    sigma_c: np.ndarray
    n: int

    def se(self, flavor: str = "MR") -> np.ndarray:
        """Standard errors ``sqrt(diag(Sigma) / n)``."""
        s = self.sigma_mr if flavor.upper() == "MR" else self.sigma_c
        return np.sqrt(np.diag(s) / self.n)


# ---------------------------------------------------------------------------
# array-level kernels (g: (n, L), G: (n, L, K), G2: (n, L, K, K))


def _nu(g, lam, kind):
    nu = g @ lam
    if kind is Kind.EL and np.any(nu >= 1.0):
        row = int(np.argmax(nu >= 1.0))
        raise DomainError(f"EL domain violated: lambda'g = {nu[row]:.6g} >= 1 at observation {row}", row=row)
    return nu


def psi_arrays(kind, g, G, beta: StackedBeta) -> np.ndarray:
    kind = Kind.parse(kind)
    lam = beta.lam
    nu = _nu(g, lam, kind)
    Glam = np.einsum("ijk,j->ik", G, lam)
    if kind is not Kind.ETEL:
        r1 = rho_for(kind).d1(nu)
        return np.hstack([r1[:, None] * Glam, r1[:, None] * g])
    e = np.exp(nu)
    kap, tau = beta.kappa, beta.tau
    c = g @ kap
    a = kap[None, :] + np.outer(c, lam) - lam[None, :]
    Ga = np.einsum("ijk,ij->ik", G, a)
    psi1 = e[:, None] * Ga + tau * Glam
    psi2 = (tau - e + e * c)[:, None] * g
    psi3 = e[:, None] * g
    psi4 = (e - tau)[:, None]
    return np.hstack([psi1, psi2, psi3, psi4])


def psi_jacobian_arrays(kind, g, G, G2, beta: StackedBeta) -> np.ndarray:
    kind = Kind.parse(kind)
    n, L, K = G.shape
    lam = beta.lam
    nu = _nu(g, lam, kind)
    Glam = np.einsum("ijk,j->ik", G, lam)  # G_i' lambda
    lamG2 = np.einsum("j,ijab->iab", lam, G2)
    if kind is not Kind.ETEL:
        rho = rho_for(kind)
        r1, r2 = rho.d1(nu), rho.d2(nu)
        J = np.empty((n, K + L, K + L))
        J[:, :K, :K] = r1[:, None, None] * lamG2 + r2[:, None, None] * Glam[:, :, None] * Glam[:, None, :]
        J12 = r1[:, None, None] * np.transpose(G, (0, 2, 1)) + r2[:, None, None] * Glam[:, :, None] * g[:, None, :]
        J[:, :K, K:] = J12
        J[:, K:, :K] = np.transpose(J12, (0, 2, 1))
        J[:, K:, K:] = r2[:, None, None] * g[:, :, None] * g[:, None, :]
        return J

    e = np.exp(nu)
    kap, tau = beta.kappa, beta.tau
    c = g @ kap
    a = kap[None, :] + np.outer(c, lam) - lam[None, :]  # kappa + lambda g'kappa - lambda
    Ga = np.einsum("ijk,ij->ik", G, a)
    Gkap = np.einsum("ijk,j->ik", G, kap)
    aG2 = np.einsum("ij,ijab->iab", a, G2)
    Gt = np.transpose(G, (0, 2, 1))
    gg = g[:, :, None] * g[:, None, :]
    E = e[:, None, None]
    m = K + 2 * L + 1
    t0, l0, k0, u = 0, K, K + L, K + 2 * L
    J = np.zeros((n, m, m))
    # psi_1 = e G'(kappa + lambda g'kappa - lambda) + tau G'lambda
    J[:, t0:l0, t0:l0] = E * (Ga[:, :, None] * Glam[:, None, :] + aG2 + Glam[:, :, None] * Gkap[:, None, :]) + tau * lamG2
    J12 = E * (Ga[:, :, None] * g[:, None, :] + (c - 1.0)[:, None, None] * Gt) + tau * Gt
    J[:, t0:l0, l0:k0] = J12
    J13 = E * (Gt + Glam[:, :, None] * g[:, None, :])  # e G'(I + lambda g')
    J[:, t0:l0, k0:u] = J13
    J[:, t0:l0, u] = Glam
    # psi_2 = (tau - e) g + e g g'kappa
    J[:, l0:k0, t0:l0] = np.transpose(J12, (0, 2, 1))
    J[:, l0:k0, l0:k0] = (e * (c - 1.0))[:, None, None] * gg
    J[:, l0:k0, k0:u] = E * gg
    J[:, l0:k0, u] = g
    # psi_3 = e g
    J[:, k0:u, t0:l0] = np.transpose(J13, (0, 2, 1))
    J[:, k0:u, l0:k0] = E * gg
    # psi_4 = e - tau
    J[:, u, t0:l0] = e[:, None] * Glam
    J[:, u, l0:k0] = e[:, None] * g
    J[:, u, u] = -1.0
    return J


# ---------------------------------------------------------------------------
# public operations


def psi(kind, model: MomentModel, data: Dataset, beta: StackedBeta) -> np.ndarray:
    """``n x m`` matrix whose rows are ``psi(X_i, beta)``."""
    ev = evaluate(model, data, beta.theta, order=1)
    return psi_arrays(kind, ev.g, ev.G, beta)


def psi_jacobian(kind, model: MomentModel, data: Dataset, beta: StackedBeta) -> np.ndarray:
    """``n x m x m`` array of per-observation Jacobians ``d psi_i / d beta'``."""
    ev = evaluate(model, data, beta.theta, order=2)
    return psi_jacobian_arrays(kind, ev.g, ev.G, ev.G2, beta)


def safe_inverse(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Inverse through the SVD, refusing condition numbers above ``COND_LIMIT``."""
    U, s, Vt = np.linalg.svd(A)
    if s[-1] <= 0 or not np.isfinite(s).all() or s[0] / s[-1] > COND_LIMIT:
        cond = np.inf if s[-1] <= 0 else s[0] / s[-1]
        raise VarianceError(f"{what} is singular or ill-conditioned (condition number {cond:.3g}); check the model's identification")
    return (Vt.T / s) @ U.T


def _sym(A):
    return 0.5 * (A + A.T)


def covariance(kind, model: MomentModel, data: Dataset, fit) -> RobustCovariance:
    """Sandwich covariance at a fitted ``beta`` plus the conventional matrix.

    ``fit`` is a :class:`~gelboot.gel.GelFit`.
    """
    kind = Kind.parse(kind)
    beta = fit.beta()
    dims = model.dims
    n = data.n
    if n <= beta.dim:
        warnings.warn(f"n = {n} does not exceed the stacked dimension {beta.dim}", RuntimeWarning, stacklevel=2)
    ev = evaluate(model, data, beta.theta, order=2)
    P = psi_arrays(kind, ev.g, ev.G, beta)
    J = psi_jacobian_arrays(kind, ev.g, ev.G, ev.G2, beta)
    gamma = J.mean(axis=0)
    psi_hat = _sym(P.T @ P / n)
    gi = safe_inverse(gamma, "Gamma-hat")
    sandwich = _sym(gi @ psi_hat @ gi.T)
    k = dims.l_theta
    Gbar = ev.G.mean(axis=0)
    omega = ev.g.T @ ev.g / n
    oi = safe_inverse(omega, "Omega-hat")
    sigma_c = _sym(safe_inverse(_sym(Gbar.T @ oi @ Gbar), "G'Omega^{-1}G"))
    return RobustCovariance(gamma, psi_hat, sandwich, sandwich[:k, :k].copy(), sigma_c, n)
