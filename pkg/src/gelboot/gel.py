"""EL, ET and ETEL point estimation.

The EL/ET estimator solves ``min_theta max_lambda mean(rho(lambda'g_i(theta)))``.
ETEL tilts the data with the ET multiplier ``lambda(theta)`` and minimizes
``log mean(exp(lambda(theta)'(g_i(theta) - gbar(theta))))``.

The inner maximization is a damped Newton method started at ``lambda = 0``.
The outer minimization is BFGS with backtracking; EL and ET use the envelope
gradient, ETEL uses central differences. The optimum is then polished by
Newton's method on the stacked first-order conditions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .errors import DomainError, EstimationError, InnerLoopError, InputError
from .models import Dataset, MomentModel, evaluate
from .rho import EL_RHO, ET_RHO, Kind, RhoFamily, rho_for
from .variance import StackedBeta, psi_arrays, psi_jacobian_arrays

__all__ = [
    "Kind",
    "RhoFamily",
    "EL_RHO",
    "ET_RHO",
    "SolveOptions",
    "GelFit",
    "inner_objective",
    "inner_loop",
    "profile_objective",
    "estimate",
    "ubc_diagnostic",
    "etel_aux",
]

log = logging.getLogger(__name__)

ARMIJO = 1e-4
BOUNDARY_FRACTION = 0.9
DIVERGENCE = 1e8


@dataclass(frozen=True)
class SolveOptions:
    inner_tol: float = 1e-10
    outer_tol: float = 1e-8
    polish_tol: float = 1e-8
    max_inner_iters: int = 100
    max_outer_iters: int = 500
    multistart: int = 5
    theta0: tuple | None = None
    el_domain_margin: float = 1e-10
    seed: int = 0
    jitter: float = 0.1
    bounds: tuple | None = None  # ((lo, hi), ...) per coordinate

    def __post_init__(self):
        for name in ("inner_tol", "outer_tol", "polish_tol", "el_domain_margin"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.multistart < 1 or self.max_inner_iters < 1 or self.max_outer_iters < 1:
            raise InputError("iteration and multistart counts must be positive")


@dataclass(frozen=True)
class GelFit:
    kind: Kind
    theta_hat: np.ndarray
    lambda_hat: np.ndarray
    probs: np.ndarray
    criterion: float
    foc_residual: float
    iterations: int
    converged: bool
    kappa_hat: np.ndarray | None = None
    tau_hat: float | None = None
    n: int = 0
    starts: list = field(default_factory=list, repr=False)

    def beta(self) -> StackedBeta:
        return StackedBeta(self.kind, self.theta_hat, self.lambda_hat, self.kappa_hat, self.tau_hat)


# ---------------------------------------------------------------------------
# inner loop


def inner_objective(kind, g: np.ndarray, lam) -> float:
    """``mean(rho(lambda'g_i))`` with the inner-loop family of ``kind``."""
    return float(np.mean(rho_for(kind)(g @ np.asarray(lam, dtype=float))))


def _newton_direction(H, grad):
    # solve (-H) d = grad; -H is positive definite for a non-degenerate sample
    L = H.shape[0]
    try:
        d = np.linalg.solve(-H, grad)
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(-H + 1e-10 * np.eye(L), grad, rcond=None)[0]


def _maximize(rho: RhoFamily, g: np.ndarray, opts: SolveOptions):
    """Damped Newton ascent on ``mean(rho(g @ lam))`` from ``lam = 0``."""
    n, L = g.shape
    lam = np.zeros(L)
    nu = np.zeros(n)
    val = 0.0
    cap = 1.0 - opts.el_domain_margin
    gnorm = np.inf
    for it in range(opts.max_inner_iters + 1):
        grad = g.T @ rho.d1(nu) / n
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= opts.inner_tol:
            return lam, val, it
        if it == opts.max_inner_iters or not np.isfinite(gnorm):
            break
        H = (g * rho.d2(nu)[:, None]).T @ g / n
        d = _newton_direction(H, grad)
        gd = g @ d
        t = 1.0
        if rho.bounded_domain:
            up = gd > 0
            if up.any():
                # stop short of the singularity: at most 90% of the remaining slack
                room = np.minimum(BOUNDARY_FRACTION * (1.0 - nu[up]), cap - nu[up])
                t = min(1.0, float(np.min(room / gd[up])))
            if t <= 0.0:
                raise DomainError("EL inner loop: no feasible step inside 1 - lambda'g > 0")
        slope = float(grad @ d)
        slack = 1e-15 * (1.0 + abs(val))
        while True:
            nu_new = nu + t * gd
            val_new = float(np.mean(rho(nu_new)))
            if np.isfinite(val_new) and val_new >= val + ARMIJO * t * slope - slack:
                break
            t *= 0.5
            if t < 1e-14:
                if rho.bounded_domain:
                    raise DomainError(
                        f"EL inner loop collapsed at the domain boundary (gradient norm {gnorm:.3g})"
                    )
                raise InnerLoopError(f"inner line search failed (gradient norm {gnorm:.3g})", gnorm)
        lam = lam + t * d
        nu = g @ lam
        val = float(np.mean(rho(nu)))
        if np.max(np.abs(nu)) > DIVERGENCE:
            raise DomainError("inner loop diverging: zero is not inside the convex hull of the moment vectors")
    raise InnerLoopError(
        f"inner loop did not converge in {opts.max_inner_iters} iterations (gradient norm {gnorm:.3g})", gnorm
    )


def inner_loop(kind, model: MomentModel, data: Dataset, theta, opts: SolveOptions | None = None):
    """``(lambda_hat(theta), criterion)`` for the inner maximization.

    ETEL uses the ET inner problem; its criterion is the ET value.
    """
    opts = opts or SolveOptions()
    g = evaluate(model, data, theta).g
    lam, val, _ = _maximize(rho_for(kind), g, opts)
    return lam, val


def _etel_value(g, lam):
    nu = g @ lam
    return float(logsumexp(nu) - np.log(g.shape[0]) - lam @ g.mean(axis=0))


def profile_objective(kind, model: MomentModel, data: Dataset, theta, opts: SolveOptions | None = None) -> float:
    """Outer objective at ``theta`` (EL/ET saddle value, or ETEL's ``l_n``)."""
    kind = Kind.parse(kind)
    opts = opts or SolveOptions()
    g = evaluate(model, data, theta).g
    lam, val, _ = _maximize(rho_for(kind), g, opts)
    return _etel_value(g, lam) if kind is Kind.ETEL else val


# ---------------------------------------------------------------------------
# outer loop


class _Objective:
    """Profile objective and gradient; failures evaluate to ``+inf``."""

    def __init__(self, kind, model, data, opts):
        self.kind, self.model, self.data, self.opts = kind, model, data, opts
        self.rho = rho_for(kind)
        self.evals = 0

    def value(self, theta):
        self.evals += 1
        try:
            g = evaluate(self.model, self.data, theta).g
            lam, val, _ = _maximize(self.rho, g, self.opts)
        except (DomainError, InnerLoopError, FloatingPointError):
            return np.inf
        return _etel_value(g, lam) if self.kind is Kind.ETEL else val

    def value_grad(self, theta):
        if self.kind is Kind.ETEL:
            f = self.value(theta)
            if not np.isfinite(f):
                return f, None
            k = theta.shape[0]
            grad = np.empty(k)
            for a in range(k):
                h = 1e-5 * max(1.0, abs(theta[a]))
                e = np.zeros(k)
                e[a] = h
                fp, fm = self.value(theta + e), self.value(theta - e)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    return np.inf, None
                grad[a] = (fp - fm) / (2 * h)
            return f, grad
        self.evals += 1
        try:
            ev = evaluate(self.model, self.data, theta, order=1)
            lam, val, _ = _maximize(self.rho, ev.g, self.opts)
        except (DomainError, InnerLoopError, FloatingPointError):
            return np.inf, None
        r1 = self.rho.d1(ev.g @ lam)
        grad = np.einsum("i,ijk,j->k", r1, ev.G, lam) / self.data.n
        return val, grad


def _clip(theta, bounds):
    if bounds is None:
        return theta
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    return np.clip(theta, lo, hi)


def _bfgs(obj: _Objective, x0, opts: SolveOptions):
    x = _clip(np.asarray(x0, dtype=float), opts.bounds)
    fx, gx = obj.value_grad(x)
    if not np.isfinite(fx):
        raise EstimationError(f"objective undefined at starting point {x}")
    k = x.shape[0]
    Hinv = np.eye(k)
    first = True
    converged = False
    it = 0
    for it in range(1, opts.max_outer_iters + 1):
        p = -Hinv @ gx
        if not gx @ p < 0:
            Hinv = np.eye(k)
            p = -gx
        if np.max(np.abs(gx)) == 0.0:
            converged = True
            break
        if first:
            # keep the first, unscaled steepest-descent step modest
            p *= min(1.0, 0.1 * max(1.0, np.max(np.abs(x))) / np.max(np.abs(p)))
        t = 1.0
        slope = float(gx @ p)
        while True:
            xn = _clip(x + t * p, opts.bounds)
            fn, gn = obj.value_grad(xn)
            if np.isfinite(fn) and fn <= fx + ARMIJO * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                fn = None
                break
        if fn is None:
            # no descent possible at working precision
            converged = True
            break
        s = xn - x
        y = gn - gx
        sy = float(s @ y)
        if sy > 1e-14 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if first:
                Hinv = np.eye(k) * (sy / float(y @ y))
            rho_ = 1.0 / sy
            V = np.eye(k) - rho_ * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho_ * np.outer(s, s)
            first = False
        x, fx, gx = xn, fn, gn
        if np.max(np.abs(s)) <= opts.outer_tol * (1.0 + np.max(np.abs(x))):
            converged = True
            break
    return x, fx, it, converged


def etel_aux(g: np.ndarray, lam: np.ndarray):
    """ETEL auxiliary parameters ``(kappa_hat, tau_hat)`` at ``(theta_hat, lambda_hat)``."""
    e = np.exp(g @ lam)
    tau = float(e.mean())
    M = (g * (e / tau)[:, None]).T @ g / g.shape[0]
    kappa = -np.linalg.solve(M, g.mean(axis=0))
    return kappa, tau


def _initial_beta(kind, g, theta, lam):
    if kind is Kind.ETEL:
        kappa, tau = etel_aux(g, lam)
        return StackedBeta(kind, theta, lam, kappa, tau)
    return StackedBeta(kind, theta, lam)


def _foc(kind, model, data, beta):
    ev = evaluate(model, data, beta.theta, order=2)
    P = psi_arrays(kind, ev.g, ev.G, beta)
    return ev, P.mean(axis=0)


def _polish(kind, model, data, beta: StackedBeta, max_iter: int = 20):
    """Newton on ``mean(psi(beta)) = 0``; keeps only residual-reducing steps."""
    dims = model.dims
    ev, pbar = _foc(kind, model, data, beta)
    res = float(np.max(np.abs(pbar)))
    theta0 = beta.theta.copy()
    for _ in range(max_iter):
        if res < 1e-15:
            break
        J = psi_jacobian_arrays(kind, ev.g, ev.G, ev.G2, beta).mean(axis=0)
        try:
            step = np.linalg.solve(J, -pbar)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J + 1e-10 * np.eye(J.shape[0]), -pbar, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        trial = StackedBeta.from_vector(kind, beta.vector() + step, dims.l_theta, dims.l_g)
        if np.max(np.abs(trial.theta - theta0)) > 1e-3 * (1.0 + np.max(np.abs(theta0))):
            break  # heading for a different root of the first-order conditions
        try:
            ev_t, pbar_t = _foc(kind, model, data, trial)
        except DomainError:
            break
        res_t = float(np.max(np.abs(pbar_t)))
        if not res_t < res:
            break
        beta, ev, pbar, res = trial, ev_t, pbar_t, res_t
    return beta, ev, res


def _finalize(kind, model, data, beta: StackedBeta, iterations: int, opts: SolveOptions, starts):
    n = data.n
    g = evaluate(model, data, beta.theta).g
    theta, lam = beta.theta, beta.lam
    nu = g @ lam
    kappa = tau = None
    if kind is Kind.ETEL:
        probs = np.exp(nu - logsumexp(nu))
        crit = _etel_value(g, lam)
        kappa, tau = etel_aux(g, lam)
        beta = StackedBeta(kind, theta, lam, kappa, tau)
    elif kind is Kind.EL:
        raw = 1.0 / (n * (1.0 - nu))
        probs = raw / raw.sum()
        crit = inner_objective(kind, g, lam)
    else:
        probs = np.exp(nu - logsumexp(nu))
        crit = inner_objective(kind, g, lam)
    _, pbar = _foc(kind, model, data, beta)
    res = float(np.max(np.abs(pbar)))
    return GelFit(
        kind=kind,
        theta_hat=theta,
        lambda_hat=lam,
        probs=probs,
        criterion=crit,
        foc_residual=res,
        iterations=iterations,
        converged=bool(res <= opts.polish_tol and np.all(probs > 0)),
        kappa_hat=kappa,
        tau_hat=tau,
        n=n,
        starts=starts,
    )


def _default_start(model, data):
    # identity-weighted GMM as a data-driven start
    from .gmm import first_step

    try:
        return first_step(model, data)
    except Exception:  # noqa: BLE001 - any failure falls back to the origin
        return np.zeros(model.dims.l_theta)


def estimate(kind, model: MomentModel, data: Dataset, opts: SolveOptions | None = None) -> GelFit:
    """Fit EL, ET or ETEL; see the module docstring for the algorithm."""
    kind = Kind.parse(kind)
    opts = opts or SolveOptions()
    dims = model.dims
    if data.n < 2:
        raise InputError("estimation needs at least two observations")
    if data.n <= dims.l_g:
        warnings.warn(f"n = {data.n} does not exceed the number of moments {dims.l_g}", RuntimeWarning, stacklevel=2)
    theta0 = np.asarray(opts.theta0, dtype=float).reshape(-1) if opts.theta0 is not None else _default_start(model, data)
    if theta0.shape[0] != dims.l_theta:
        raise InputError(f"theta0 has length {theta0.shape[0]}, expected {dims.l_theta}")
    starts = [theta0]
    if opts.multistart > 1:
        rng = rngmod.stream(opts.seed, rngmod.MULTISTART)
        scale = opts.jitter * (1.0 + np.abs(theta0))
        starts += [theta0 + scale * rng.standard_normal(dims.l_theta) for _ in range(opts.multistart - 1)]

    obj = _Objective(kind, model, data, opts)
    trace = []
    best = None
    for x0 in starts:
        try:
            x, fx, iters, conv = _bfgs(obj, x0, opts)
        except EstimationError as exc:
            trace.append({"start": x0.tolist(), "error": str(exc)})
            continue
        trace.append({"start": x0.tolist(), "theta": x.tolist(), "objective": fx, "iterations": iters, "converged": conv})
        cand = (fx, float(np.linalg.norm(x)), x, iters)
        if best is None or cand[0] < best[0] - 1e-12 or (abs(cand[0] - best[0]) <= 1e-12 and cand[1] < best[1]):
            best = cand
    if best is None:
        raise EstimationError("no starting point produced a finite objective", trace)
    _, _, theta, iters = best

    g = evaluate(model, data, theta).g
    lam, _, _ = _maximize(rho_for(kind), g, opts)
    beta = _initial_beta(kind, g, theta, lam)
    polished, _, res = _polish(kind, model, data, beta)
    fit = _finalize(kind, model, data, polished, iters, opts, trace)
    if not fit.converged:
        log.debug("%s fit: FOC residual %.3g above tolerance", kind.value, fit.foc_residual)
    return fit


def ubc_diagnostic(fit: GelFit, model: MomentModel, data: Dataset, opts: SolveOptions | None = None) -> dict:
    """Smallest EL slack ``1 - lambda'g_i`` and whether it is dangerously small."""
    if Kind.parse(fit.kind) is not Kind.EL:
        raise InputError("the UBC diagnostic applies to EL fits only")
    opts = opts or SolveOptions()
    g = evaluate(model, data, fit.theta_hat).g
    slack = float(np.min(1.0 - g @ fit.lambda_hat))
    return {"min_slack": slack, "flag": bool(slack < 100.0 * opts.el_domain_margin)}
