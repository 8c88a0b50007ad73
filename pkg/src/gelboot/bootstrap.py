"""Percentile-t bootstrap without recentering, plus comparison resamplers.

A replicate draws ``n`` rows with replacement, re-estimates with the same
estimator and the *original* moment function, recomputes the robust
variance and studentizes around the full-sample estimate:

    T* = (theta*_r - theta_r) / sqrt(Sigma*_MR,rr / n).

Replicate ``b`` always uses the random stream ``(seed, stream_id, b,
attempt)``, so the draws do not depend on scheduling or worker count.
"""

from __future__ import annotations

import csv
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import BootstrapError, GelbootError, InputError
from .gel import GelFit, SolveOptions, estimate
from .gmm import GmmFit, GmmOptions, gmm_estimate
from .inference import RestrictionFn, wald_form
from .models import Dataset, MomentModel, RecenteredModel, evaluate
from .rho import Kind
from .variance import RobustCovariance, covariance

__all__ = [
    "SchemeKind",
    "ResampleScheme",
    "BootstrapDistribution",
    "BootQuantile",
    "resample",
    "resample_indices",
    "bootstrap_t",
    "bootstrap_wald",
    "quantile",
    "discrete_quantile",
    "bootstrap_ci",
    "hh_recentered_bootstrap",
    "replicate_fit",
    "default_workers",
    "MAX_FAILURE_SHARE",
]

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.05
RETRY_BUDGET = 2
_NUMERIC = (GelbootError, np.linalg.LinAlgError, FloatingPointError)


def default_workers() -> int:
    """Worker count from ``GELBOOT_THREADS`` (default 1)."""
    raw = os.environ.get("GELBOOT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"GELBOOT_THREADS must be an integer, got {raw!r}") from None


class SchemeKind(str, Enum):
    IID = "IID"
    BN = "BN"
    SHRINKAGE = "SHRINKAGE"


@dataclass(frozen=True)
class ResampleScheme:
    kind: SchemeKind
    weights: np.ndarray | None = None  # None means uniform
    epsilon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SchemeKind(str(getattr(self.kind, "value", self.kind)).upper()))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-10):
                raise InputError("resampling weights must be nonnegative and sum to one")
            object.__setattr__(self, "weights", w / w.sum())

    @property
    def stream_id(self) -> int:
        return rngmod.BOOT_IID if self.kind is SchemeKind.IID else rngmod.BOOT_WEIGHTED

    @classmethod
    def iid(cls) -> "ResampleScheme":
        return cls(SchemeKind.IID)

    @classmethod
    def brown_newey(cls, fit: GelFit) -> "ResampleScheme":
        """Resample with the fit's own implied probabilities."""
        return cls(SchemeKind.BN, np.asarray(fit.probs))

    @classmethod
    def shrinkage(cls, fit: GelFit, epsilon: float | None = None) -> "ResampleScheme":
        """``eps p_i + (1 - eps) / n`` with default ``eps = n^{-1/2}``."""
        p = np.asarray(fit.probs)
        n = p.shape[0]
        eps = n ** -0.5 if epsilon is None else float(epsilon)
        if not 0 <= eps <= 1:
            raise InputError("shrinkage epsilon must lie in [0, 1]")
        return cls(SchemeKind.SHRINKAGE, eps * p + (1 - eps) / n, eps)

    @classmethod
    def from_name(cls, name: str, fit: GelFit | None = None, epsilon: float | None = None) -> "ResampleScheme":
        key = str(name).upper()
        if key in ("IID", "L"):
            return cls.iid()
        if fit is None:
            raise InputError(f"scheme {name} needs a fitted model")
        if key in ("BN", "BN_WEIGHTED"):
            return cls.brown_newey(fit)
        if key == "SHRINKAGE":
            return cls.shrinkage(fit, epsilon)
        raise InputError(f"unknown resampling scheme {name!r}")


def resample_indices(n: int, scheme: ResampleScheme, rng: np.random.Generator) -> np.ndarray:
    if scheme.weights is None:
        return rng.integers(0, n, size=n)
    if scheme.weights.shape[0] != n:
        raise InputError("scheme weights do not match the sample size")
    return rng.choice(n, size=n, replace=True, p=scheme.weights)


def resample(data: Dataset, scheme: ResampleScheme, rng: np.random.Generator) -> Dataset:
    """``n`` rows drawn with replacement according to ``scheme``."""
    return data.take(resample_indices(data.n, scheme, rng))


# ---------------------------------------------------------------------------
# distributions and quantiles


@dataclass(frozen=True)
class BootQuantile:
    level: float
    value: float
    which: str


@dataclass
class BootstrapDistribution:
    B: int
    t_star: np.ndarray
    w_star: np.ndarray | None = None
    j_star: np.ndarray | None = None
    failures: list = field(default_factory=list)
    warning: str | None = None

    @property
    def abs_t_star(self) -> np.ndarray:
        return np.abs(self.t_star)

    def draws(self, which: str) -> np.ndarray:
        key = which.upper()
        if key == "T":
            return self.t_star
        if key in ("|T|", "ABS", "ABS_T"):
            return self.abs_t_star
        if key == "W":
            if self.w_star is None:
                raise InputError("distribution holds no Wald draws")
            return self.w_star
        if key == "J":
            if self.j_star is None:
                raise InputError("distribution holds no J draws")
            return self.j_star
        raise InputError(f"unknown statistic {which!r}; use T, |T|, W or J")

    def to_csv(self, path, which: str = "T") -> None:
        name = {"T": "t_star", "|T|": "abs_t_star", "W": "w_star", "J": "j_star"}.get(which.upper(), "draw")
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([name])
            for v in self.draws(which):
                w.writerow([repr(float(v))])


def discrete_quantile(draws, level: float) -> float:
    """Smallest order statistic ``z`` minimizing ``|#{draws <= z}/B - level|``."""
    s = np.sort(np.asarray(draws, dtype=float))
    B = s.shape[0]
    if B == 0:
        raise BootstrapError("empty bootstrap distribution: no quantile", [])
    k = np.searchsorted(s, s, side="right")
    d = np.abs(k - level * B)
    idx = int(np.flatnonzero(d <= d.min() + 1e-9 * max(1.0, B))[0])
    return float(s[idx])


def quantile(dist: BootstrapDistribution, which: str, alpha: float) -> BootQuantile:
    """Bootstrap critical value at level ``1 - alpha``."""
    if not 0 <= alpha <= 1:
        raise InputError("alpha must lie in [0, 1]")
    return BootQuantile(1 - alpha, discrete_quantile(dist.draws(which), 1 - alpha), which.upper())


def bootstrap_ci(fit, cov: RobustCovariance | None, dist: BootstrapDistribution, r: int, alpha: float, shape: str = "symmetric", se: float | None = None):
    """Percentile-t interval for ``theta_r``.

    ``se`` defaults to ``sqrt(Sigma_MR,rr / n)`` from ``cov``.
    """
    th = float(np.asarray(fit.theta_hat)[r])
    if se is None:
        se = float(np.sqrt(cov.sigma_mr[r, r] / cov.n))
    if shape == "one_sided":
        return (th - quantile(dist, "T", alpha).value * se, np.inf)
    if shape == "symmetric":
        z = quantile(dist, "|T|", alpha).value
        return (th - z * se, th + z * se)
    if shape == "equal_tailed":
        hi = quantile(dist, "T", alpha / 2).value
        lo = quantile(dist, "T", 1 - alpha / 2).value
        return (th - hi * se, th - lo * se)
    raise InputError(f"unknown interval shape {shape!r}")


# ---------------------------------------------------------------------------
# replicates


def replicate_fit(kind, model: MomentModel, boot: Dataset, theta_hat, opts: SolveOptions, seed: int):
    """Warm-started fit of a bootstrap sample with one multistart fallback.

    Returns ``(fit, cov)``; raises a package error if both attempts fail.
    """
    warm = replace(opts, theta0=tuple(np.asarray(theta_hat, dtype=float)), multistart=1)
    try:
        fit = estimate(kind, model, boot, warm)
        if fit.converged:
            return fit, covariance(kind, model, boot, fit)
    except _NUMERIC as exc:
        log.debug("warm start failed: %s", exc)
    wide = replace(warm, multistart=max(3, opts.multistart), seed=seed)
    fit = estimate(kind, model, boot, wide)
    if not fit.converged:
        raise GelbootError(f"replicate fit did not converge (FOC residual {fit.foc_residual:.3g})")
    return fit, covariance(kind, model, boot, fit)


@dataclass(frozen=True)
class _GelJob:
    kind: Kind
    model: MomentModel
    data: Dataset
    theta_hat: np.ndarray
    r: int
    scheme: ResampleScheme
    seed: int
    opts: SolveOptions
    eta: RestrictionFn | None = None

    def __call__(self, b: int):
        n = self.data.n
        reasons = []
        for attempt in range(RETRY_BUDGET + 1):
            g = rngmod.stream(self.seed, self.scheme.stream_id, b, attempt)
            boot = resample(self.data, self.scheme, g)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fit, cov = replicate_fit(self.kind, self.model, boot, self.theta_hat, self.opts, rngmod.child_seed(g))
                th = fit.theta_hat
                v = cov.sigma_mr[self.r, self.r]
                if not v > 0:
                    raise GelbootError("nonpositive bootstrap variance")
                t = (th[self.r] - self.theta_hat[self.r]) / np.sqrt(v / n)
                w = None
                if self.eta is not None:
                    diff = self.eta(th) - self.eta(self.theta_hat)
                    w = wald_form(diff, self.eta.jacobian(th), cov.sigma_mr, n)
                return b, float(t), w, None, reasons
            except _NUMERIC as exc:
                reasons.append(f"replicate {b} attempt {attempt}: {type(exc).__name__}: {exc}")
        return b, None, None, None, reasons


@dataclass(frozen=True)
class _HHJob:
    model: MomentModel
    data: Dataset
    theta_hat: np.ndarray
    r: int
    seed: int
    opts: GmmOptions

    def __call__(self, b: int):
        n = self.data.n
        reasons = []
        for attempt in range(RETRY_BUDGET + 1):
            g = rngmod.stream(self.seed, rngmod.BOOT_HH, b, attempt)
            boot = resample(self.data, ResampleScheme.iid(), g)
            try:
                shift = evaluate(self.model, self.data, self.theta_hat).g.mean(axis=0)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    gf = gmm_estimate(RecenteredModel(self.model, shift), boot, replace(self.opts, theta0=tuple(self.theta_hat)))
                v = gf.sigma_c[self.r, self.r]
                if not v > 0:
                    raise GelbootError("nonpositive bootstrap variance")
                t = (gf.theta_hat[self.r] - self.theta_hat[self.r]) / np.sqrt(v / n)
                return b, float(t), None, gf.j_stat, reasons
            except _NUMERIC as exc:
                reasons.append(f"replicate {b} attempt {attempt}: {type(exc).__name__}: {exc}")
        return b, None, None, None, reasons


def _base_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return rngmod.child_seed(rng)
    if rng is None:
        raise InputError("a seed or generator is required")
    return int(rng)


def _collect(job, B: int, workers: int, want_w: bool, want_j: bool) -> BootstrapDistribution:
    if B < 0:
        raise InputError("B must be nonnegative")
    if workers > 1 and B > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(job, range(B), chunksize=max(1, B // (4 * workers))))
    else:
        results = [job(b) for b in range(B)]
    results.sort(key=lambda x: x[0])
    ok = [res for res in results if res[1] is not None]
    failures = [{"replicate": res[0], "reasons": res[4]} for res in results if res[1] is None]
    t = np.array([res[1] for res in ok], dtype=float)
    w = np.array([res[2] for res in ok], dtype=float) if want_w else None
    j = np.array([res[3] for res in ok], dtype=float) if want_j else None
    dist = BootstrapDistribution(B, t, w, j, failures)
    if failures:
        dist.warning = f"{len(failures)} of {B} replicates failed"
        if len(failures) > MAX_FAILURE_SHARE * B:
            raise BootstrapError(f"{len(failures)} of {B} bootstrap replicates failed (limit {MAX_FAILURE_SHARE:.0%})", failures)
        warnings.warn(dist.warning, RuntimeWarning, stacklevel=3)
    return dist


def bootstrap_t(fit: GelFit, cov: RobustCovariance, model: MomentModel, data: Dataset, scheme: ResampleScheme, B: int, r: int, rng, opts: SolveOptions | None = None, workers: int = 1) -> BootstrapDistribution:
    """Draws of ``T*_MR`` for coordinate ``r``; ``rng`` is a seed or a generator."""
    if not fit.converged:
        warnings.warn("bootstrapping a fit that did not meet the FOC tolerance", RuntimeWarning, stacklevel=2)
    job = _GelJob(Kind.parse(fit.kind), model, data, np.asarray(fit.theta_hat), r, scheme, _base_seed(rng), opts or SolveOptions())
    return _collect(job, B, workers, False, False)


def bootstrap_wald(fit: GelFit, cov: RobustCovariance, model: MomentModel, data: Dataset, scheme: ResampleScheme, B: int, eta: RestrictionFn, rng, opts: SolveOptions | None = None, workers: int = 1, r: int = 0) -> BootstrapDistribution:
    """Draws of ``W*_MR`` (the ``T*`` draws for coordinate ``r`` come along)."""
    job = _GelJob(Kind.parse(fit.kind), model, data, np.asarray(fit.theta_hat), r, scheme, _base_seed(rng), opts or SolveOptions(), eta)
    return _collect(job, B, workers, True, False)


def hh_recentered_bootstrap(gmm_fit: GmmFit, model: MomentModel, data: Dataset, B: int, rng, r: int = 0, opts: GmmOptions | None = None, workers: int = 1) -> BootstrapDistribution:
    """Recentered (Hall-Horowitz) bootstrap of two-step GMM.

    Replicates use ``g(x, theta) - gbar_n(theta_hat)`` and the conventional
    standard error; ``j_star`` holds the recentered J statistics.
    """
    job = _HHJob(model, data, np.asarray(gmm_fit.theta_hat), r, _base_seed(rng), opts or GmmOptions())
    return _collect(job, B, workers, False, True)
