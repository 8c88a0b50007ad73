"""Dynamic-panel simulation designs and pseudo-true values.

Two correctly specified AR(1) designs (``C1`` homoskedastic with centred
chi-square shocks, ``C2`` with individual-specific variances) and two AR(2)
designs fitted by the AR(1) moments (``M1`` with truncated chi-square
shocks, ``M2`` with truncated lognormal shocks). Every panel is generated
for ``burn_in + T`` periods and only the last ``T`` are kept.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import InputError
from .models import Dataset, PanelMomentModel
from .rho import Kind

__all__ = [
    "DgpSpec",
    "PseudoTrueResult",
    "simulate",
    "pseudo_true",
    "truncated",
    "pseudo_true_n",
    "innovations",
]

log = logging.getLogger(__name__)

NAMES = ("C1", "C2", "M1", "M2")


@dataclass(frozen=True)
class DgpSpec:
    name: str
    T: int
    n: int
    rho0: float = 0.4
    rho1: float = 0.6
    rho2: float = 0.2
    burn_in: int = 100
    seed: int = 0

    def __post_init__(self):
        name = str(self.name).upper().replace("-", "")
        object.__setattr__(self, "name", name)
        if name not in NAMES:
            raise InputError(f"unknown design {self.name!r}; expected one of C1, C2, M1, M2")
        if self.T < 3 or self.n < 1 or self.burn_in < 0:
            raise InputError("need T >= 3, n >= 1 and a nonnegative burn-in")
        if self.correctly_specified:
            if not abs(self.rho0) < 1:
                raise InputError("|rho0| must be below 1")
        elif not (-1 < self.rho2 < 1 and self.rho1 + self.rho2 < 1 and self.rho2 - self.rho1 < 1):
            raise InputError("(rho1, rho2) violate AR(2) stationarity")

    @property
    def correctly_specified(self) -> bool:
        return self.name.startswith("C")

    @property
    def rho_a(self) -> float:
        return self.rho1 - self.rho2

    @property
    def rho_b(self) -> float:
        return self.rho1 + self.rho2 / (self.rho1 - self.rho2)

    def replace(self, **kw) -> "DgpSpec":
        d = asdict(self)
        d.update(kw)
        return DgpSpec(**d)


def truncated(draw, low: float, high: float, size, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling: ``draw(rng, m)`` until ``size`` values land in ``[low, high]``."""
    size = int(np.prod(size)) if np.ndim(size) else int(size)
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        x = draw(rng, max(16, int(need * 1.1) + 8))
        x = x[(x >= low) & (x <= high)][:need]
        out[filled : filled + x.shape[0]] = x
        filled += x.shape[0]
    return out


def _std_normal(rng, m):
    return rng.standard_normal(m)


def _chi2_1(rng, m):
    return rng.standard_normal(m) ** 2


def _shifted_lognormal(rng, m):
    return np.exp(rng.standard_normal(m)) - math.sqrt(math.e)


def innovations(name: str, shape, rng: np.random.Generator, sigma2=None) -> np.ndarray:
    """Shocks ``nu_it`` of a design, shape ``(n, periods)``."""
    n, p = shape
    if name == "C1":
        return (rng.chisquare(1.0, size=shape) - 1.0) / math.sqrt(2.0)
    if name == "C2":
        return rng.standard_normal(shape) * np.sqrt(sigma2)[:, None]
    if name == "M1":
        return (truncated(_chi2_1, 0.0, 16.0, n * p, rng).reshape(shape) - 1.0) / math.sqrt(2.0)
    if name == "M2":
        return truncated(_shifted_lognormal, -math.sqrt(math.e), math.exp(3.5), n * p, rng).reshape(shape)
    raise InputError(f"unknown design {name!r}")


def simulate(spec: DgpSpec, rng: np.random.Generator) -> Dataset:
    """Draw an ``n x T`` panel with columns ``y_1..y_T``."""
    n, P = spec.n, spec.burn_in + spec.T
    Y = np.empty((n, P))
    if spec.correctly_specified:
        r = spec.rho0
        eta = rng.standard_normal(n)
        sigma2 = rng.uniform(0.2, 1.8, size=n) if spec.name == "C2" else np.ones(n)
        Y[:, 0] = eta / (1 - r) + rng.standard_normal(n) * np.sqrt(sigma2 / (1 - r * r))
        nu = innovations(spec.name, (n, P - 1), rng, sigma2)
        for t in range(1, P):
            Y[:, t] = r * Y[:, t - 1] + eta + nu[:, t - 1]
    else:
        r1, r2 = spec.rho1, spec.rho2
        eta = truncated(_std_normal, -4.0, 4.0, n, rng)
        scale = math.sqrt((1 - r2) / ((1 + r2) * ((1 - r2) ** 2 - r1 * r1)))
        mean = eta / (1 - r1 - r2)
        # both presample values use the stationary initial condition
        Y[:, 0] = mean + scale * truncated(_std_normal, -4.0, 4.0, n, rng)
        Y[:, 1] = mean + scale * truncated(_std_normal, -4.0, 4.0, n, rng)
        nu = innovations(spec.name, (n, P - 2), rng)
        for t in range(2, P):
            Y[:, t] = r1 * Y[:, t - 1] + r2 * Y[:, t - 2] + eta + nu[:, t - 2]
    return Dataset(Y[:, -spec.T :].copy(), tuple(f"y_{t}" for t in range(1, spec.T + 1)))


# ---------------------------------------------------------------------------
# pseudo-true values


def pseudo_true_n(T: int) -> int:
    """Large sample size used for pseudo-true values."""
    return 30_000 if T <= 4 else 20_000


@dataclass(frozen=True)
class PseudoTrueResult:
    values: dict
    n_used: int
    rho_a: float
    rho_b: float
    ratios: list = field(default_factory=list)

    @property
    def value(self) -> float:
        """Single value when only one estimator was requested."""
        if len(self.values) != 1:
            raise ValueError("several kinds present; index .values instead")
        return next(iter(self.values.values()))

    def to_dict(self) -> dict:
        return {"values": self.values, "n_used": self.n_used, "rho_a": self.rho_a, "rho_b": self.rho_b, "ratios": self.ratios}


_CACHE: dict = {}


def _key(spec, kind, n):
    return (spec.name, spec.T, spec.rho0, spec.rho1, spec.rho2, spec.burn_in, spec.seed, str(kind), n)


def moment_ratios(data: Dataset, T: int) -> list:
    """Per-moment ratios ``E a_j / E b_j``; each one solves a single moment condition."""
    model = PanelMomentModel(T)
    a, B = model.components(data.observations)
    return (a.mean(axis=0) / B[:, :, 0].mean(axis=0)).tolist()


def pseudo_true(spec: DgpSpec, kinds=("EL", "ET", "ETEL", "GMM"), n: int | None = None, cache_dir=None) -> PseudoTrueResult:
    """Large-sample estimates of the probability limit for each estimator.

    Results are cached in memory and, when ``cache_dir`` is given, as JSON
    files keyed by the design, the kind and the sample size.
    """
    from .gel import SolveOptions, estimate
    from .gmm import gmm_estimate

    if isinstance(kinds, (str, Kind)):
        kinds = (kinds,)
    n = n or pseudo_true_n(spec.T)
    big = spec.replace(n=n)
    values = {}
    data = None
    for kind in kinds:
        label = "GMM" if str(kind).upper() == "GMM" else Kind.parse(kind).value
        key = _key(spec, label, n)
        if key in _CACHE:
            values[label] = _CACHE[key]
            continue
        path = None
        if cache_dir is not None:
            path = Path(cache_dir) / ("pt_" + "_".join(str(k) for k in key).replace(".", "p") + ".json")
            if path.exists():
                values[label] = _CACHE[key] = float(json.loads(path.read_text())["value"])
                continue
        if data is None:
            data = simulate(big, rngmod.stream(spec.seed, rngmod.PSEUDO_TRUE))
        model = PanelMomentModel(spec.T)
        if label == "GMM":
            v = float(gmm_estimate(model, data).theta_hat[0])
        else:
            v = float(estimate(label, model, data, SolveOptions(multistart=1)).theta_hat[0])
        log.info("pseudo-true %s %s T=%d: %.6f", spec.name, label, spec.T, v)
        values[label] = _CACHE[key] = v
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"value": v, "key": [str(k) for k in key]}))
    if data is None:
        data = simulate(big, rngmod.stream(spec.seed, rngmod.PSEUDO_TRUE))
    return PseudoTrueResult(values, n, spec.rho_a, spec.rho_b, moment_ratios(data, spec.T))
