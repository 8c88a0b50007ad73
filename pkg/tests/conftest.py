import numpy as np
import pytest

from gelboot import rng as rngmod
from gelboot.dgp import DgpSpec, simulate
from gelboot.models import Dataset, FunctionMomentModel, LinearIVModel, PanelMomentModel


def bisect(f, lo, hi, iters=200):
    """Plain bisection; ``f(lo)`` and ``f(hi)`` must differ in sign."""
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def scalar_moment_model(values):
    """Model with g_i(theta) = values_i, independent of theta (L_theta = L_g = 1)."""
    values = np.asarray(values, dtype=float)
    data = Dataset(values[:, None], ("g",))
    model = FunctionMomentModel(
        1, 1,
        g=lambda X, th: X[:, :1] + 0.0 * th[0],
        G=lambda X, th: np.zeros((X.shape[0], 1, 1)),
        G2=lambda X, th: np.zeros((X.shape[0], 1, 1, 1)),
    )
    return model, data


class QuadraticModel(FunctionMomentModel):
    """Nonlinear moments g_j = z_j * (y - exp(x'theta)) with analytic derivatives."""

    def __init__(self, k, l_g):
        self.k = k
        super().__init__(k, l_g, self._g, self._G, self._G2)

    def _parts(self, X, th):
        x = X[:, 1 : 1 + self.k]
        z = X[:, 1 + self.k :]
        return X[:, 0], x, z, np.exp(x @ th)

    def _g(self, X, th):
        y, x, z, m = self._parts(X, th)
        return z * (y - m)[:, None]

    def _G(self, X, th):
        y, x, z, m = self._parts(X, th)
        return -(z[:, :, None] * (m[:, None] * x)[:, None, :])

    def _G2(self, X, th):
        y, x, z, m = self._parts(X, th)
        xx = x[:, :, None] * x[:, None, :]
        return -(z[:, :, None, None] * (m[:, None, None] * xx)[:, None, :, :])


def exp_regression_data(rng, n, k, l_g, theta=None):
    theta = np.full(k, 0.2) if theta is None else theta
    x = rng.normal(scale=0.5, size=(n, k))
    extra = rng.normal(size=(n, l_g - k))
    z = np.column_stack([x, extra + 0.3 * x[:, :1]])[:, :l_g]
    y = np.exp(x @ theta) + rng.normal(scale=0.5, size=n) * (1 + 0.3 * np.abs(extra[:, 0] if l_g > k else 0))
    X = np.column_stack([y, x, z])
    return Dataset(X, tuple(f"c{j}" for j in range(X.shape[1])))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def c1_panel():
    return simulate(DgpSpec("C1", 4, 200), rngmod.stream(11, 0))


@pytest.fixture(scope="session")
def panel_model():
    return PanelMomentModel(4)


def iv_data(rng, n=300, over=2, hetero=True):
    z = rng.normal(size=(n, 1 + over))
    v = rng.normal(size=n)
    x = z.sum(axis=1) * 0.5 + v
    e = 0.5 * v + rng.normal(size=n) * (1 + 0.5 * np.abs(z[:, 0]) if hetero else 1)
    y = 1.0 + 0.5 * x + e
    X = np.column_stack([y, x, z])
    names = ("y", "x") + tuple(f"z{j}" for j in range(1 + over))
    data = Dataset(X, names)
    model = LinearIVModel(0, [-1, 1], [-1] + list(range(2, 3 + over)))
    return model, data
