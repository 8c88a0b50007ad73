"""Datasets and moment-condition models.

A moment model maps one observation ``x_i`` and a parameter ``theta`` to the
moment vector ``g(x_i, theta)`` of length ``L_g``. Estimators consume three
arrays produced by :func:`evaluate`:

* ``g``  with shape ``(n, L_g)``,
* ``G``  with shape ``(n, L_g, L_theta)``, ``G[i, j, a] = d g_j / d theta_a``,
* ``G2`` with shape ``(n, L_g, L_theta, L_theta)``,
  ``G2[i, j, a, b] = d^2 g_j / d theta_a d theta_b``.

Flattening ``G2[i]`` in C order gives the row-major ``(moment, a, b)``
layout exposed as :attr:`MomentEval.G2_flat`.
"""

from __future__ import annotations

import abc
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InputError

__all__ = [
    "Dataset",
    "ModelDims",
    "MomentEval",
    "MomentModel",
    "LinearMomentModel",
    "LinearIVModel",
    "PanelMomentModel",
    "MatchingMomentModel",
    "FunctionMomentModel",
    "RecenteredModel",
    "evaluate",
    "finite_diff_check",
    "load_csv",
    "write_csv",
    "model_from_descriptor",
    "fd_step",
]


@dataclass(frozen=True)
class Dataset:
    """An iid sample stored as an ``n x k`` float matrix with column names."""

    observations: np.ndarray
    columns: tuple = ()

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise InputError(f"observations must be a non-empty 2-d array, got shape {obs.shape}")
        bad = ~np.isfinite(obs)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise InputError(f"non-finite entry in data row {row}")
        obs.setflags(write=False)
        cols = tuple(self.columns) if self.columns else tuple(f"x{j}" for j in range(obs.shape[1]))
        if len(cols) != obs.shape[1]:
            raise InputError(f"{len(cols)} column names for {obs.shape[1]} columns")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    def take(self, idx) -> "Dataset":
        """Rows ``idx`` (with repetition) as a new dataset."""
        return Dataset(self.observations[np.asarray(idx)], self.columns)

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise InputError(f"unknown column {name!r}; have {list(self.columns)}") from None


@dataclass(frozen=True)
class ModelDims:
    l_theta: int
    l_g: int

    def __post_init__(self):
        if not 1 <= self.l_theta <= self.l_g:
            raise InputError(f"need 1 <= L_theta <= L_g, got {self.l_theta}, {self.l_g}")

    @property
    def overidentified(self) -> bool:
        return self.l_g > self.l_theta


@dataclass(frozen=True)
class MomentEval:
    g: np.ndarray
    G: np.ndarray | None = None
    G2: np.ndarray | None = None

    @property
    def G_flat(self) -> np.ndarray:
        return self.G.reshape(self.G.shape[0], -1)

    @property
    def G2_flat(self) -> np.ndarray:
        return self.G2.reshape(self.G2.shape[0], -1)


class MomentModel(abc.ABC):
    """Contract for a moment function ``g(x, theta)``.

    Subclasses implement :meth:`moments` and, when ``order >= 1``,
    :meth:`jacobian`; ``order = 2`` models also implement :meth:`hessian`.
    A model with ``order = 1`` can set ``fd_hessian = True`` to have
    :func:`evaluate` build second derivatives by central differences of the
    Jacobian.
    """

    order: int = 2
    fd_hessian: bool = False
    linear: bool = False

    @property
    @abc.abstractmethod
    def dims(self) -> ModelDims: ...

    @abc.abstractmethod
    def moments(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray: ...

    def jacobian(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"model": type(self).__name__}


def fd_step(theta: np.ndarray) -> np.ndarray:
    """Central-difference step per coordinate: ``max(1e-6, 1e-7 |theta|)``."""
    return np.maximum(1e-6, 1e-7 * np.abs(theta))


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        flat = arr.reshape(arr.shape[0], -1)
        row = int(np.argwhere(~np.isfinite(flat).all(axis=1))[0, 0])
        raise DomainError(f"non-finite {what} at observation {row}", row=row)
    return arr


def evaluate(model: MomentModel, data: Dataset, theta, order: int = 0) -> MomentEval:
    """Evaluate ``g`` and, depending on ``order``, its first two derivatives."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    dims = model.dims
    if theta.shape[0] != dims.l_theta:
        raise InputError(f"theta has length {theta.shape[0]}, model expects {dims.l_theta}")
    if not np.all(np.isfinite(theta)):
        raise InputError("theta must be finite")
    if order not in (0, 1, 2):
        raise InputError("order must be 0, 1 or 2")
    supported = 2 if (model.order == 1 and model.fd_hessian) else model.order
    if order > supported:
        raise InputError(f"{type(model).__name__} supports derivatives up to order {supported}")
    X = data.observations
    g = _check_finite(np.asarray(model.moments(X, theta), dtype=float), "moment")
    G = G2 = None
    if order >= 1:
        G = _check_finite(np.asarray(model.jacobian(X, theta), dtype=float), "Jacobian")
    if order == 2:
        if model.order >= 2:
            G2 = np.asarray(model.hessian(X, theta), dtype=float)
        else:
            G2 = _fd_hessian(model, X, theta)
        _check_finite(G2, "second derivative")
    return MomentEval(g, G, G2)


def _fd_hessian(model: MomentModel, X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    h = fd_step(theta)
    n, lg = X.shape[0], model.dims.l_g
    k = theta.shape[0]
    out = np.empty((n, lg, k, k))
    for b in range(k):
        e = np.zeros(k)
        e[b] = h[b]
        out[..., b] = (model.jacobian(X, theta + e) - model.jacobian(X, theta - e)) / (2 * h[b])
    return out


def finite_diff_check(model: MomentModel, data: Dataset, theta, step: float = 1e-6) -> float:
    """Largest relative error of analytic ``G`` and ``G2`` against central differences.

    The error of each array is ``max|analytic - fd| / max(1, max|analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    k = theta.shape[0]
    ev = evaluate(model, data, theta, order=2)
    fd_G = np.empty_like(ev.G)
    fd_G2 = np.empty_like(ev.G2)
    for a in range(k):
        e = np.zeros(k)
        e[a] = step
        up = evaluate(model, data, theta + e, order=1)
        dn = evaluate(model, data, theta - e, order=1)
        fd_G[..., a] = (up.g - dn.g) / (2 * step)
        fd_G2[..., a] = (up.G - dn.G) / (2 * step)

    def rel(exact, approx):
        return float(np.max(np.abs(exact - approx)) / max(1.0, float(np.max(np.abs(exact)))))

    return max(rel(ev.G, fd_G), rel(ev.G2, fd_G2))


class LinearMomentModel(MomentModel):
    """Models of the form ``g_i(theta) = a_i - B_i theta``.

    Subclasses provide :meth:`components`; derivatives follow exactly and the
    second derivative is identically zero.
    """

    linear = True

    @abc.abstractmethod
    def components(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``a`` of shape ``(n, L_g)`` and ``B`` of shape ``(n, L_g, L_theta)``."""

    def moments(self, X, theta):
        a, B = self.components(X)
        return a - B @ theta

    def jacobian(self, X, theta):
        return -self.components(X)[1]

    def hessian(self, X, theta):
        d = self.dims
        return np.zeros((X.shape[0], d.l_g, d.l_theta, d.l_theta))


class LinearIVModel(LinearMomentModel):
    """Instrumental-variable moments ``z_i (y_i - x_i' theta)``.

    Column indices refer to the dataset; ``-1`` in ``x`` or ``z`` denotes a
    constant regressor/instrument.
    """

    def __init__(self, y: int, x: Sequence[int], z: Sequence[int] | None = None):
        self.y = int(y)
        self.x = [int(c) for c in x]
        self.z = [int(c) for c in (x if z is None else z)]
        self._dims = ModelDims(len(self.x), len(self.z))

    @property
    def dims(self):
        return self._dims

    @staticmethod
    def _cols(X, idx):
        return np.column_stack([np.ones(X.shape[0]) if c < 0 else X[:, c] for c in idx])

    def components(self, X):
        Z = self._cols(X, self.z)
        R = self._cols(X, self.x)
        y = X[:, self.y]
        return Z * y[:, None], Z[:, :, None] * R[:, None, :]

    def describe(self):
        return {"model": "linear_iv", "y": self.y, "x": self.x, "z": self.z}


class PanelMomentModel(LinearMomentModel):
    """AR(1) dynamic-panel moments in levels and differences.

    For ``t = 3..T`` the difference moments ``y_{t-s} (dy_t - rho dy_{t-1})``
    use ``s = 2..t-1`` in increasing ``s``; the level moments
    ``dy_{t-1} (y_t - rho y_{t-1})`` follow in increasing ``t``. The panel
    occupies columns ``y_cols`` (``y_1..y_T``) of the data matrix.
    """

    def __init__(self, T: int, y_cols: Sequence[int] | None = None):
        if T < 3:
            raise InputError("panel moments need T >= 3")
        self.T = int(T)
        self.y_cols = list(range(T)) if y_cols is None else [int(c) for c in y_cols]
        if len(self.y_cols) != self.T:
            raise InputError(f"need {T} panel columns, got {len(self.y_cols)}")
        self.dif_index = [(t, s) for t in range(3, T + 1) for s in range(2, t)]
        self.sys_index = list(range(3, T + 1))
        self._dims = ModelDims(1, len(self.dif_index) + len(self.sys_index))

    @staticmethod
    def moment_count(T: int) -> int:
        return (T + 1) * (T - 2) // 2

    @property
    def dims(self):
        return self._dims

    def components(self, X):
        Y = X[:, self.y_cols]
        dY = np.diff(Y, axis=1)  # dY[:, t-2] = y_t - y_{t-1}

        def y(t):
            return Y[:, t - 1]

        def dy(t):
            return dY[:, t - 2]

        a_cols, b_cols = [], []
        for t, s in self.dif_index:
            a_cols.append(y(t - s) * dy(t))
            b_cols.append(y(t - s) * dy(t - 1))
        for t in self.sys_index:
            a_cols.append(dy(t - 1) * y(t))
            b_cols.append(dy(t - 1) * y(t - 1))
        a = np.column_stack(a_cols)
        B = np.column_stack(b_cols)[:, :, None]
        return a, B

    def describe(self):
        return {"model": "panel", "T": self.T, "y_cols": self.y_cols}


class MatchingMomentModel(LinearMomentModel):
    """Least-squares moments augmented with matched population moments.

    ``g_i(beta) = [x_i (y_i - x_i' beta); m(x_i, y_i) - target]`` where each
    component of ``m`` is a product of data columns (a monomial given as a
    tuple of column indices, repetitions allowed).
    """

    def __init__(self, y: int, x: Sequence[int], monomials: Sequence[Sequence[int]], targets):
        self.y = int(y)
        self.x = [int(c) for c in x]
        self.monomials = [tuple(int(c) for c in m) for m in monomials]
        self.targets = np.asarray(targets, dtype=float).reshape(-1)
        if len(self.monomials) != self.targets.shape[0]:
            raise InputError("one target value per matched moment is required")
        self._dims = ModelDims(len(self.x), len(self.x) + len(self.monomials))

    @property
    def dims(self):
        return self._dims

    def components(self, X):
        R = LinearIVModel._cols(X, self.x)
        y = X[:, self.y]
        n, k = R.shape
        m = np.column_stack([np.prod(X[:, list(mono)], axis=1) for mono in self.monomials])
        a = np.hstack([R * y[:, None], m - self.targets])
        B = np.zeros((n, self._dims.l_g, k))
        B[:, :k, :] = R[:, :, None] * R[:, None, :]
        return a, B

    def describe(self):
        return {
            "model": "matching",
            "y": self.y,
            "x": self.x,
            "monomials": [list(m) for m in self.monomials],
            "targets": self.targets.tolist(),
        }


class FunctionMomentModel(MomentModel):
    """Wrap user callables ``g(X, theta)``, ``G(X, theta)``, ``G2(X, theta)``.

    Omitting ``G2`` gives an order-1 model whose second derivatives are built
    by finite differences.
    """

    def __init__(self, l_theta: int, l_g: int, g: Callable, G: Callable, G2: Callable | None = None):
        self._dims = ModelDims(l_theta, l_g)
        self._g, self._G, self._G2 = g, G, G2
        self.order = 2 if G2 is not None else 1
        self.fd_hessian = G2 is None

    @property
    def dims(self):
        return self._dims

    def moments(self, X, theta):
        return self._g(X, theta)

    def jacobian(self, X, theta):
        return self._G(X, theta)

    def hessian(self, X, theta):
        return self._G2(X, theta)


class RecenteredModel(MomentModel):
    """``g(x, theta) - shift``: the recentered moment function used by the
    Hall-Horowitz bootstrap. Derivatives are those of the base model."""

    def __init__(self, base: MomentModel, shift):
        self.base = base
        self.shift = np.asarray(shift, dtype=float).reshape(-1)
        self.order = base.order
        self.fd_hessian = base.fd_hessian
        self.linear = base.linear

    @property
    def dims(self):
        return self.base.dims

    def moments(self, X, theta):
        return self.base.moments(X, theta) - self.shift

    def jacobian(self, X, theta):
        return self.base.jacobian(X, theta)

    def hessian(self, X, theta):
        return self.base.hessian(X, theta)


# ---------------------------------------------------------------------------
# file formats


def load_csv(path) -> Dataset:
    """Read a CSV file with a header row into a :class:`Dataset`."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and not r[0].startswith("#")]
    if len(rows) < 2:
        raise InputError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if values.shape[1] != len(header):
        raise InputError(f"{path}: ragged rows")
    return Dataset(values, tuple(header))


def write_csv(data: Dataset, path, with_id: bool = False) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(data.columns)
        w.writerow((["id"] if with_id else []) + cols)
        for i, row in enumerate(data.observations):
            w.writerow(([i + 1] if with_id else []) + [repr(float(v)) for v in row])


def _resolve(data: Dataset, name) -> int:
    if isinstance(name, int):
        return name
    if name == "const" and "const" not in data.columns:
        return -1
    return data.column_index(name)


def model_from_descriptor(desc, data: Dataset) -> MomentModel:
    """Build a built-in model from a JSON descriptor (dict or path).

    ``{"model": "panel", "T": 4}`` uses columns ``y_1..y_T``;
    ``{"model": "linear_iv", "y": "y", "x": ["const", "x1"], "z": [...]}``;
    ``{"model": "matching", "y": ..., "x": [...], "moments": [["y", "y"], ...],
    "targets": [...]}``.
    """
    if not isinstance(desc, dict):
        try:
            desc = json.loads(Path(desc).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read model descriptor: {exc}") from exc
    kind = desc.get("model")
    try:
        if kind == "panel":
            T = int(desc["T"])
            names = desc.get("columns") or [f"y_{t}" for t in range(1, T + 1)]
            return PanelMomentModel(T, [_resolve(data, c) for c in names])
        if kind == "linear_iv":
            x = [_resolve(data, c) for c in desc["x"]]
            z = [_resolve(data, c) for c in desc.get("z", desc["x"])]
            return LinearIVModel(_resolve(data, desc["y"]), x, z)
        if kind == "matching":
            return MatchingMomentModel(
                _resolve(data, desc["y"]),
                [_resolve(data, c) for c in desc["x"]],
                [[_resolve(data, c) for c in m] for m in desc["moments"]],
                desc["targets"],
            )
    except KeyError as exc:
        raise InputError(f"model descriptor missing field {exc}") from None
    raise InputError(f"unknown model kind {kind!r}")
