"""Gaussian kernel density on an even grid, for plotting bootstrap draws."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import InputError

__all__ = ["silverman_bandwidth", "kde_grid", "write_kde_csv", "read_draws_csv"]

GRID_POINTS = 512


def silverman_bandwidth(x) -> float:
    """``0.9 min(sd, IQR / 1.34) n^{-1/5}``; 1.0 when that is zero."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise InputError("bandwidth of an empty sample")
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    iqr = float(stats.iqr(x))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    h = 0.9 * spread * n ** (-0.2)
    return h if h > 0 else 1.0


def kde_grid(x, bandwidth: float | None = None, points: int = GRID_POINTS):
    """Density of ``x`` on ``points`` values spanning ``[min - 3h, max + 3h]``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] == 0:
        raise InputError("no draws to smooth")
    if not np.all(np.isfinite(x)):
        raise InputError("draws must be finite")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise InputError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, points)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (x.shape[0] * h * np.sqrt(2 * np.pi))
    return grid, dens, h


def read_draws_csv(path) -> np.ndarray:
    """First column of a CSV with a header row."""
    try:
        with Path(path).open(newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    try:
        vals = np.array([float(r[0]) for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if vals.shape[0] == 0:
        raise InputError(f"{path}: no draws")
    return vals


def write_kde_csv(path, grid, dens) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "density"])
        for a, b in zip(grid, dens):
            w.writerow([repr(float(a)), repr(float(b))])
