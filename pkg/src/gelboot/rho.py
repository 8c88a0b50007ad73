"""Estimator kinds and the concave ``rho`` functions of the GEL criterion."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import InputError


class Kind(str, Enum):
    EL = "EL"
    ET = "ET"
    ETEL = "ETEL"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InputError(f"unknown estimator kind {value!r}; expected EL, ET or ETEL") from None


def _el_rho(v):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v < 1, np.log1p(-np.minimum(v, 1)), -np.inf)


def _el_d1(v):
    return -1.0 / (1.0 - v)


def _el_d2(v):
    return -1.0 / (1.0 - v) ** 2


def _et_rho(v):
    with np.errstate(over="ignore"):
        return 1.0 - np.exp(v)


def _et_d(v):
    with np.errstate(over="ignore"):
        return -np.exp(v)


@dataclass(frozen=True)
class RhoFamily:
    """``rho`` and its first two derivatives.

    EL: ``rho(v) = log(1 - v)`` for ``v < 1``; ET: ``rho(v) = 1 - exp(v)``.
    Both satisfy ``rho(0) = 0`` and ``rho_1(0) = rho_2(0) = -1``.
    """

    name: str
    value: Callable
    d1: Callable
    d2: Callable
    bounded_domain: bool

    def __call__(self, v):
        return self.value(v)


EL_RHO = RhoFamily("EL", _el_rho, _el_d1, _el_d2, True)
ET_RHO = RhoFamily("ET", _et_rho, _et_d, _et_d, False)


def rho_for(kind) -> RhoFamily:
    """The inner-loop ``rho`` of ``kind``; ETEL tilts with the ET family."""
    return EL_RHO if Kind.parse(kind) is Kind.EL else ET_RHO
