"""Proximity functions ``1 - exp(-(d / s1) ** s2)`` with learnable shape.

Parameters are kept unconstrained: ``s1 = exp(a)`` and ``s2 = 1 + exp(b)``,
so plain gradient steps can never leave ``s1 > 0, s2 > 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ProximityParams:
    a: float
    b: float

    @classmethod
    def from_sigmas(cls, sigma1: float, sigma2: float) -> "ProximityParams":
        if not sigma1 > 0:
            raise ValueError("sigma1 must be positive")
        if not sigma2 > 1:
            raise ValueError("sigma2 must exceed 1")
        return cls(float(np.log(sigma1)), float(np.log(sigma2 - 1.0)))

    @property
    def sigma1(self) -> float:
        return float(np.exp(self.a))

    @property
    def sigma2(self) -> float:
        return float(1.0 + np.exp(self.b))


def _check(d):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("distance must be non-negative")
    return d


def proximity_eval(params: ProximityParams, d):
    d = _check(d)
    return _eval(d, np.asarray(params.a), np.asarray(params.b))[0]


def _eval(d, a, b):
    """Value plus the pieces the derivatives reuse. Broadcasts over d, a, b."""
    pos = d > 0
    s2 = 1.0 + np.exp(b)
    logratio = np.where(pos, np.log(np.where(pos, d, 1.0)) - a, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        lu = s2 * logratio
        u = np.where(pos, np.exp(lu), 0.0)
    value = np.where(pos, -np.expm1(-u), 0.0)
    return value, pos, s2, logratio, u


def _u_exp_neg_u(u):
    # u * exp(-u) without inf * 0 once u overflows
    finite = np.isfinite(u)
    uf = np.where(finite, u, 0.0)
    return np.where(finite, uf * np.exp(-uf), 0.0)


def proximity_grad(params: ProximityParams, d, d_grad=1.0):
    """Partials of the proximity value w.r.t. ``(a, b)`` and the upstream input.

    ``d_grad`` is the derivative of ``d`` with respect to whatever is upstream;
    the third return value is the chain-ruled derivative through it. All partials
    are 0 where ``d == 0``.
    """
    d = _check(d)
    _, pos, s2, logratio, u = _eval(d, np.asarray(params.a), np.asarray(params.b))
    ue = _u_exp_neg_u(u)
    da = np.where(pos, -s2 * ue, 0.0)
    db = np.where(pos, (s2 - 1.0) * logratio * ue, 0.0)
    dd = np.where(pos, s2 * ue / np.where(pos, d, 1.0), 0.0)
    return da, db, dd * d_grad


def proximity(d: np.ndarray, a, b):
    """Batched proximities for the autodiff tape.

    ``d`` has shape (n, c) and is a constant; ``a`` and ``b`` have shape (c,)
    and may be nodes.
    """
    av, bv = ad.value_of(a), ad.value_of(b)
    value, pos, s2, logratio, u = _eval(d, av, bv)
    ue = _u_exp_neg_u(u)
    da = np.where(pos, -s2 * ue, 0.0)
    db = np.where(pos, (s2 - 1.0) * logratio * ue, 0.0)
    return ad.custom(value, (a, b), (lambda g: (g * da).sum(axis=0), lambda g: (g * db).sum(axis=0)))


def default_params(diagonal: float) -> ProximityParams:
    """Initial shape: width 10% of the domain diagonal, exponent 2."""
    return ProximityParams.from_sigmas(0.1 * diagonal, 2.0)
