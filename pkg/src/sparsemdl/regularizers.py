"""Differentiable l0 surrogates: PMMP minimax objective, DRR and l1.

Penalties accept either a single array/Value or a list of them (one per
parameter tensor) and sum over every entry, biases included.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

METHODS = ("PMMP", "DRR", "RL1", "NONE")

# DRR carries no l2 term: the rho * ||theta||^2 weight is fixed at zero.
DRR_L2_WEIGHT = 0.0


class DomainError(ValueError):
    """Gate or multiplier outside its feasible set."""


@dataclass
class RegularizerSpec:
    method: str = "NONE"
    alpha: float = 0.0
    beta: float = 5.0
    pmmp_p_init: float | None = None
    pmmp_u_multi: float | None = None

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown regularizer method {self.method!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.method == "DRR" and not self.beta > 0:
            raise ValueError("DRR requires beta > 0")
        if self.method == "PMMP":
            if self.pmmp_p_init is None or self.pmmp_u_multi is None:
                raise ValueError("PMMP requires pmmp_p_init and pmmp_u_multi")
            if not 0.0 <= self.pmmp_p_init <= 1.0:
                raise ValueError("pmmp_p_init must lie in [0, 1]")
            if not self.pmmp_u_multi > 0:
                raise ValueError("pmmp_u_multi must be positive")

    def to_dict(self):
        return asdict(self)


def _parts(x):
    return x if isinstance(x, (list, tuple)) else [x]


def _data(x):
    return x.data if isinstance(x, ad.Value) else np.asarray(x)


def _sum_over(parts, fn):
    terms = [ad.total(fn(p)) for p in parts]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def expected_l0(gamma):
    """Expected number of open gates, sum of all gate probabilities."""
    parts = _parts(gamma)
    for g in parts:
        d = _data(g)
        if np.any(d < 0) or np.any(d > 1):
            raise DomainError("gate probabilities must lie in [0, 1]")
    return _sum_over(parts, lambda g: g)


def drr_penalty(theta, alpha, beta=5.0):
    """alpha * sum(1 - exp(-beta |theta|))."""
    return _sum_over(_parts(theta), lambda t: 1.0 - ad.exp(ad.absolute(t) * -beta)) * alpha


def l1_penalty(theta, alpha):
    return _sum_over(_parts(theta), ad.absolute) * alpha


def pmmp_objective(theta, w, gamma, u, alpha, base_loss):
    """alpha*sum(gamma) + base_loss + u.(theta - w gamma)^2 + u.(w^2 gamma (1 - gamma))."""
    thetas, ws, gammas, us = _parts(theta), _parts(w), _parts(gamma), _parts(u)
    for g, m in zip(gammas, us):
        gd, md = _data(g), _data(m)
        if np.any(gd < 0) or np.any(gd > 1):
            raise DomainError("gate probabilities must lie in [0, 1]")
        if np.any(md < 0):
            raise DomainError("multipliers must be nonnegative")
    out = expected_l0(gammas) * alpha + base_loss
    for t, wi, g, m in zip(thetas, ws, gammas, us):
        wg = wi * g
        out = out + ad.total(m * ad.square(t - wg))
        out = out + ad.total(m * (ad.square(wi) * (g * (1.0 - g))))
    return out


def pmmp_project(model):
    """Copy of ``model`` with gates clamped into [0, 1] and multipliers to >= 0."""
    out = model.copy()
    out.gamma = [np.clip(g, 0.0, 1.0) for g in model.gamma]
    out.u = [np.maximum(m, 0.0) for m in model.u]
    return out


def penalty(reg, theta):
    """Penalty term for DRR / RL1 / NONE on ``theta`` (PMMP is handled by its objective)."""
    if reg.method == "DRR":
        return drr_penalty(theta, reg.alpha, reg.beta)
    if reg.method == "RL1":
        return l1_penalty(theta, reg.alpha)
    if reg.method == "NONE":
        return 0.0
    raise ValueError("PMMP has no separable penalty; use pmmp_objective")


def quadratic_expectation(X, y, w, gamma):
    """E over z ~ Bernoulli(gamma) of ||y - X (w z)||^2, in closed form.

    sum_i (y_i - sum_j X_ij w_j gamma_j)^2 + sum_ij X_ij^2 w_j^2 gamma_j (1 - gamma_j)
    """
    X = np.asarray(X, dtype=np.float64)
    resid = y - X @ (w * gamma)
    var = (X * X) @ (ad.square(w) * (gamma * (1.0 - gamma)))
    return ad.total(ad.square(resid)) + ad.total(var)
