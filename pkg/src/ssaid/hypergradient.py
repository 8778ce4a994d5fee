"""Hypergradients and the constants that govern their accuracy.

The implicit objective phi(x) = f(x, y*(x)) has gradient

    grad phi(x) = grad_x f(x, y*) - (d^2 g / dx dy)(x, y*) v*,
    v* = (d^2 g / dy dy)^{-1}(x, y*) grad_y f(x, y*).

This module computes that gradient exactly from a problem's reference
solvers, forms its single-sample stochastic analogue at arbitrary
(x, y_hat, v_hat), and derives the scalar constants (c0..c3, l_phi) that
bound tracking error, estimator bias, and smoothness of phi.  The step-size
schedule picks the largest upper step allowed by every one of the derived
stability conditions plus the 1/sqrt(horizon) decay that yields the target
stationarity rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .problems import ProblemConstants, reference_solution
from .streams import TAG_CROSS_OP, TAG_UPPER_GRAD

__all__ = [
    "DerivedConstants",
    "StepSizes",
    "compute_l_phi",
    "compute_derived_constants",
    "default_step_sizes",
    "validate_step_sizes",
    "exact_hypergradient",
    "stochastic_hypergradient",
]


def _mul(a: float, b: float) -> float:
    """Product that treats 0 * inf as 0 (a vanishing coefficient kills the term)."""
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


@dataclass(frozen=True)
class DerivedConstants:
    """Scalars derived from (mu, L, rho, M, tau) and the adjoint init norm.

    c0 bounds the adjoint sensitivity to lower-level error, c1 the coupled
    contraction rate, c2 the bias transfer from tracking error, c3 the raw
    estimator magnitude, and l_phi the smoothness of the implicit objective.
    Any of them may be inf when the upper gradient is unbounded.
    """

    c0: float
    c1: float
    c2: float
    c3: float
    l_phi: float
    v0_norm: float = 0.0

    def __post_init__(self):
        vals = (self.c0, self.c1, self.c2, self.c3, self.l_phi, self.v0_norm)
        if any(math.isnan(v) for v in vals):
            raise InvalidParameterError("derived constants must not be NaN")
        if any(v < 0 for v in vals):
            raise InvalidParameterError("derived constants must be nonnegative")

    def is_finite(self) -> bool:
        return all(math.isfinite(v)
                   for v in (self.c0, self.c1, self.c2, self.c3, self.l_phi))

    def c_beta(self, constants: ProblemConstants, alpha: float, beta: float) -> float:
        """Per-step drift scale: 2 beta c1 c3 + alpha (c2 sigma + c0 L M)."""
        return (2.0 * _mul(beta, _mul(self.c1, self.c3))
                + _mul(alpha, _mul(self.c2, constants.sigma)
                       + _mul(self.c0, _mul(constants.lipschitz_L,
                                            constants.lipschitz_M))))

    def to_dict(self) -> dict:
        return {"c0": self.c0, "c1": self.c1, "c2": self.c2, "c3": self.c3,
                "l_phi": self.l_phi, "v0_norm": self.v0_norm}


def compute_l_phi(constants: ProblemConstants) -> float:
    """Smoothness constant of the implicit objective."""
    mu = constants.mu
    if mu <= 0:
        raise InvalidParameterError("mu must be positive")
    lip, rho, m, tau = (constants.lipschitz_L, constants.rho,
                        constants.lipschitz_M, constants.tau)
    return (lip
            + (2.0 * lip ** 2 + _mul(tau, m * m)) / mu
            + (_mul(rho, lip * m) + lip ** 3 + _mul(tau, m * lip)) / mu ** 2
            + _mul(rho, _mul(lip ** 2, m)) / mu ** 3)


def compute_derived_constants(constants: ProblemConstants,
                              v0_norm: float = 0.0) -> DerivedConstants:
    if constants.mu <= 0:
        raise InvalidParameterError("mu must be positive")
    if v0_norm < 0:
        raise InvalidParameterError("v0_norm must be >= 0")
    mu, lip = constants.mu, constants.lipschitz_L
    rho, m = constants.rho, constants.lipschitz_M
    c0 = _mul(rho, m) / mu ** 2 + lip / mu
    c1 = lip * (lip * mu + _mul(rho, m)) / mu ** 2 + ((lip + mu) / mu) * c0 * lip
    c2 = lip + _mul(rho, m) / mu + lip * c0
    c3 = m + lip * v0_norm + _mul(m, lip) / mu
    return DerivedConstants(c0=c0, c1=c1, c2=c2, c3=c3,
                            l_phi=compute_l_phi(constants), v0_norm=v0_norm)


@dataclass(frozen=True)
class StepSizes:
    alpha: float
    eta: float
    beta: float
    horizon_k: int

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.eta, self.beta)):
            raise InvalidParameterError("step sizes must be finite")
        if self.alpha <= 0 or self.eta <= 0:
            raise InvalidParameterError("alpha and eta must be positive")
        if self.alpha > self.eta:
            raise InvalidParameterError("alpha must not exceed eta")
        if self.beta < 0:
            raise InvalidParameterError("beta must be >= 0")
        if self.horizon_k < 1:
            raise InvalidParameterError("horizon_k must be >= 1")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "eta": self.eta, "beta": self.beta,
                "horizon_k": self.horizon_k}


def beta_stability_cap(derived: DerivedConstants, constants: ProblemConstants,
                       alpha: float, eta: float) -> float:
    """Largest upper step the contraction arguments tolerate (horizon-free)."""
    mu, lip = constants.mu, constants.lipschitz_L
    caps = [mu * alpha / (4.0 * derived.c1),
            3.0 * mu * eta / (4.0 * derived.c1),
            1.0 / (8.0 * derived.l_phi),
            mu / (2.0 ** 5 * derived.c1 * lip)]
    return min(caps)


def default_step_sizes(derived: DerivedConstants, constants: ProblemConstants,
                       horizon_k: int) -> StepSizes:
    """alpha = eta = 1/L and the largest beta every stability bound allows.

    beta additionally decays like 1/sqrt(horizon) so a run of length k lands
    on the advertised averaged-stationarity rate.
    """
    if horizon_k < 1:
        raise InvalidParameterError("horizon_k must be >= 1")
    if not derived.is_finite() or derived.c3 == 0.0:
        raise InvalidParameterError(
            "automatic step sizes need finite nonzero derived constants; "
            "got " + repr(derived))
    alpha = eta = 1.0 / constants.lipschitz_L
    rate_term = 1.0 / (math.sqrt(horizon_k) * math.sqrt(derived.l_phi) * derived.c3)
    beta = min(rate_term, beta_stability_cap(derived, constants, alpha, eta))
    return StepSizes(alpha=alpha, eta=eta, beta=beta, horizon_k=horizon_k)


def validate_step_sizes(steps: StepSizes, constants: ProblemConstants,
                        derived: DerivedConstants) -> None:
    """Raise unless the step sizes satisfy every stability inequality."""
    lip = constants.lipschitz_L
    tol = 1e-12
    if steps.alpha > 1.0 / lip + tol:
        raise InvalidParameterError(f"alpha {steps.alpha} exceeds 1/L = {1.0 / lip}")
    if steps.eta > 1.0 / lip + tol:
        raise InvalidParameterError(f"eta {steps.eta} exceeds 1/L = {1.0 / lip}")
    cap = beta_stability_cap(derived, constants, steps.alpha, steps.eta)
    if steps.beta > cap * (1.0 + 1e-12):
        raise InvalidParameterError(f"beta {steps.beta} exceeds stability cap {cap}")


def exact_hypergradient(problem, x: np.ndarray) -> np.ndarray:
    """Gradient of the implicit objective via the reference solvers."""
    return reference_solution(problem, np.asarray(x, dtype=float)).grad_phi


def stochastic_hypergradient(problem, x, y_hat, v_hat, factory,
                             iteration: int = 0, slot: int = 0, reps=None):
    """Single-sample estimate grad_x F(x, y_hat; xi) - (d^2 G / dx dy; zeta) v_hat.

    One fresh, mutually independent draw of (xi, zeta); with ``reps`` the
    draws are batched along a leading axis.
    """
    x = np.asarray(x, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    v_hat = np.asarray(v_hat, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y_hat))
            and np.all(np.isfinite(v_hat))):
        raise InvalidParameterError("inputs must be finite")
    gx, _ = problem.sample_upper_grads(x, y_hat,
                                       factory.at(iteration, TAG_UPPER_GRAD, slot),
                                       reps=reps)
    jvp = problem.sample_cross_operator(x, factory.at(iteration, TAG_CROSS_OP, slot),
                                        reps=reps)
    return gx - jvp(y_hat, v_hat)
