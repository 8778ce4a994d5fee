"""Multi-loop baseline: rebuild the lower solution and the adjoint vector
with inner loops before every upper-level step.

Each outer iteration runs ``inner_iters`` stochastic gradient steps on the
lower problem, then ``solver_iters`` damped Richardson steps on the adjoint
system with a single fixed right-hand side, and finally one upper step.  With
``inner_iters == solver_iters == 1`` and warm starts the update sequence and
stream addressing collapse to the single-loop method exactly, so the two
produce bit-identical traces; that degeneracy doubles as an integration test.

Oracle accounting per outer iteration: ``inner_iters`` lower gradients plus
the shared upper-gradient sample plus one more gradient for the adjoint
right-hand side (inner_iters + 2 total), and ``solver_iters`` Hessian
products plus one cross (mixed second derivative) product.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .ssaid import (IterationTrace, RunConfig, _reference_row,
                    adjoint_richardson_step, hypergradient_estimate,
                    initial_vectors, lower_sgd_step, resolve_step_sizes)
from .streams import (TAG_CROSS_OP, TAG_HESS_OP, TAG_LOWER_GRAD,
                      TAG_UPPER_GRAD, StreamFactory)

__all__ = [
    "MultiLoopConfig",
    "MultiLoopState",
    "multiloop_step",
    "resolve_multiloop_config",
    "run_multiloop",
    "theory_loop_count",
    "theory_config",
]


@dataclass(frozen=True)
class MultiLoopConfig:
    """Loop counts and (optionally pinned) step sizes for the baseline.

    Any of ``alpha``/``eta``/``beta`` left as None is filled in from the run's
    step-size schedule by :func:`resolve_multiloop_config`.  An explicit
    ``alpha`` without an explicit ``eta`` drags the adjoint damping along with
    it, since the two play the same role on their respective subproblems.
    """

    inner_iters: int
    solver_iters: int
    alpha: float | None = None
    eta: float | None = None
    beta: float | None = None
    warm_start: bool = True

    def __post_init__(self):
        for name in ("inner_iters", "solver_iters"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
                raise InvalidParameterError(f"{name} must be an integer")
            if val < 1:
                raise InvalidParameterError(f"{name} must be at least 1")
        for name in ("alpha", "eta"):
            val = getattr(self, name)
            if val is not None and (not math.isfinite(val) or val <= 0):
                raise InvalidParameterError(f"{name} must be positive and finite")
        if self.beta is not None and (not math.isfinite(self.beta)
                                      or self.beta < 0):
            raise InvalidParameterError("beta must be nonnegative and finite")

    def to_dict(self) -> dict:
        return {
            "inner_iters": int(self.inner_iters),
            "solver_iters": int(self.solver_iters),
            "alpha": self.alpha,
            "eta": self.eta,
            "beta": self.beta,
            "warm_start": bool(self.warm_start),
        }


@dataclass
class MultiLoopState:
    """Outer-iteration state.  ``y_init``/``v_init`` are the fixed restart
    points used when warm starts are disabled."""

    x: np.ndarray
    y_hat: np.ndarray
    v_hat: np.ndarray
    k: int
    y_init: np.ndarray
    v_init: np.ndarray


def resolve_multiloop_config(problem, config: MultiLoopConfig,
                             run: RunConfig,
                             v0: np.ndarray | None = None) -> MultiLoopConfig:
    """Fill in missing step sizes from the run's schedule and validate them.

    Only the lower/adjoint rates are bounded (by 1/L); the upper rate is the
    caller's business, matching the single-loop runner's stance that a bad
    beta should fail loudly at run time rather than be silently clipped.
    """
    if (config.alpha is not None and config.eta is not None
            and config.beta is not None):
        alpha, eta, beta = config.alpha, config.eta, config.beta
    else:
        if v0 is None:
            v0 = initial_vectors(problem, run)[2]
        base = resolve_step_sizes(problem, run, v0)
        alpha = base.alpha if config.alpha is None else config.alpha
        if config.eta is not None:
            eta = config.eta
        elif config.alpha is not None:
            eta = config.alpha
        else:
            eta = base.eta
        beta = base.beta if config.beta is None else config.beta
    cap = 1.0 / problem.constants.lipschitz_L
    tol = cap * (1 + 1e-12)
    if alpha > tol:
        raise InvalidParameterError(
            f"alpha={alpha} exceeds 1/L={cap} for this problem")
    if eta > tol:
        raise InvalidParameterError(
            f"eta={eta} exceeds 1/L={cap} for this problem")
    return dataclasses.replace(config, alpha=float(alpha), eta=float(eta),
                               beta=float(beta))


def multiloop_step(state: MultiLoopState, problem, config: MultiLoopConfig,
                   factory: StreamFactory) -> MultiLoopState:
    """One outer iteration.  ``config`` must already be resolved.

    Inner lower steps draw at (k, lower-grad, slot j); Richardson steps draw
    fresh Hessian operators at (k, hess-op, slot j) but keep one right-hand
    side from the single shared upper sample at slot 0.  The slot-0 draws
    coincide with the single-loop method's addresses by construction.
    """
    if config.alpha is None or config.eta is None or config.beta is None:
        raise InvalidParameterError(
            "config has unresolved step sizes; call resolve_multiloop_config")
    k = state.k
    x = state.x
    tags = problem.stochastic_tags

    y = state.y_hat if config.warm_start else state.y_init
    v = state.v_hat if config.warm_start else state.v_init

    for j in range(config.inner_iters):
        gen = factory.at(k, TAG_LOWER_GRAD, j) if TAG_LOWER_GRAD in tags else None
        y = lower_sgd_step(problem, x, y, config.alpha, gen)

    gen = factory.at(k, TAG_UPPER_GRAD, 0) if TAG_UPPER_GRAD in tags else None
    gx, gy = problem.sample_upper_grads(x, y, gen)

    for j in range(config.solver_iters):
        gen = factory.at(k, TAG_HESS_OP, j) if TAG_HESS_OP in tags else None
        hvp = problem.sample_hess_operator(x, gen)
        v = adjoint_richardson_step(problem, y, v, config.eta, hvp, gy)

    gen = factory.at(k, TAG_CROSS_OP, 0) if TAG_CROSS_OP in tags else None
    jvp = problem.sample_cross_operator(x, gen)
    x_new = x - config.beta * hypergradient_estimate(gx, jvp, y, v)

    total = float(x_new.sum()) + float(y.sum()) + float(v.sum())
    if not math.isfinite(total):
        raise DivergenceError(
            f"nonfinite iterate at outer iteration {k}", iteration=k,
            state=state)
    return MultiLoopState(x=x_new, y_hat=y, v_hat=v, k=k + 1,
                          y_init=state.y_init, v_init=state.v_init)


def run_multiloop(problem, config: MultiLoopConfig,
                  run: RunConfig) -> IterationTrace:
    """Run the baseline for ``run.horizon`` outer iterations.

    Trace rows have the same schema as the single-loop runner; the oracle
    counters advance by inner_iters + 2 gradients and solver_iters + 1
    matrix-vector products per outer iteration.
    """
    x0, y0, v0 = initial_vectors(problem, run)
    config = resolve_multiloop_config(problem, config, run, v0)
    state = MultiLoopState(x=x0, y_hat=y0, v_hat=v0, k=0,
                           y_init=y0, v_init=v0)
    factory = StreamFactory(run.seed)
    gc_inc = config.inner_iters + 2
    mv_inc = config.solver_iters + 1
    horizon, stride = run.horizon, run.stride
    rows = []
    if horizon == 0:
        rows.append(_reference_row(problem, 0, x0, y0, v0, 0.0, 0, 0))
        return IterationTrace.from_rows(rows, final_state=state)

    for k in range(horizon):
        record = (k % stride == 0) or (k == horizon - 1)
        x_before = state.x
        try:
            state = multiloop_step(state, problem, config, factory)
        except DivergenceError as err:
            err.trace = IterationTrace.from_rows(rows, final_state=err.state)
            raise
        if record:
            x_step = float(np.linalg.norm(state.x - x_before))
            rows.append(_reference_row(problem, k, x_before, state.y_hat,
                                       state.v_hat, x_step,
                                       gc_inc * (k + 1), mv_inc * (k + 1)))
    return IterationTrace.from_rows(rows, final_state=state)


def theory_loop_count(kappa: float, horizon: int) -> int:
    """Classic loop-count schedule: both inner loops grow like
    kappa * ln(horizon), floored at one step."""
    if not math.isfinite(kappa) or kappa < 1:
        raise InvalidParameterError("kappa must be finite and at least 1")
    if horizon < 1:
        raise InvalidParameterError("horizon must be at least 1")
    return max(1, math.ceil(kappa * math.log(max(horizon, 2))))


def theory_config(problem, horizon: int, warm_start: bool = True) -> MultiLoopConfig:
    n = theory_loop_count(problem.constants.kappa, horizon)
    return MultiLoopConfig(inner_iters=n, solver_iters=n,
                           warm_start=warm_start)
