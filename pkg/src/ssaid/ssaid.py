"""Single-loop stochastic bilevel descent with warm-started inner iterates.

Each iteration advances three coupled sequences with one sampled oracle call
apiece: a lower-level SGD step on y_hat, one Richardson sweep on the adjoint
v_hat against a freshly sampled Hessian, and an upper step along the
stochastic hypergradient assembled from the same upper-gradient draw.  The
per-iteration oracle bill is therefore constant: 3 gradient samples and 2
matrix-vector samples.

Traces record post-iteration snapshots: row k holds the exact gradient of
the implicit objective at the iterate the step started from, the tracking
errors of the freshly produced y_hat/v_hat against ground truth at that
same iterate, the upper-step length, and cumulative oracle counters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .hypergradient import StepSizes, compute_derived_constants, default_step_sizes
from .problems import reference_solution
from .streams import (
    TAG_CROSS_OP,
    TAG_HESS_OP,
    TAG_LOWER_GRAD,
    TAG_UPPER_GRAD,
    StreamFactory,
)

__all__ = [
    "SSAIDState",
    "RunConfig",
    "IterationTrace",
    "TRACE_COLUMNS",
    "ssaid_step",
    "run_ssaid",
    "oracle_complexity",
    "lower_sgd_step",
    "adjoint_richardson_step",
    "hypergradient_estimate",
    "resolve_step_sizes",
    "initial_vectors",
]

TRACE_COLUMNS = ("k", "grad_phi_sq", "y_err", "v_err", "v_norm",
                 "x_step_norm", "phi", "gc_count", "mv_count")

GC_PER_STEP = 3
MV_PER_STEP = 2


@dataclass
class SSAIDState:
    x: np.ndarray
    y_hat: np.ndarray
    v_hat: np.ndarray
    k: int
    steps: StepSizes


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides the problem itself.

    ``steps`` is either an explicit StepSizes or the string "auto", which
    derives the schedule from the problem constants and the horizon.
    ``stride`` thins the trace: rows (and the reference solves backing them)
    are produced at every stride-th iteration plus the final one.
    """

    seed: int
    horizon: int
    steps: object = "auto"
    stride: int = 1
    x0: object = None
    y0: object = None
    v0: object = None

    def __post_init__(self):
        if self.horizon < 0:
            raise InvalidParameterError("horizon must be >= 0")
        if self.stride < 1:
            raise InvalidParameterError("stride must be >= 1")
        if not isinstance(self.steps, StepSizes) and self.steps != "auto":
            raise InvalidParameterError("steps must be a StepSizes or 'auto'")

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "horizon": int(self.horizon),
            "steps": ("auto" if self.steps == "auto" else self.steps.to_dict()),
            "stride": int(self.stride),
            "x0": None if self.x0 is None else np.asarray(self.x0).tolist(),
            "y0": None if self.y0 is None else np.asarray(self.y0).tolist(),
            "v0": None if self.v0 is None else np.asarray(self.v0).tolist(),
        }


# ---------------------------------------------------------------------------
# step primitives, shared verbatim with the multi-loop baseline so that the
# degenerate baseline reproduces this loop bit for bit


def lower_sgd_step(problem, x, y, alpha, gen):
    return y - alpha * problem.sample_lower_grad(x, y, gen)


def adjoint_richardson_step(problem, y, v, eta, hvp, rhs):
    return v - eta * hvp(y, v) + eta * rhs


def hypergradient_estimate(grad_x_f, jvp, y, v):
    return grad_x_f - jvp(y, v)


def ssaid_step(state: SSAIDState, problem, factory: StreamFactory,
               slot: int = 0) -> SSAIDState:
    """One full iteration; draws live at (seed, k, tag, slot)."""
    k = state.k
    steps = state.steps
    x = state.x
    tags = problem.stochastic_tags

    gen = factory.at(k, TAG_LOWER_GRAD, slot) if TAG_LOWER_GRAD in tags else None
    y_new = lower_sgd_step(problem, x, state.y_hat, steps.alpha, gen)

    gen = factory.at(k, TAG_UPPER_GRAD, slot) if TAG_UPPER_GRAD in tags else None
    gx, gy = problem.sample_upper_grads(x, y_new, gen)

    gen = factory.at(k, TAG_HESS_OP, slot) if TAG_HESS_OP in tags else None
    hvp = problem.sample_hess_operator(x, gen)
    v_new = adjoint_richardson_step(problem, y_new, state.v_hat, steps.eta, hvp, gy)

    gen = factory.at(k, TAG_CROSS_OP, slot) if TAG_CROSS_OP in tags else None
    jvp = problem.sample_cross_operator(x, gen)
    x_new = x - steps.beta * hypergradient_estimate(gx, jvp, y_new, v_new)

    total = float(x_new.sum()) + float(y_new.sum()) + float(v_new.sum())
    if not math.isfinite(total):
        raise DivergenceError(
            f"nonfinite iterate at iteration {k}", iteration=k, state=state)
    return SSAIDState(x=x_new, y_hat=y_new, v_hat=v_new, k=k + 1, steps=steps)


# ---------------------------------------------------------------------------
# traces


@dataclass
class IterationTrace:
    k: np.ndarray
    grad_phi_sq: np.ndarray
    y_err: np.ndarray
    v_err: np.ndarray
    v_norm: np.ndarray
    x_step_norm: np.ndarray
    phi: np.ndarray
    gc_count: np.ndarray
    mv_count: np.ndarray
    final_state: SSAIDState | None = field(default=None, compare=False)
    steps: StepSizes | None = field(default=None, compare=False)

    @classmethod
    def from_rows(cls, rows, final_state=None, steps=None) -> "IterationTrace":
        cols = list(zip(*rows)) if rows else [[] for _ in TRACE_COLUMNS]
        arr = [np.asarray(c) for c in cols]
        return cls(k=arr[0].astype(np.int64),
                   grad_phi_sq=arr[1].astype(float),
                   y_err=arr[2].astype(float),
                   v_err=arr[3].astype(float),
                   v_norm=arr[4].astype(float),
                   x_step_norm=arr[5].astype(float),
                   phi=arr[6].astype(float),
                   gc_count=arr[7].astype(np.int64),
                   mv_count=arr[8].astype(np.int64),
                   final_state=final_state, steps=steps)

    @property
    def n_rows(self) -> int:
        return int(self.k.size)

    def running_average(self) -> np.ndarray:
        """Mean of grad_phi_sq over recorded rows up to and including each row."""
        n = self.n_rows
        if n == 0:
            return np.empty(0)
        return np.cumsum(self.grad_phi_sq) / np.arange(1, n + 1)

    def csv_text(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        for i in range(self.n_rows):
            lines.append(
                f"{int(self.k[i])},{float(self.grad_phi_sq[i])!r},"
                f"{float(self.y_err[i])!r},{float(self.v_err[i])!r},"
                f"{float(self.v_norm[i])!r},{float(self.x_step_norm[i])!r},"
                f"{float(self.phi[i])!r},{int(self.gc_count[i])},"
                f"{int(self.mv_count[i])}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())

    @classmethod
    def from_csv_text(cls, text: str) -> "IterationTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != ",".join(TRACE_COLUMNS):
            raise InvalidParameterError("trace CSV header mismatch")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(TRACE_COLUMNS):
                raise InvalidParameterError(f"malformed trace row: {ln!r}")
            rows.append((int(parts[0]), *(float(p) for p in parts[1:7]),
                         int(parts[7]), int(parts[8])))
        return cls.from_rows(rows)

    @classmethod
    def from_csv(cls, path) -> "IterationTrace":
        with open(path) as fh:
            return cls.from_csv_text(fh.read())


# ---------------------------------------------------------------------------
# run loop


def initial_vectors(problem, config: RunConfig):
    def prep(val, dim, name):
        vec = np.zeros(dim) if val is None else np.array(val, dtype=float)
        if vec.shape != (dim,):
            raise InvalidParameterError(f"{name} must have shape ({dim},)")
        if not np.all(np.isfinite(vec)):
            raise InvalidParameterError(f"{name} must be finite")
        return vec

    return (prep(config.x0, problem.dim_x, "x0"),
            prep(config.y0, problem.dim_y, "y0"),
            prep(config.v0, problem.dim_y, "v0"))


def resolve_step_sizes(problem, config: RunConfig, v0: np.ndarray) -> StepSizes:
    if isinstance(config.steps, StepSizes):
        return config.steps
    derived = compute_derived_constants(problem.constants,
                                        v0_norm=float(np.linalg.norm(v0)))
    return default_step_sizes(derived, problem.constants,
                              horizon_k=max(config.horizon, 1))


def _reference_row(problem, k, x, y_hat, v_hat, x_step, gc, mv):
    ref = reference_solution(problem, x)
    return (k,
            float(ref.grad_phi @ ref.grad_phi),
            float(np.linalg.norm(y_hat - ref.y_star)),
            float(np.linalg.norm(v_hat - ref.v_star)),
            float(np.linalg.norm(v_hat)),
            float(x_step),
            problem.upper.value(x, ref.y_star),
            gc, mv)


def run_ssaid(problem, config: RunConfig) -> IterationTrace:
    """Run the single-loop method for ``config.horizon`` iterations.

    Identical (problem, config) pairs produce byte-identical traces.  A
    nonfinite iterate aborts with a DivergenceError carrying the rows
    recorded so far.
    """
    x0, y0, v0 = initial_vectors(problem, config)
    steps = resolve_step_sizes(problem, config, v0)
    state = SSAIDState(x=x0, y_hat=y0, v_hat=v0, k=0, steps=steps)
    factory = StreamFactory(config.seed)
    horizon, stride = config.horizon, config.stride
    rows = []
    if horizon == 0:
        rows.append(_reference_row(problem, 0, x0, y0, v0, 0.0, 0, 0))
        return IterationTrace.from_rows(rows, final_state=state, steps=steps)

    for k in range(horizon):
        record = (k % stride == 0) or (k == horizon - 1)
        x_before = state.x
        try:
            state = ssaid_step(state, problem, factory)
        except DivergenceError as err:
            err.trace = IterationTrace.from_rows(rows, final_state=err.state,
                                                 steps=steps)
            raise
        if record:
            x_step = float(np.linalg.norm(state.x - x_before))
            rows.append(_reference_row(problem, k, x_before, state.y_hat,
                                       state.v_hat, x_step,
                                       GC_PER_STEP * (k + 1),
                                       MV_PER_STEP * (k + 1)))
    return IterationTrace.from_rows(rows, final_state=state, steps=steps)


def oracle_complexity(trace: IterationTrace, epsilon: float):
    """Oracle count at the first recorded row whose running average of the
    exact stationarity measure drops to epsilon; None if it never does."""
    if epsilon <= 0:
        raise InvalidParameterError("epsilon must be positive")
    ra = trace.running_average()
    hits = np.nonzero(ra <= epsilon)[0]
    if hits.size == 0:
        return None
    i = int(hits[0])
    return int(max(int(trace.gc_count[i]), int(trace.mv_count[i])))
