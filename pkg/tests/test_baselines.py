import math

import numpy as np
import pytest

from ssaid.baselines import (MultiLoopConfig, MultiLoopState, multiloop_step,
                             resolve_multiloop_config, run_multiloop,
                             theory_config, theory_loop_count)
from ssaid.errors import DivergenceError, InvalidParameterError
from ssaid.hypergradient import StepSizes, exact_hypergradient
from ssaid.problems import (NoiseModel, make_logistic_problem,
                            make_quadratic_problem, reference_solution)
from ssaid.ssaid import RunConfig, run_ssaid
from ssaid.streams import StreamFactory


def noisy_quadratic(seed=5):
    # all three noise channels on, so every stream tag gets exercised
    return make_quadratic_problem(dim_x=4, dim_y=3, kappa=10.0, seed=seed,
                                  noise=NoiseModel(sigma=0.7, radius=0.3,
                                                   hess_scale=0.2))


# ---------------------------------------------------------------------------
# degenerate equivalence with the single-loop method


def test_single_inner_step_warm_matches_ssaid_bitwise():
    prob = noisy_quadratic()
    run = RunConfig(seed=123, horizon=50, steps="auto", stride=7)
    ml = run_multiloop(prob, MultiLoopConfig(inner_iters=1, solver_iters=1),
                       run)
    sl = run_ssaid(prob, run)
    assert ml.csv_text() == sl.csv_text()
    assert np.array_equal(ml.final_state.x, sl.final_state.x)
    assert np.array_equal(ml.final_state.y_hat, sl.final_state.y_hat)
    assert np.array_equal(ml.final_state.v_hat, sl.final_state.v_hat)


def test_single_inner_step_matches_ssaid_on_logistic():
    prob = make_logistic_problem(dim_x=3, dim_y=4, n_rows=12, seed=2,
                                 batch_size=3)
    run = RunConfig(seed=9, horizon=30, steps="auto", stride=4)
    ml = run_multiloop(prob, MultiLoopConfig(inner_iters=1, solver_iters=1),
                       run)
    sl = run_ssaid(prob, run)
    assert ml.csv_text() == sl.csv_text()


def test_single_inner_step_noise_free_matches_ssaid():
    prob = make_quadratic_problem(dim_x=3, dim_y=3, kappa=5.0, seed=1)
    run = RunConfig(seed=0, horizon=40, steps="auto", stride=1)
    ml = run_multiloop(prob, MultiLoopConfig(inner_iters=1, solver_iters=1),
                       run)
    sl = run_ssaid(prob, run)
    assert ml.csv_text() == sl.csv_text()


# ---------------------------------------------------------------------------
# oracle accounting


def test_oracle_counters_scale_with_loop_counts():
    prob = noisy_quadratic()
    run = RunConfig(seed=3, horizon=10, steps="auto", stride=1)
    tr = run_multiloop(prob, MultiLoopConfig(inner_iters=5, solver_iters=5),
                       run)
    assert tr.n_rows == 10
    assert np.array_equal(tr.gc_count, 7 * (np.arange(10) + 1))
    assert np.array_equal(tr.mv_count, 6 * (np.arange(10) + 1))


def test_asymmetric_loop_counts():
    prob = noisy_quadratic()
    run = RunConfig(seed=3, horizon=4, steps="auto", stride=1)
    tr = run_multiloop(prob, MultiLoopConfig(inner_iters=3, solver_iters=8),
                       run)
    assert int(tr.gc_count[-1]) == (3 + 2) * 4
    assert int(tr.mv_count[-1]) == (8 + 1) * 4


def test_zero_horizon_trace():
    prob = noisy_quadratic()
    tr = run_multiloop(prob, MultiLoopConfig(inner_iters=2, solver_iters=2),
                       RunConfig(seed=0, horizon=0))
    assert tr.n_rows == 1
    assert int(tr.gc_count[0]) == 0 and int(tr.mv_count[0]) == 0


# ---------------------------------------------------------------------------
# deep inner loops approximate exact hypergradient descent


def test_deep_loops_track_exact_gradient_descent():
    prob = make_quadratic_problem(dim_x=3, dim_y=3, kappa=2.0, seed=7)
    beta = 0.02
    run = RunConfig(seed=0, horizon=5, stride=1,
                    steps=StepSizes(alpha=0.5, eta=0.5, beta=beta,
                                    horizon_k=5))
    tr = run_multiloop(prob, MultiLoopConfig(inner_iters=100,
                                             solver_iters=100), run)
    # inner contraction (1 - mu/L)^100 = 2^-100 makes tracking essentially exact
    assert np.all(tr.y_err < 1e-10)
    assert np.all(tr.v_err < 1e-10)
    x = np.zeros(3)
    for _ in range(5):
        x = x - beta * exact_hypergradient(prob, x)
    assert np.linalg.norm(tr.final_state.x - x) < 1e-6


def test_inner_accuracy_improves_with_more_steps():
    prob = make_quadratic_problem(dim_x=3, dim_y=3, kappa=10.0, seed=4)
    run = RunConfig(seed=0, horizon=1,
                    steps=StepSizes(alpha=0.1, eta=0.1, beta=0.0,
                                    horizon_k=1))
    errs = []
    for n in (1, 5, 25):
        cfg = MultiLoopConfig(inner_iters=n, solver_iters=n)
        tr = run_multiloop(prob, cfg, run)
        errs.append((float(tr.y_err[-1]), float(tr.v_err[-1])))
    y_errs = [e[0] for e in errs]
    v_errs = [e[1] for e in errs]
    assert y_errs[0] > y_errs[1] > y_errs[2]
    assert v_errs[0] > v_errs[1] > v_errs[2]


# ---------------------------------------------------------------------------
# warm vs cold restarts


def test_cold_start_restarts_inner_loop_each_iteration():
    prob = noisy_quadratic()
    run = RunConfig(seed=11, horizon=6, steps="auto", stride=1)
    warm = run_multiloop(prob, MultiLoopConfig(inner_iters=2, solver_iters=2,
                                               warm_start=True), run)
    cold = run_multiloop(prob, MultiLoopConfig(inner_iters=2, solver_iters=2,
                                               warm_start=False), run)
    assert warm.csv_text() != cold.csv_text()


def test_cold_start_accuracy_is_iteration_independent():
    # with a frozen upper iterate, a cold restart repeats the same inner
    # trajectory (fresh noise aside), so the tracking error cannot trend
    prob = make_quadratic_problem(dim_x=3, dim_y=3, kappa=5.0, seed=8)
    run = RunConfig(seed=0, horizon=4, stride=1,
                    steps=StepSizes(alpha=0.2, eta=0.2, beta=0.0,
                                    horizon_k=4))
    tr = run_multiloop(prob, MultiLoopConfig(inner_iters=3, solver_iters=3,
                                             warm_start=False), run)
    assert np.allclose(tr.y_err, tr.y_err[0], rtol=0, atol=1e-14)
    warm = run_multiloop(prob, MultiLoopConfig(inner_iters=3, solver_iters=3,
                                               warm_start=True), run)
    assert warm.y_err[-1] < tr.y_err[-1]


# ---------------------------------------------------------------------------
# configuration resolution and validation


def test_resolution_fills_from_run_schedule():
    prob = noisy_quadratic()
    run = RunConfig(seed=0, horizon=100, steps="auto")
    from ssaid.ssaid import initial_vectors, resolve_step_sizes
    v0 = initial_vectors(prob, run)[2]
    base = resolve_step_sizes(prob, run, v0)
    cfg = resolve_multiloop_config(
        prob, MultiLoopConfig(inner_iters=2, solver_iters=2), run)
    assert cfg.alpha == base.alpha
    assert cfg.eta == base.eta
    assert cfg.beta == base.beta


def test_eta_follows_alpha_override():
    prob = noisy_quadratic()
    run = RunConfig(seed=0, horizon=10, steps="auto")
    cfg = resolve_multiloop_config(
        prob, MultiLoopConfig(inner_iters=1, solver_iters=1, alpha=0.01), run)
    assert cfg.eta == 0.01
    cfg = resolve_multiloop_config(
        prob, MultiLoopConfig(inner_iters=1, solver_iters=1, alpha=0.01,
                              eta=0.02), run)
    assert cfg.eta == 0.02


def test_lower_rate_cap_enforced():
    prob = noisy_quadratic()  # L > 10, so 1/L is well under 0.5
    run = RunConfig(seed=0, horizon=10, steps="auto")
    with pytest.raises(InvalidParameterError):
        resolve_multiloop_config(
            prob, MultiLoopConfig(inner_iters=1, solver_iters=1, alpha=0.5),
            run)
    with pytest.raises(InvalidParameterError):
        resolve_multiloop_config(
            prob, MultiLoopConfig(inner_iters=1, solver_iters=1, eta=0.5),
            run)


@pytest.mark.parametrize("kwargs", [
    dict(inner_iters=0, solver_iters=1),
    dict(inner_iters=1, solver_iters=0),
    dict(inner_iters=1.5, solver_iters=1),
    dict(inner_iters=True, solver_iters=1),
    dict(inner_iters=1, solver_iters=1, alpha=-0.1),
    dict(inner_iters=1, solver_iters=1, eta=0.0),
    dict(inner_iters=1, solver_iters=1, beta=-1.0),
    dict(inner_iters=1, solver_iters=1, beta=math.inf),
])
def test_config_validation_rejects(kwargs):
    with pytest.raises(InvalidParameterError):
        MultiLoopConfig(**kwargs)


def test_step_requires_resolved_config():
    prob = noisy_quadratic()
    state = MultiLoopState(x=np.zeros(4), y_hat=np.zeros(3),
                           v_hat=np.zeros(3), k=0, y_init=np.zeros(3),
                           v_init=np.zeros(3))
    with pytest.raises(InvalidParameterError):
        multiloop_step(state, prob, MultiLoopConfig(inner_iters=1,
                                                    solver_iters=1),
                       StreamFactory(0))


def test_divergence_carries_partial_trace():
    from ssaid.problems import PlainQuadraticUpper, QuadraticBilevelProblem
    prob = QuadraticBilevelProblem(hess=np.eye(2), coupling=np.eye(2),
                                   offset=np.zeros(2),
                                   upper=PlainQuadraticUpper(target=np.zeros(2)))
    cfg = MultiLoopConfig(inner_iters=2, solver_iters=2, alpha=1.0, eta=1.0,
                          beta=50.0)
    run = RunConfig(seed=0, horizon=500, stride=1, x0=[1.0, -1.0])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as info:
            run_multiloop(prob, cfg, run)
    err = info.value
    assert err.iteration > 0
    assert err.trace is not None and err.trace.n_rows >= 1


# ---------------------------------------------------------------------------
# classic loop-count schedule


def test_theory_loop_count_values():
    assert theory_loop_count(10.0, 1000) == math.ceil(10 * math.log(1000))
    assert theory_loop_count(1.0, 2) == 1
    # horizon 1 is floored at 2 inside the log
    assert theory_loop_count(10.0, 1) == math.ceil(10 * math.log(2))


def test_theory_loop_count_rejects_bad_inputs():
    with pytest.raises(InvalidParameterError):
        theory_loop_count(0.5, 100)
    with pytest.raises(InvalidParameterError):
        theory_loop_count(10.0, 0)


def test_theory_config_uses_problem_kappa():
    prob = make_quadratic_problem(dim_x=3, dim_y=3, kappa=5.0, seed=0)
    cfg = theory_config(prob, horizon=100)
    expected = math.ceil(prob.constants.kappa * math.log(100))
    assert cfg.inner_iters == expected
    assert cfg.solver_iters == expected
    assert cfg.warm_start


# ---------------------------------------------------------------------------
# tracking quality: deeper loops shrink the hypergradient error


def test_hypergradient_error_shrinks_with_loop_depth():
    prob = make_quadratic_problem(dim_x=3, dim_y=3, kappa=10.0, seed=3)
    x0 = np.full(3, 0.7)
    ref = exact_hypergradient(prob, x0)
    run_base = dict(seed=0, horizon=1, stride=1)
    errs = []
    for n in (1, 10, 200):
        cfg = MultiLoopConfig(inner_iters=n, solver_iters=n)
        run = RunConfig(steps=StepSizes(alpha=0.1, eta=0.1, beta=1.0,
                                        horizon_k=1),
                        x0=x0, **run_base)
        tr = run_multiloop(prob, cfg, run)
        # beta = 1 makes the recorded x step equal the hypergradient estimate
        est = x0 - tr.final_state.x
        errs.append(float(np.linalg.norm(est - ref)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6
