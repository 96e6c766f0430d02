"""Policy search against exact enumeration, plus the two-stage DPP check."""

import numpy as np
import pytest
from scipy.stats import norm

from mfstop.dynamics import Problem, TimeGrid
from mfstop.measures import StopMap, apply_stop, make_empirical
from mfstop.policy import Policy, evaluate_policy
from mfstop.solver import (
    SearchConfig,
    backward_enumeration,
    monotonicity_check,
    solve_value,
    verify_dpp,
)


def quad_g(center):
    def g(points, weights):
        return float(-((points[:, 0] - center) ** 2) @ weights)

    return g


def put_g(strike):
    def g(points, weights):
        return float(np.maximum(strike - points[:, 0], 0.0) @ weights)

    return g


def hump_problem():
    """sigma = 0, drift rises then falls; per-atom stop times all differ."""
    return Problem(
        d=1,
        b=lambda t, x, m: 1.0 - 2.8 * t,
        sigma=lambda t, x, m: 0.0,
        f=None,
        g=quad_g(1.0),
        horizon=1.0,
    )


HUMP_M0 = make_empirical([(0.4, 1), (1.0, 1), (0.75, 1)], [0.3, 0.3, 0.4])


def test_enumeration_matches_hand_computed_assignments():
    # paths: 0.4 -> 0.9 -> 0.7;  1.0 -> 1.5 -> 1.3;  0.75 -> 1.25 -> 1.05
    grid = TimeGrid(n=2, horizon=1.0)
    res = backward_enumeration(HUMP_M0, hump_problem(), grid)
    # atoms in canonical (sorted) order: x = 0.4, 0.75, 1.0
    assert res.stop_nodes == (1, None, 0)
    expected = 0.3 * -0.01 + 0.3 * 0.0 + 0.4 * -0.0025
    assert res.value == pytest.approx(expected, abs=1e-14)


def test_enumeration_requires_zero_volatility():
    noisy = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=quad_g(0.0), horizon=1.0,
    )
    with pytest.raises(ValueError, match="deterministic"):
        backward_enumeration(HUMP_M0, noisy, TimeGrid(2, 1.0))


def test_enumeration_budget_guard():
    m = make_empirical([(float(k) / 10, 1) for k in range(9)])
    with pytest.raises(ValueError, match="budget"):
        backward_enumeration(m, hump_problem(), TimeGrid(8, 1.0), enum_budget=100)


def test_solver_reproduces_enumeration_on_deterministic_instance():
    grid = TimeGrid(n=2, horizon=1.0)
    oracle = backward_enumeration(HUMP_M0, hump_problem(), grid)
    est, pol = solve_value(HUMP_M0, hump_problem(), grid, SearchConfig(paths_per_atom=4), seed=1)
    assert est.value == pytest.approx(oracle.value, abs=1e-12)


def test_never_stop_is_optimal_for_convex_reward_of_a_martingale():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    grid = TimeGrid(n=4, horizon=1.0)
    m0 = make_empirical([(0.9, 1)])
    cfg = SearchConfig(paths_per_atom=3000, refine_rounds=2)
    est, pol = solve_value(m0, problem, grid, cfg, seed=7)
    ref = evaluate_policy(m0, problem, grid, Policy.never_stop(grid.n), 3000, seed=7)
    assert est.value >= ref.value - 1e-12  # never-stop is one of the candidates
    assert est.value == pytest.approx(ref.value, abs=3 * np.hypot(est.mc_stderr, ref.mc_stderr) + 1e-3)
    # and the analytic unstopped value is the truth
    z = 0.1
    oracle = 0.1 * norm.cdf(z) + norm.pdf(z)
    assert est.value == pytest.approx(oracle, abs=4 * est.mc_stderr + 2e-3)


def test_solver_beats_every_random_policy_it_did_not_search():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    grid = TimeGrid(n=4, horizon=1.0)
    m0 = make_empirical([(0.8, 1), (1.1, 1)], [0.5, 0.5])
    cfg = SearchConfig(paths_per_atom=1200, refine_rounds=2)
    est, _ = solve_value(m0, problem, grid, cfg, seed=3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        pol = Policy(
            tuple(StopMap.constant(float(rng.uniform())) for _ in range(grid.n))
        )
        other = evaluate_policy(m0, problem, grid, pol, 1200, seed=3)
        assert other.value <= est.value + 3 * np.hypot(est.mc_stderr, other.mc_stderr)


def test_grid_refinement_does_not_lose_value():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    m0 = make_empirical([(0.95, 1)])
    cfg = SearchConfig(paths_per_atom=1500, refine_rounds=2)
    coarse, _ = solve_value(m0, problem, TimeGrid(3, 1.0), cfg, seed=5)
    fine, _ = solve_value(m0, problem, TimeGrid(6, 1.0), cfg, seed=5)
    assert fine.value >= coarse.value - 3 * np.hypot(coarse.mc_stderr, fine.mc_stderr)


# ---------------------------------------------------------------------------
# DPP
# ---------------------------------------------------------------------------


def test_dpp_exact_on_deterministic_instance():
    grid = TimeGrid(n=2, horizon=1.0)
    report = verify_dpp(HUMP_M0, hump_problem(), grid, split_index=1, mode="exact")
    assert report.residual <= 1e-12
    assert report.combined_stderr == 0.0


def test_dpp_search_mode_on_continuation_favoured_problem():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    grid = TimeGrid(n=6, horizon=1.0)
    m0 = make_empirical([(0.9, 1)])
    cfg = SearchConfig(paths_per_atom=1500, refine_rounds=2)
    report = verify_dpp(m0, problem, grid, split_index=3, solver_cfg=cfg, seed=13)
    assert report.residual <= 3 * report.combined_stderr + 5e-3


def test_dpp_terminal_split_is_exact_replay():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    grid = TimeGrid(n=4, horizon=1.0)
    m0 = make_empirical([(0.9, 1)])
    cfg = SearchConfig(paths_per_atom=600, refine_rounds=1)
    report = verify_dpp(m0, problem, grid, split_index=grid.n, solver_cfg=cfg, seed=2)
    assert report.residual <= 1e-10


def test_dpp_rejects_bad_split():
    with pytest.raises(ValueError):
        verify_dpp(HUMP_M0, hump_problem(), TimeGrid(2, 1.0), split_index=0)


# ---------------------------------------------------------------------------
# monotonicity in the stopping order
# ---------------------------------------------------------------------------


def test_full_survival_map_changes_nothing():
    m = make_empirical([(0.5, 1), (1.5, 1)], [0.5, 0.5])
    assert apply_stop(m, StopMap.constant(1.0)).allclose(m)


def test_stop_now_value_is_dominated():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    grid = TimeGrid(n=3, horizon=1.0)
    m = make_empirical([(0.9, 1)])
    cfg = SearchConfig(paths_per_atom=800, refine_rounds=1)
    est, _ = solve_value(m, problem, grid, cfg, seed=4)
    xs, ws = m.x_marginal()
    assert est.value >= problem.g(xs, ws) - 3 * est.mc_stderr


def test_monotonicity_report_is_clean_on_small_problem():
    problem = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 1.0,
        f=None, g=put_g(1.0), horizon=1.0,
    )
    grid = TimeGrid(n=3, horizon=1.0)
    m = make_empirical([(0.7, 1), (1.2, 1)], [0.6, 0.4])
    cfg = SearchConfig(paths_per_atom=400, refine_rounds=1)
    report = monotonicity_check(m, problem, grid, trials=4, seed=9, solver_cfg=cfg)
    assert report.n_trials == 4
    assert report.n_violations == 0
    assert report.worst_gap >= 0.0
    assert len(report.details) == 4
