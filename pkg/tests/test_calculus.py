"""Bump-quotient derivatives, the flow generator, and stationarity residuals."""

import numpy as np
import pytest

from mfstop.calculus import (
    BumpSizes,
    ResidualConfig,
    estimate_derivatives,
    generator,
    linear_derivative,
    make_unstopped_functional,
    obstacle_residual,
    running_reward,
)
from mfstop.catalog import build_instance
from mfstop.dynamics import Problem
from mfstop.measures import from_arrays, make_empirical
from mfstop.pde import aggregate_value, standard_os_pde

M3 = make_empirical([(-0.4, 1), (0.5, 0), (1.1, 1)], [0.3, 0.3, 0.4])


def full_mean(m):
    return float(m.xs[:, 0] @ m.ws)


def test_linear_functional_derivative_is_exact():
    u = lambda t, m: float((m.xs[:, 0] ** 2 + 3.0 * m.flags) @ m.ws)
    expect = (0.7**2 + 3.0) - u(0.0, M3)
    for richardson in (False, True):
        got = linear_derivative(u, 0.0, M3, (0.7, 1), eps=0.02, richardson=richardson)
        assert abs(got - expect) <= 1e-12


def test_quadratic_functional_matches_closed_form():
    u = lambda t, m: full_mean(m) ** 2
    zbar = full_mean(M3)
    y = 0.9
    exact = 2.0 * zbar * (y - zbar)
    rich = linear_derivative(u, 0.0, M3, (y, 1), eps=1e-2)
    assert abs(rich - exact) <= 1e-10
    raw_err = [
        abs(linear_derivative(u, 0.0, M3, (y, 1), eps=e, richardson=False) - exact)
        for e in (1e-2, 5e-3)
    ]
    assert raw_err[0] > 1e-6
    assert abs(raw_err[0] / raw_err[1] - 2.0) <= 0.2


def test_richardson_error_is_second_order_on_a_cubic():
    u = lambda t, m: full_mean(m) ** 3
    zbar = full_mean(M3)
    y = 1.3
    exact = 3.0 * zbar**2 * (y - zbar)
    eps = np.array([1e-2, 5e-3, 2.5e-3])
    raw = np.array(
        [
            abs(linear_derivative(u, 0.0, M3, (y, 1), eps=e, richardson=False) - exact)
            for e in eps
        ]
    )
    rich = np.array(
        [abs(linear_derivative(u, 0.0, M3, (y, 1), eps=e) - exact) for e in eps]
    )
    slope_raw = np.polyfit(np.log(eps), np.log(raw), 1)[0]
    slope_rich = np.polyfit(np.log(eps), np.log(rich), 1)[0]
    assert 0.9 <= slope_raw <= 1.2
    assert 1.8 <= slope_rich <= 2.3


def test_constant_functional_has_zero_derivative():
    u = lambda t, m: 4.2
    assert linear_derivative(u, 0.0, M3, (0.3, 0)) == 0.0


def test_estimate_centers_delta_and_d_i_is_gauge_invariant():
    u = lambda t, m: full_mean(m) ** 2 + float((m.xs[:, 0] ** 2) @ m.ws)
    est = estimate_derivatives(u, 0.0, M3)
    assert abs(float(M3.ws @ est.delta_m)) <= 1e-10
    x = 1.1
    direct = linear_derivative(u, 0.0, M3, (x, 1)) - linear_derivative(
        u, 0.0, M3, (x, 0)
    )
    live_xs = M3.survivors()[0][:, 0]
    k = int(np.flatnonzero(np.isclose(live_xs, x))[0])
    assert abs(est.d_I[k] - direct) <= 1e-9


def test_generator_matches_drift_only_analytic_value():
    problem = Problem(
        d=1,
        b=lambda t, x, m: np.full_like(x, 0.3),
        sigma=lambda t, x, m: 0.0,
        f=None,
        g=lambda xs, ws: 0.0,
        horizon=1.0,
    )
    u = lambda t, m: float(m.survivors()[0][:, 0] @ m.survivors()[1])
    got = generator(u, 0.4, M3, problem)
    assert abs(got - 0.3 * M3.surviving_mass()) <= 1e-8


def test_generator_matches_diffusion_only_analytic_value():
    problem = Problem(
        d=1,
        b=lambda t, x, m: 0.0,
        sigma=lambda t, x, m: 0.7,
        f=None,
        g=lambda xs, ws: 0.0,
        horizon=1.0,
    )
    u = lambda t, m: float((m.survivors()[0][:, 0] ** 2) @ m.survivors()[1])
    got = generator(u, 0.2, M3, problem)
    assert abs(got - 0.49 * M3.surviving_mass()) <= 1e-5


def test_generator_time_term_with_edge_clamping():
    problem = Problem(
        d=1,
        b=lambda t, x, m: 0.0,
        sigma=lambda t, x, m: 0.0,
        f=None,
        g=lambda xs, ws: 0.0,
        horizon=2.0,
    )
    u = lambda t, m: t * m.surviving_mass()
    for t in (0.0, 1.0, 2.0):
        got = generator(u, t, M3, problem)
        assert abs(got - M3.surviving_mass()) <= 1e-9


def test_running_reward_integrates_over_survivors():
    problem = Problem(
        d=1,
        b=lambda t, x, m: 0.0,
        sigma=lambda t, x, m: 1.0,
        f=lambda t, x, m: 0.1 * x[:, 0],
        g=lambda xs, ws: 0.0,
        horizon=1.0,
    )
    expect = 0.1 * (-0.4 * 0.3 + 1.1 * 0.4)
    assert abs(running_reward(problem, 0.0, M3) - expect) <= 1e-12


def _gbm_problem():
    return Problem(
        d=1,
        b=lambda t, x, m: -0.35 * x,
        sigma=lambda t, x, m: 0.45 * x,
        f=lambda t, x, m: 0.1 * x[:, 0],
        g=lambda xs, ws: float(xs[:, 0] @ ws),
        horizon=2.0,
    )


def test_simulated_functional_is_linear_under_reweighting():
    # with a linear terminal reward and linear running reward, the simulated
    # functional is exactly linear in the weights once the noise is frozen,
    # so bump quotients at an existing atom must not depend on eps at all
    problem = _gbm_problem()
    u = make_unstopped_functional(problem, n_steps=24, paths_per_atom=400, seed=3)
    m = make_empirical([(0.8, 1), (1.1, 1), (1.35, 0)], [0.4, 0.35, 0.25])
    qa = linear_derivative(u, 0.7, m, (1.1, 1), eps=0.2, richardson=False)
    qb = linear_derivative(u, 0.7, m, (1.1, 1), eps=0.01, richardson=False)
    assert abs(qa - qb) <= 1e-9


def test_simulated_functional_shares_noise_across_small_shifts():
    problem = _gbm_problem()
    u = make_unstopped_functional(problem, n_steps=24, paths_per_atom=400, seed=3)
    m = make_empirical([(0.8, 1), (1.1, 1)], [0.5, 0.5])
    shifted = make_empirical([(0.8 + 1e-3, 1), (1.1, 1)], [0.5, 0.5])
    # same bucket, same draws: the gap reflects the flow derivative, not
    # independent Monte Carlo noise
    assert abs(u(0.7, shifted) - u(0.7, m)) <= 3e-3


def test_flow_identity_for_simulated_unstopped_functional():
    problem = _gbm_problem()
    u = make_unstopped_functional(problem, n_steps=48, paths_per_atom=3000, seed=13)
    m = make_empirical([(0.8, 1), (1.1, 1), (1.35, 0)], [0.4, 0.35, 0.25])
    t = 0.7
    resid = generator(u, t, m, problem) + running_reward(problem, t, m)
    assert abs(resid) <= 5e-2


def _put_setup():
    inst = build_instance("standard_put")
    pde = standard_os_pde(inst.problem, inst.psi, inst.pde_cfg)
    u = lambda t, m: aggregate_value(m, pde, inst.psi, t)
    return inst, u


# the aggregate u interpolates a PDE surface with cell width 0.025, so the
# spatial probes must straddle several cells for second differences to see
# the surface rather than the interpolation
PDE_BUMPS = BumpSizes(h=0.04)


def test_residual_in_the_continuation_region():
    inst, u = _put_setup()
    m = make_empirical([(1.2, 1), (1.5, 1)], [0.5, 0.5])
    rep = obstacle_residual(
        u, 0.5, m, inst.problem, ResidualConfig(seed=1, bumps=PDE_BUMPS)
    )
    assert not rep["empty_survivors"]
    assert rep["d_I_min"] > 5e-2
    assert abs(rep["interior_term"]) <= 2e-2
    assert abs(rep["residual"]) <= 2e-2


def test_residual_flags_the_exercise_like_region():
    inst, u = _put_setup()
    m = make_empirical([(-2.0, 1)])
    rep = obstacle_residual(
        u, 0.5, m, inst.problem, ResidualConfig(seed=2, bumps=PDE_BUMPS)
    )
    assert rep["d_I_min"] <= 1e-3
    assert rep["residual"] <= rep["d_I_min"] + 1e-12
    assert rep["residual"] >= -2e-2


def test_residual_terminal_layer_has_no_stop_improvement():
    inst, u = _put_setup()
    m = make_empirical([(0.6, 1), (1.3, 1), (0.9, 0)], [0.4, 0.4, 0.2])
    rep = obstacle_residual(
        u, inst.problem.horizon, m, inst.problem,
        ResidualConfig(seed=3, bumps=PDE_BUMPS),
    )
    assert rep["d_I_min"] >= -1e-9


def test_residual_with_no_survivors_reports_interior_only():
    inst, u = _put_setup()
    m = make_empirical([(0.7, 0), (1.2, 0)], [0.5, 0.5])
    rep = obstacle_residual(
        u, 0.5, m, inst.problem, ResidualConfig(seed=4, bumps=PDE_BUMPS)
    )
    assert rep["empty_survivors"]
    assert rep["d_I_min"] is None
    assert rep["residual"] == rep["interior_term"]
    assert abs(rep["interior_term"]) <= 1e-6
    assert rep["n_kept"] >= 1


def test_residual_report_is_deterministic():
    inst, u = _put_setup()
    m = make_empirical([(0.9, 1), (1.4, 1)], [0.6, 0.4])
    cfg = ResidualConfig(seed=7, bumps=PDE_BUMPS, n_stop_maps=16)
    assert obstacle_residual(u, 0.3, m, inst.problem, cfg) == obstacle_residual(
        u, 0.3, m, inst.problem, cfg
    )


def test_bump_and_config_validation():
    with pytest.raises(ValueError):
        BumpSizes(eps=0.6)
    with pytest.raises(ValueError):
        BumpSizes(h=0.0)
    with pytest.raises(ValueError):
        ResidualConfig(n_stop_maps=-1)
    with pytest.raises(ValueError):
        ResidualConfig(membership_tol=-0.1)
    u = lambda t, m: 0.0
    with pytest.raises(ValueError, match="flag"):
        linear_derivative(u, 0.0, M3, (0.5, 2))
    with pytest.raises(ValueError, match="eps"):
        linear_derivative(u, 0.0, M3, (0.5, 1), eps=0.9)
    problem = _gbm_problem()
    with pytest.raises(ValueError):
        make_unstopped_functional(problem, paths_per_atom=1 << 20)
    sim = make_unstopped_functional(problem, n_steps=4, paths_per_atom=8)
    with pytest.raises(ValueError, match="time"):
        sim(2.5, M3)
