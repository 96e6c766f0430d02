"""Policy evaluation: exact identities, an analytic oracle, terminal stop sup."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from mfstop.dynamics import Problem, TimeGrid, simulate_unstopped
from mfstop.measures import StopMap, make_empirical
from mfstop.policy import (
    Policy,
    evaluate_policy,
    evaluate_policy_detailed,
    policy_from_json,
    policy_to_json,
    terminal_stop_sup,
    unstopped_value,
)


def mean_g(points, weights):
    return float(points[:, 0] @ weights)


def put_g(strike):
    def g(points, weights):
        return float(np.maximum(strike - points[:, 0], 0.0) @ weights)

    return g


def brownian(f=None, g=mean_g, horizon=1.0):
    return Problem(
        d=1,
        b=lambda t, x, m: 0.0,
        sigma=lambda t, x, m: 1.0,
        f=f,
        g=g,
        horizon=horizon,
    )


def test_never_stop_matches_unstopped_simulation_exactly():
    # same seed, same particle ids: paths and value must agree bitwise
    problem = Problem(
        d=1,
        b=lambda t, x, m: 0.2 * x,
        sigma=lambda t, x, m: 0.3 * np.abs(x[:, 0]),
        f=lambda t, x, m: np.cos(x[:, 0]),
        g=put_g(1.2),
        horizon=1.0,
    )
    grid = TimeGrid(n=10, horizon=1.0)
    m0 = make_empirical([(1.0, 1)])
    seed = 99

    bundle = simulate_unstopped(m0, problem, grid, paths_per_atom=400, seed=seed)
    manual = 0.0
    for k in range(grid.n):
        x, flags, ws = bundle.state_arrays(k)
        alive = flags == 1
        manual += grid.dt * float(np.cos(x[alive, 0]) @ ws[alive])
    pts, wts = bundle.marginal_arrays(grid.n)
    manual += problem.g(pts, wts)

    est, diag = evaluate_policy_detailed(
        m0, problem, grid, Policy.never_stop(grid.n), paths_per_atom=400, seed=seed
    )
    snap = diag["terminal_snapshot"]
    xs_m, ws_m = snap.x_marginal()
    xs_b, ws_b = bundle.snapshot(grid.n).x_marginal()
    assert np.array_equal(xs_m, xs_b)
    assert np.allclose(ws_m, ws_b, atol=1e-15)
    assert est.value == pytest.approx(manual, abs=1e-12)


def test_stop_now_returns_terminal_reward_of_initial_marginal():
    problem = brownian(g=put_g(1.0))
    grid = TimeGrid(n=5, horizon=1.0)
    m0 = make_empirical(
        [(0.4, 1), (0.9, 1), (1.3, 0), (1.8, 1)], [0.2, 0.3, 0.25, 0.25]
    )
    est = evaluate_policy(
        m0, problem, grid, Policy.stop_now(grid.n), paths_per_atom=50, seed=3
    )
    xs, ws = m0.x_marginal()
    assert est.value == pytest.approx(problem.g(xs, ws), abs=1e-12)
    assert est.mc_stderr < 1e-12  # all resamples see the same frozen atoms


def test_unstopped_put_matches_bachelier_price():
    strike, x0, horizon = 1.0, 0.9, 1.0
    problem = brownian(g=put_g(strike), horizon=horizon)
    grid = TimeGrid(n=8, horizon=horizon)
    m0 = make_empirical([(x0, 1)])
    est = evaluate_policy(
        m0, problem, grid, Policy.never_stop(grid.n), paths_per_atom=20000, seed=11
    )
    z = (strike - x0) / np.sqrt(horizon)
    oracle = (strike - x0) * norm.cdf(z) + np.sqrt(horizon) * norm.pdf(z)
    assert est.mc_stderr > 1e-4
    assert est.value == pytest.approx(oracle, abs=4 * est.mc_stderr + 2e-3)


def test_linear_terminal_reward_ignores_the_policy():
    # driftless dynamics and g = mean: every stopping rule has the same value
    problem = brownian(g=mean_g)
    grid = TimeGrid(n=6, horizon=1.0)
    m0 = make_empirical([(-0.3, 1), (0.5, 1)], [0.5, 0.5])
    target = -0.3 * 0.5 + 0.5 * 0.5
    policies = [
        Policy.never_stop(grid.n),
        Policy.threshold([0.0] * grid.n),
        Policy.constant([0.7] * grid.n),
        Policy(tuple(StopMap.logistic(1.5, -0.2) for _ in range(grid.n))),
    ]
    for pol in policies:
        est = evaluate_policy(m0, problem, grid, pol, paths_per_atom=4000, seed=21)
        assert est.value == pytest.approx(target, abs=4 * est.mc_stderr + 5e-3)


@settings(max_examples=20, deadline=None)
@given(theta=st.floats(-2.0, 2.0), seed=st.integers(0, 50))
def test_pure_threshold_policies_never_split_mass(theta, seed):
    problem = brownian(g=put_g(1.0))
    grid = TimeGrid(n=4, horizon=1.0)
    m0 = make_empirical([(0.0, 1), (1.0, 1)], [0.4, 0.6])
    pol = Policy.threshold([theta] * grid.n)
    _, diag = evaluate_policy_detailed(
        m0, problem, grid, pol, paths_per_atom=30, seed=seed
    )
    assert diag["n_pool_atoms"] == 0


def test_fractional_policy_populates_the_pool():
    problem = brownian(g=put_g(1.0))
    grid = TimeGrid(n=4, horizon=1.0)
    m0 = make_empirical([(0.5, 1)])
    pol = Policy.constant([0.5] * grid.n)
    est, diag = evaluate_policy_detailed(
        m0, problem, grid, pol, paths_per_atom=20, seed=5
    )
    assert diag["n_pool_atoms"] > 0
    assert est.n_paths == 20


def test_evaluate_policy_from_interior_node():
    # deterministic drift: starting at node s advances (n - s) steps only
    problem = Problem(
        d=1,
        b=lambda t, x, m: 1.0,
        sigma=lambda t, x, m: 0.0,
        f=None,
        g=mean_g,
        horizon=1.0,
    )
    grid = TimeGrid(n=10, horizon=1.0)
    m = make_empirical([(2.0, 1)])
    est = evaluate_policy(
        m, problem, grid, Policy.never_stop(grid.n), 1, seed=0, start_node=4
    )
    assert est.value == pytest.approx(2.0 + 0.6, abs=1e-12)


def test_unstopped_value_exact_for_deterministic_drift():
    problem = Problem(
        d=1,
        b=lambda t, x, m: 1.0,
        sigma=lambda t, x, m: 0.0,
        f=lambda t, x, m: np.ones(x.shape[0]),
        g=mean_g,
        horizon=1.0,
    )
    m = make_empirical([(2.0, 1)])
    val = unstopped_value(m, problem, t_start=0.4, n_steps=7, paths_per_atom=1, seed=0)
    # running reward 1 * surviving mass over [0.4, 1], then the drifted mean
    assert val == pytest.approx(0.6 + 2.6, abs=1e-12)
    at_horizon = unstopped_value(m, problem, 1.0, 5, 1, seed=0)
    assert at_horizon == pytest.approx(2.0, abs=1e-15)


# ---------------------------------------------------------------------------
# terminal stop sup
# ---------------------------------------------------------------------------


def marginal_mean(m):
    xs, ws = m.x_marginal()
    return float(xs[:, 0] @ ws)


def test_terminal_sup_is_flat_for_marginal_functionals():
    m = make_empirical([(0.0, 1), (1.0, 1), (2.0, 0)], [0.3, 0.3, 0.4])
    val, smap = terminal_stop_sup(m, marginal_mean, mode="exact")
    assert val == pytest.approx(marginal_mean(m), abs=1e-12)


def test_terminal_sup_linear_functional_matches_sitewise_closed_form():
    # G linear in the atom weights: the optimum picks each site independently
    rng = np.random.default_rng(7)
    xs = rng.normal(size=5)
    ws = rng.uniform(0.5, 1.5, size=9)
    atoms = [(x, 1) for x in xs] + [(x + 3.0, 0) for x in rng.normal(size=4)]
    m = make_empirical(atoms, ws)

    def G(meas):
        xa, wa = meas.survivors()
        xsp, wsp = meas.stopped()
        return float(np.sin(3 * xa[:, 0]) @ wa + np.cos(2 * xsp[:, 0]) @ wsp)

    xa, wa = m.survivors()
    xsp, wsp = m.stopped()
    closed = float(
        np.maximum(np.sin(3 * xa[:, 0]), np.cos(2 * xa[:, 0])) @ wa
        + np.cos(2 * xsp[:, 0]) @ wsp
    )
    for mode in ("exact", "search"):
        val, smap = terminal_stop_sup(m, G, mode=mode, seed=1)
        assert val == pytest.approx(closed, abs=1e-12)


def test_terminal_sup_fractional_beats_every_corner():
    # G = surviving * stopped mass: corners give 0, the half split gives 1/4
    m = make_empirical([(0.7, 1)])

    def G(meas):
        return meas.surviving_mass() * (meas.total_mass() - meas.surviving_mass())

    val, smap = terminal_stop_sup(m, G, mode="exact")
    assert val == pytest.approx(0.25, abs=1e-12)
    assert smap(np.array([[0.7]]))[0] == pytest.approx(0.5, abs=1e-12)


def test_terminal_sup_rejects_oversized_enumeration():
    m = make_empirical([(float(k), 1) for k in range(17)])
    with pytest.raises(ValueError):
        terminal_stop_sup(m, marginal_mean, mode="exact")


def test_terminal_sup_on_fully_stopped_measure():
    m = make_empirical([(1.0, 0), (2.0, 0)], [0.5, 0.5])
    val, smap = terminal_stop_sup(m, marginal_mean, mode="exact")
    assert val == pytest.approx(1.5, abs=1e-15)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_policy_json_round_trip():
    pol = Policy(
        (
            StopMap.constant(0.25),
            StopMap.threshold(0.7, "above"),
            StopMap.logistic([1.0], -0.5),
            StopMap.tabular([0.0, 1.0], [0.1, 0.5, 0.9]),
        ),
        family="mixed",
    )
    back = policy_from_json(policy_to_json(pol))
    assert back.family == pol.family
    x = np.linspace(-2, 2, 11)[:, None]
    for a, b in zip(pol.maps, back.maps):
        assert np.allclose(a(x), b(x), atol=0.0)
    assert policy_to_json(back) == policy_to_json(pol)


def test_policy_json_rejects_opaque_callables():
    pol = Policy((StopMap(lambda x: np.ones(x.shape[0])),))
    with pytest.raises(ValueError):
        policy_to_json(pol)
