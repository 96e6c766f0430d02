"""Simulation: freezing, conservation, determinism, moment oracles."""

from __future__ import annotations

import numpy as np
import pytest

from mfstop.dynamics import (
    Problem,
    TimeGrid,
    euler_step,
    load_bundle,
    save_bundle,
    simulate_unstopped,
    spawn_particles,
)
from mfstop.measures import make_empirical
from mfstop.rng import normals


def _mean_g(points, weights):
    return float(weights @ points[:, 0])


def brownian_problem(d=1, horizon=1.0):
    return Problem(
        d=d,
        b=lambda t, x, m: 0.0,
        sigma=lambda t, x, m: 1.0,
        f=None,
        g=_mean_g,
        horizon=horizon,
    )


def gbm_problem(b0, s0, horizon=1.0, truncated=False):
    return Problem(
        d=1,
        b=lambda t, x, m: b0 * x,
        sigma=lambda t, x, m: s0 * np.abs(x[:, 0]),
        f=None,
        g=_mean_g,
        horizon=horizon,
        truncated_horizon=truncated,
    )


def test_zero_coefficients_freeze_everything():
    prob = Problem(
        d=1, b=lambda t, x, m: 0.0, sigma=lambda t, x, m: 0.0, f=None,
        g=_mean_g, horizon=1.0,
    )
    m0 = make_empirical([(0.5, 1), (-1.0, 1), (2.0, 0)])
    bundle = simulate_unstopped(m0, prob, TimeGrid(4, 1.0), paths_per_atom=3, seed=0)
    for k in range(5):
        assert np.array_equal(bundle.xs[k], bundle.xs[0])


def test_stopped_particles_never_move():
    prob = brownian_problem()
    m0 = make_empirical([(0.0, 1), (5.0, 0)])
    bundle = simulate_unstopped(m0, prob, TimeGrid(6, 1.0), paths_per_atom=4, seed=1)
    frozen = bundle.flags[0] == 0
    assert frozen.any()
    for k in range(1, 7):
        assert np.array_equal(bundle.xs[k][frozen], bundle.xs[0][frozen])
        assert np.array_equal(bundle.ws[k], bundle.ws[0])


def test_terminal_flags_zeroed_positions_kept():
    prob = brownian_problem()
    m0 = make_empirical([(0.0, 1)])
    bundle = simulate_unstopped(m0, prob, TimeGrid(3, 1.0), paths_per_atom=8, seed=2)
    assert np.all(bundle.flags[3] == 0)
    assert np.all(bundle.flags[2] == 1)
    assert not np.array_equal(bundle.xs[3], bundle.xs[2])


def test_single_step_increment_variance():
    # one Euler step of standard Brownian motion: Var = dt
    prob = brownian_problem()
    n = 100_000
    grid = TimeGrid(10, 1.0)
    m0 = make_empirical([(0.0, 1)])
    bundle = spawn_particles(m0, grid, paths_per_atom=n, seed=3)
    noise = normals(3, bundle.particle_ids, 0, 1)
    euler_step(bundle, 0, prob, noise)
    incr = bundle.xs[1][:, 0] - bundle.xs[0][:, 0]
    var = incr.var()
    se = np.sqrt(2.0 / n) * grid.dt  # stderr of a variance estimate at Var=dt
    assert abs(var - grid.dt) < 3 * se
    assert abs(incr.mean()) < 3 * np.sqrt(grid.dt / n)


def test_gbm_terminal_mean():
    b0, s0, T = 0.12, 0.3, 1.0
    prob = gbm_problem(b0, s0, T)
    m0 = make_empirical([(1.0, 1)])
    bundle = simulate_unstopped(m0, prob, TimeGrid(64, T), paths_per_atom=40_000, seed=4)
    xT = bundle.xs[-1][:, 0]
    want = np.exp(b0 * T)
    se = xT.std() / np.sqrt(len(xT))
    # allow 3 MC stderr plus first-order discretization slack
    assert abs(xT.mean() - want) < 3 * se + 5e-3


def test_seed_determinism():
    prob = gbm_problem(0.05, 0.2)
    m0 = make_empirical([(1.0, 1), (2.0, 1)], [1, 3])
    a = simulate_unstopped(m0, prob, TimeGrid(5, 1.0), 10, seed=42)
    b = simulate_unstopped(m0, prob, TimeGrid(5, 1.0), 10, seed=42)
    c = simulate_unstopped(m0, prob, TimeGrid(5, 1.0), 10, seed=43)
    assert np.array_equal(a.xs, b.xs)
    assert np.array_equal(a.ws, b.ws)
    assert not np.array_equal(a.xs, c.xs)


def test_mass_conservation():
    prob = brownian_problem()
    m0 = make_empirical([(0.0, 1), (1.0, 1), (2.0, 0)], [1, 2, 3])
    bundle = simulate_unstopped(m0, prob, TimeGrid(20, 1.0), 50, seed=5)
    for k in range(21):
        assert abs(bundle.total_mass(k) - 1.0) <= 1e-12


def test_martingale_mean_preserved():
    prob = brownian_problem()
    m0 = make_empirical([(0.3, 1), (-0.7, 1), (1.5, 0)], [2, 1, 1])
    bundle = simulate_unstopped(m0, prob, TimeGrid(16, 1.0), 4000, seed=6)
    w = bundle.ws[0]
    mean0 = w @ bundle.xs[0][:, 0]
    for k in (4, 8, 16):
        mk = w @ bundle.xs[k][:, 0]
        alive_w = w[bundle.flags[0] == 1]
        se = np.sqrt((alive_w**2).sum() * bundle.grid.nodes[k])
        assert abs(mk - mean0) < 3 * se


def test_measure_dependent_drift_sees_snapshot():
    seen = []

    def b(t, x, m):
        seen.append(m)
        mean = m.survivors()[1] @ m.survivors()[0][:, 0] / m.surviving_mass()
        return 0.5 * (mean - x)

    prob = Problem(
        d=1, b=b, sigma=lambda t, x, m: 0.0, f=None, g=_mean_g,
        horizon=1.0, b_uses_measure=True,
    )
    m0 = make_empirical([(0.0, 1), (2.0, 1)])
    bundle = simulate_unstopped(m0, prob, TimeGrid(4, 1.0), 1, seed=7)
    assert all(s is not None for s in seen)
    # attraction to the (preserved) mean: particles contract toward 1.0
    gap0 = abs(bundle.xs[0][0, 0] - bundle.xs[0][1, 0])
    gapT = abs(bundle.xs[-1][0, 0] - bundle.xs[-1][1, 0])
    assert gapT < gap0


def test_snapshot_is_valid_measure():
    prob = brownian_problem()
    m0 = make_empirical([(0.0, 1), (1.0, 0)], [3, 1])
    bundle = simulate_unstopped(m0, prob, TimeGrid(5, 1.0), 7, seed=8)
    snap = bundle.snapshot(3)
    assert snap.total_mass() == pytest.approx(1.0, abs=1e-12)
    assert snap.surviving_mass() == pytest.approx(0.75, abs=1e-12)


def test_nonfinite_coefficients_raise():
    prob = Problem(
        d=1, b=lambda t, x, m: np.nan, sigma=lambda t, x, m: 1.0, f=None,
        g=_mean_g, horizon=1.0,
    )
    m0 = make_empirical([(0.0, 1)])
    with pytest.raises(ValueError, match="non-finite"):
        simulate_unstopped(m0, prob, TimeGrid(2, 1.0), 3, seed=9)


def test_truncation_warning():
    # contraction regime, but horizon too short for |X| to die out
    prob = gbm_problem(-0.5, 0.1, horizon=1.0, truncated=True)
    m0 = make_empirical([(1.0, 1)])
    with pytest.warns(RuntimeWarning, match="truncated infinite horizon"):
        simulate_unstopped(m0, prob, TimeGrid(8, 1.0), 100, seed=10)


def test_truncation_quiet_when_decayed():
    import warnings as w

    prob = gbm_problem(-1.0, 0.05, horizon=8.0, truncated=True)
    m0 = make_empirical([(1.0, 1)])
    with w.catch_warnings():
        w.simplefilter("error")
        simulate_unstopped(m0, prob, TimeGrid(64, 8.0), 100, seed=11)


def test_bundle_binary_round_trip(tmp_path):
    prob = gbm_problem(0.1, 0.25)
    m0 = make_empirical([(1.0, 1), (2.0, 0)], [1, 1])
    bundle = simulate_unstopped(m0, prob, TimeGrid(6, 1.0), 5, seed=12)
    bundle.pool[2] = (np.array([[9.0]]), np.array([0.0125]))  # exercise pool IO
    path = str(tmp_path / "paths.bin")
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert np.array_equal(loaded.xs, bundle.xs)
    assert np.array_equal(loaded.flags, bundle.flags)
    assert np.array_equal(loaded.ws, bundle.ws)
    assert np.array_equal(loaded.particle_ids, bundle.particle_ids)
    assert loaded.pool[2] is not None
    assert np.array_equal(loaded.pool[2][0], bundle.pool[2][0])
    assert loaded.pool[1] is None
    assert loaded.grid.n == 6 and loaded.seed == 12
