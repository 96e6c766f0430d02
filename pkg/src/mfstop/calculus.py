"""Finite-difference calculus for functionals of weighted atom measures.

The linear derivative of u at a point y is probed by the weight-bump
quotient [u((1-eps) m + eps delta_y) - u(m)] / eps. As eps -> 0 this tends
to delta_m u(t,m,y) - int delta_m u dm, i.e. the quotient is
self-centering: it converges to the representative of the derivative whose
m-integral vanishes, which is the gauge fixed throughout this module (the
derivative is defined only up to an additive constant). One Richardson
halving (2 q(eps/2) - q(eps)) removes the first-order error, so quotients
are exact on functionals linear or quadratic in the measure.

From the bump probes are assembled:

* ``d_I``, the stop sensitivity at a surviving position x: the derivative
  at (x, 1) minus the derivative at (x, 0). The centering constant cancels,
  so d_I is gauge-invariant. Negative values mean stopping mass at x raises
  u to first order.
* spatial central differences of the survivor-side derivative, from which
  ``generator`` builds the measure flow operator: the time derivative of u
  plus the survivor-weighted drift and diffusion terms acting on
  delta_m u along x.
* ``obstacle_residual``, which checks the stationarity structure of a
  candidate value function: at an optimum, no admissible stop of m may make
  the flow term -(generator + running reward) negative, and the worst stop
  sensitivity over the survivor support must vanish; the residual is the
  minimum of the two.

``make_unstopped_functional`` turns a problem into a simulated functional
u(t, m) = terminal reward of the never-stop flow plus the accumulated
running reward. Its noise is addressed by the spatial bucket of each path's
start position rather than by atom identity, so a measure and its probe
bumps (reweighted atoms, or positions shifted by less than a bucket) see
identical draws and finite differences stay usable despite Monte Carlo
noise. Probes that cross a bucket edge fall back to independent noise; keep
probe centers away from multiples of the bucket width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import rng as crng
from .dynamics import Problem, advance_positions
from .measures import EmpiricalMeasure, StopMap, apply_stop, from_arrays
from .solver import _random_stop_map
from .util import parallel_map, rng_for

__all__ = [
    "BumpSizes",
    "linear_derivative",
    "DerivativeEstimate",
    "estimate_derivatives",
    "running_reward",
    "generator",
    "make_unstopped_functional",
    "ResidualConfig",
    "obstacle_residual",
]


@dataclass(frozen=True)
class BumpSizes:
    """Probe step sizes.

    eps is the weight of the bump atom; h scales the spatial probes as
    h (1 + |x|); dt_frac scales the time probe by the problem horizon.
    Richardson halving is on by default so that low-degree functionals are
    differentiated exactly.
    """

    eps: float = 1e-2
    h: float = 1e-3
    dt_frac: float = 1e-3
    richardson: bool = True

    def __post_init__(self):
        if not 0.0 < self.eps <= 0.5:
            raise ValueError("eps must lie in (0, 0.5]")
        if self.h <= 0.0 or self.dt_frac <= 0.0:
            raise ValueError("bump sizes must be positive")


def _with_atom(m: EmpiricalMeasure, x, flag: int, eps: float) -> EmpiricalMeasure:
    x_row = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    if x_row.shape[1] != m.d:
        raise ValueError("bump point dimension does not match the measure")
    xs = np.vstack([m.xs, x_row])
    flags = np.concatenate([m.flags, np.array([flag], dtype=np.uint8)])
    ws = np.concatenate([(1.0 - eps) * m.ws, np.array([eps])])
    return from_arrays(xs, flags, ws)


def _quotient(u, t, m, x, flag, eps, base) -> float:
    val = float(u(t, _with_atom(m, x, flag, eps)))
    if not math.isfinite(val):
        raise ValueError("functional returned a non-finite value at a bump probe")
    return (val - base) / eps


def linear_derivative(
    u: Callable[[float, EmpiricalMeasure], float],
    t: float,
    m: EmpiricalMeasure,
    y: tuple,
    eps: float = 1e-2,
    richardson: bool = True,
) -> float:
    """Centered linear derivative of u at (t, m) in the point y = (x, flag).

    Returns the bump quotient, Richardson-extrapolated over eps and eps/2
    unless disabled. Exact for functionals linear in m at any eps; first
    order in eps otherwise (second order after extrapolation).
    """
    x, flag = y
    flag = int(flag)
    if flag not in (0, 1):
        raise ValueError("flag must be 0 or 1")
    if not 0.0 < eps <= 0.5:
        raise ValueError("eps must lie in (0, 0.5]")
    base = float(u(t, m))
    if not math.isfinite(base):
        raise ValueError("functional is non-finite at the base measure")
    q = _quotient(u, t, m, x, flag, eps, base)
    if not richardson:
        return q
    return 2.0 * _quotient(u, t, m, x, flag, eps / 2.0, base) - q


@dataclass(frozen=True)
class DerivativeEstimate:
    """Assembled probe values at one (t, m).

    delta_m holds the centered derivative per atom of m (its m-weighted sum
    is zero by the gauge); d_I, dx_delta, dxx_delta are per surviving atom
    in canonical atom order; dt is the time difference of u.
    """

    delta_m: np.ndarray
    d_I: np.ndarray
    dx_delta: np.ndarray
    dxx_delta: np.ndarray
    dt: float
    bumps: BumpSizes


def estimate_derivatives(
    u: Callable[[float, EmpiricalMeasure], float],
    t: float,
    m: EmpiricalMeasure,
    bumps: BumpSizes = BumpSizes(),
    horizon: Optional[float] = None,
) -> DerivativeEstimate:
    """All derivative probes of u at (t, m) in one sweep; d = 1 only.

    The spatial probes sit at x +- h (1+|x|) on the survivor side; the time
    probe is central with step dt_frac * horizon, one-sided at the ends of
    [0, horizon]. Raw bump quotients are recentered so the weighted sum of
    delta_m vanishes exactly; d_I uses the raw difference, where the
    centering constant cancels anyway.
    """
    if m.d != 1:
        raise ValueError("derivative probes are one-dimensional")
    base = float(u(t, m))
    if not math.isfinite(base):
        raise ValueError("functional is non-finite at the base measure")

    def quot(x, flag) -> float:
        q = _quotient(u, t, m, x, flag, bumps.eps, base)
        if not bumps.richardson:
            return q
        return 2.0 * _quotient(u, t, m, x, flag, bumps.eps / 2.0, base) - q

    raw = np.array([quot(m.xs[k], int(m.flags[k])) for k in range(m.n_atoms)])
    delta_m = raw - float(m.ws @ raw)

    live = np.flatnonzero(m.flags == 1)
    d_i = np.empty(live.size)
    dx = np.empty(live.size)
    dxx = np.empty(live.size)
    for out_k, k in enumerate(live):
        x = float(m.xs[k, 0])
        h = bumps.h * (1.0 + abs(x))
        q_mid = raw[k]
        q_plus = quot(np.array([x + h]), 1)
        q_minus = quot(np.array([x - h]), 1)
        d_i[out_k] = q_mid - quot(np.array([x]), 0)
        dx[out_k] = (q_plus - q_minus) / (2.0 * h)
        dxx[out_k] = (q_plus - 2.0 * q_mid + q_minus) / (h * h)

    scale = horizon if horizon is not None else 1.0
    step = bumps.dt_frac * scale
    lo = max(t - step, 0.0)
    hi = t + step if horizon is None else min(t + step, horizon)
    if hi <= lo:
        raise ValueError("time probe collapsed; horizon too small for dt_frac")
    dt_val = (float(u(hi, m)) - float(u(lo, m))) / (hi - lo)

    return DerivativeEstimate(
        delta_m=delta_m, d_I=d_i, dx_delta=dx, dxx_delta=dxx, dt=dt_val, bumps=bumps
    )


def running_reward(problem: Problem, t: float, m: EmpiricalMeasure) -> float:
    """The instantaneous mean-field reward: f integrated over survivors."""
    if problem.f is None:
        return 0.0
    xs, ws = m.survivors()
    if xs.shape[0] == 0:
        return 0.0
    vals = np.asarray(
        problem.f(t, xs, m if problem.f_uses_measure else None), dtype=float
    ).reshape(-1)
    return float(vals @ ws)


def _sigma_diag(problem: Problem, t: float, xs: np.ndarray, m) -> np.ndarray:
    """Volatility evaluated on a survivor block, flattened to (N,) for d=1."""
    sig = np.asarray(problem.sigma(t, xs, m), dtype=float)
    if sig.ndim == 3:
        return sig[:, 0, 0]
    if sig.ndim == 2:
        return np.broadcast_to(sig, xs.shape)[:, 0]
    return np.broadcast_to(sig, (xs.shape[0],)).astype(float)


def generator(
    u: Callable[[float, EmpiricalMeasure], float],
    t: float,
    m: EmpiricalMeasure,
    problem: Problem,
    bumps: BumpSizes = BumpSizes(),
) -> float:
    """Measure flow operator of the problem applied to u at (t, m).

    Time derivative of u plus the survivor-weighted sum of
    b d_x delta_m u + (1/2) sigma^2 d_xx delta_m u at the atoms. The
    additive gauge of delta_m drops out because only x-differences enter.
    """
    if problem.d != 1 or m.d != 1:
        raise ValueError("the generator probe is one-dimensional")
    est = estimate_derivatives(u, t, m, bumps, horizon=problem.horizon)
    xs, ws = m.survivors()
    if xs.shape[0] == 0:
        return est.dt
    b_vals = np.broadcast_to(
        np.asarray(
            problem.b(t, xs, m if problem.b_uses_measure else None), dtype=float
        ),
        xs.shape,
    )[:, 0]
    sig = _sigma_diag(problem, t, xs, m if problem.sigma_uses_measure else None)
    integrand = b_vals * est.dx_delta + 0.5 * sig * sig * est.dxx_delta
    return est.dt + float(ws @ integrand)


def make_unstopped_functional(
    problem: Problem,
    n_steps: int = 64,
    paths_per_atom: int = 2000,
    seed: int = 0,
    bucket: float = 0.25,
) -> Callable[[float, EmpiricalMeasure], float]:
    """Simulated value of the never-stop flow from (t, m).

    Returns u with u(t, m) = terminal reward g of the flow at the horizon
    plus the time integral of the running reward (trapezoid over the Euler
    steps). Stopped atoms stay frozen; every surviving atom is expanded
    into paths_per_atom equal-weight paths.

    Noise keys are (floor(start / bucket), path index), so reweighted atoms
    and probe positions within one bucket reuse the same draws; this common
    randomness is what keeps finite differences of u stable. Distinct atoms
    sharing a bucket share draws too, which correlates their paths but does
    not bias per-path laws for measure-free coefficients.
    """
    if problem.d != 1:
        raise ValueError("the simulated functional is one-dimensional")
    if n_steps < 1 or paths_per_atom < 1:
        raise ValueError("n_steps and paths_per_atom must be positive")
    if not 0.0 < bucket:
        raise ValueError("bucket width must be positive")
    if paths_per_atom >= (1 << 20):
        raise ValueError("paths_per_atom exceeds the noise address space")

    def u(t: float, m: EmpiricalMeasure) -> float:
        if m.d != 1:
            raise ValueError("measure dimension mismatch")
        horizon = problem.horizon
        if not -1e-12 <= t <= horizon + 1e-12:
            raise ValueError("time outside [0, horizon]")
        t = min(max(t, 0.0), horizon)

        xs_stop, ws_stop = m.stopped()
        xs_live, ws_live = m.survivors()
        n_live = xs_live.shape[0]
        if n_live == 0 or t >= horizon:
            # nothing moves and survivors are absent or out of time, so the
            # running-reward integral vanishes
            return float(problem.g(m.xs, m.ws))

        p = paths_per_atom
        start = np.repeat(xs_live[:, 0], p)
        w_path = np.repeat(ws_live / p, p)
        idx = np.floor(start / bucket).astype(np.int64) + (1 << 31)
        ids = (idx.astype(np.uint64) << np.uint64(20)) | np.tile(
            np.arange(p, dtype=np.uint64), n_live
        )

        needs_m = problem.measure_dependent
        f_needs_m = problem.f_uses_measure
        dt = (horizon - t) / n_steps
        x = start.copy()
        alive = np.ones(x.shape[0], dtype=bool)
        f_series = np.empty(n_steps + 1) if problem.f is not None else None

        def snapshot(x_now):
            return from_arrays(
                np.concatenate([x_now, xs_stop[:, 0]])[:, None],
                np.concatenate(
                    [np.ones(x_now.size, dtype=np.uint8),
                     np.zeros(xs_stop.shape[0], dtype=np.uint8)]
                ),
                np.concatenate([w_path, ws_stop]),
            )

        for k in range(n_steps):
            tk = t + k * dt
            m_snap = snapshot(x) if (needs_m or f_needs_m) else None
            if f_series is not None:
                f_vals = np.asarray(
                    problem.f(tk, x[:, None], m_snap if f_needs_m else None),
                    dtype=float,
                ).reshape(-1)
                f_series[k] = float(f_vals @ w_path)
            noise = crng.normals(seed, ids, k, 1)
            x = advance_positions(
                x[:, None], alive, tk, dt, problem,
                m_snap if needs_m else None, noise,
            )[:, 0]

        xs_term = np.concatenate([x, xs_stop[:, 0]])[:, None]
        ws_term = np.concatenate([w_path, ws_stop])
        value = float(problem.g(xs_term, ws_term))

        if f_series is not None:
            m_snap = snapshot(x) if f_needs_m else None
            f_vals = np.asarray(
                problem.f(horizon, x[:, None], m_snap), dtype=float
            ).reshape(-1)
            f_series[n_steps] = float(f_vals @ w_path)
            value += float(np.trapezoid(f_series, dx=dt))
        return value

    return u


@dataclass(frozen=True)
class ResidualConfig:
    """Sampling plan for the stationarity residual.

    n_stop_maps random stop maps plus the two extremes probe the set of
    admissible stops of m whose value stays within membership_tol of u(t,m);
    jitter_samples position-jittered copies of m approximate the lower
    envelope of the stop sensitivity.
    """

    n_stop_maps: int = 64
    membership_tol: float = 1e-3
    jitter: float = 1e-3
    jitter_samples: int = 4
    seed: int = 0
    bumps: BumpSizes = BumpSizes()
    threads: int = 1

    def __post_init__(self):
        if self.n_stop_maps < 0 or self.jitter_samples < 0:
            raise ValueError("sample counts must be nonnegative")
        if self.membership_tol < 0.0 or self.jitter < 0.0:
            raise ValueError("tolerances must be nonnegative")


def _measure_key(m: EmpiricalMeasure) -> bytes:
    return m.xs.tobytes() + m.flags.tobytes() + np.round(m.ws, 12).tobytes()


def obstacle_residual(
    u: Callable[[float, EmpiricalMeasure], float],
    t: float,
    m: EmpiricalMeasure,
    problem: Problem,
    cfg: ResidualConfig = ResidualConfig(),
) -> dict:
    """Stationarity report for a candidate value function at (t, m).

    interior_term: the smallest -(generator(u) + running reward) over the
    sampled stops m' of m that keep u(t, m') within membership_tol of
    u(t, m) (m itself is always a member, through the identity stop map).
    d_I_min: the smallest stop sensitivity over the survivor support, also
    minimized over position-jittered copies of m as a stand-in for the
    lower envelope (the sensitivity need not be continuous in m, so the
    jitter is a heuristic without an error bound).
    residual: min(interior_term, d_I_min). For a value function both terms
    should vanish to within probe tolerance.

    When m has no survivors, d_I is undefined; the report says so and the
    residual is the interior term alone.
    """
    base = float(u(t, m))
    if not math.isfinite(base):
        raise ValueError("functional is non-finite at the base measure")
    rng = rng_for(cfg.seed, "residual")

    maps = [StopMap.constant(1.0), StopMap.constant(0.0)]
    maps += [_random_stop_map(rng) for _ in range(cfg.n_stop_maps)]

    seen = set()
    candidates = []
    for sm in maps:
        m2 = apply_stop(m, sm)
        key = _measure_key(m2)
        if key in seen:
            continue
        seen.add(key)
        candidates.append(m2)

    kept = [m2 for m2 in candidates if float(u(t, m2)) >= base - cfg.membership_tol]

    def interior_at(m2) -> float:
        flow = generator(u, t, m2, problem, cfg.bumps) + running_reward(problem, t, m2)
        return -flow

    interiors = parallel_map(interior_at, kept, cfg.threads)
    interior_term = float(min(interiors))

    xs_live, _ = m.survivors()
    if xs_live.shape[0] == 0:
        return {
            "value": base,
            "interior_term": interior_term,
            "d_I_min": None,
            "residual": interior_term,
            "n_candidates": len(candidates),
            "n_kept": len(kept),
            "empty_survivors": True,
        }

    def d_i_min_at(meas) -> float:
        est = estimate_derivatives(u, t, meas, cfg.bumps, horizon=problem.horizon)
        return float(est.d_I.min())

    probes = [m]
    for _ in range(cfg.jitter_samples):
        shift = cfg.jitter * (1.0 + np.abs(m.xs)) * rng.standard_normal(m.xs.shape)
        probes.append(from_arrays(m.xs + shift, m.flags, m.ws))
    d_i_vals = parallel_map(d_i_min_at, probes, cfg.threads)
    d_i_min = float(min(d_i_vals))

    return {
        "value": base,
        "interior_term": interior_term,
        "d_I_min": d_i_min,
        "residual": min(interior_term, d_i_min),
        "n_candidates": len(candidates),
        "n_kept": len(kept),
        "empty_survivors": False,
    }
