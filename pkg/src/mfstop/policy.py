"""Relaxed stopping policies on a time grid and their Monte Carlo evaluation.

A `Policy` attaches one survival map p_k to every decision node t_k,
k = 0..n-1. Evaluation runs stop-then-diffuse: at each node the map splits
surviving weight into a continuing part and a frozen part, the post-stop
snapshot feeds the running reward and (when needed) the coefficients, then
one Euler step advances the survivors. At the horizon everything is stopped
by fiat; the terminal reward reads the spatial marginal, which that forced
stop does not alter.

Fractional stopping never duplicates live particles: the stopped fraction is
appended to a frozen pool (it can never move again) and the live particle
continues with reduced weight. Pure {0,1} policies therefore reduce to flag
flips with the initial weights, and the all-survive policy reproduces the
unstopped simulation path for path under the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as crng
from .dynamics import Problem, TimeGrid, advance_positions
from .measures import EmpiricalMeasure, StopMap, apply_stop, from_arrays
from .util import rng_for

__all__ = [
    "Policy",
    "ValueEstimate",
    "evaluate_policy",
    "terminal_stop_sup",
    "unstopped_value",
    "policy_to_json",
    "policy_from_json",
]

BOOTSTRAP_RESAMPLES = 200


@dataclass(frozen=True)
class ValueEstimate:
    """A sampled value with its bootstrap standard error."""

    value: float
    mc_stderr: float
    n_paths: int

    def __post_init__(self):
        if self.mc_stderr < 0:
            raise ValueError("stderr must be nonnegative")


@dataclass(frozen=True)
class Policy:
    """Per-node survival maps plus a family tag for serialization."""

    maps: tuple
    family: str = "mixed"

    def __post_init__(self):
        if len(self.maps) == 0:
            raise ValueError("policy needs at least one node")

    @property
    def n_nodes(self) -> int:
        return len(self.maps)

    # -- common constructions ------------------------------------------------

    @staticmethod
    def never_stop(n: int) -> "Policy":
        return Policy(tuple(StopMap.constant(1.0) for _ in range(n)), "constant")

    @staticmethod
    def stop_now(n: int) -> "Policy":
        maps = [StopMap.constant(0.0)] + [StopMap.constant(1.0)] * (n - 1)
        return Policy(tuple(maps), "constant")

    @staticmethod
    def constant(fractions: Sequence[float]) -> "Policy":
        return Policy(tuple(StopMap.constant(c) for c in fractions), "constant")

    @staticmethod
    def threshold(thetas: Sequence[float], side: str = "below") -> "Policy":
        return Policy(tuple(StopMap.threshold(t, side) for t in thetas), "threshold")

    def replace_node(self, k: int, new_map: StopMap) -> "Policy":
        maps = list(self.maps)
        maps[k] = new_map
        return Policy(tuple(maps), self.family)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class _SimState:
    """Mutable simulation state for one policy evaluation."""

    def __init__(self, m0: EmpiricalMeasure, paths_per_atom: int):
        n_atoms = m0.n_atoms
        self.atom_of = np.repeat(np.arange(n_atoms), paths_per_atom)
        self.ids = np.arange(n_atoms * paths_per_atom, dtype=np.uint64)
        self.x = m0.xs[self.atom_of].copy()
        self.alive = (m0.flags[self.atom_of] == 1).copy()
        self.w = (m0.ws[self.atom_of] / paths_per_atom).copy()
        self.fsum = np.zeros(len(self.ids))  # running-reward contribution per particle
        self.pool_x: list = []
        self.pool_w: list = []
        self.pool_src: list = []  # particle index that shed the mass
        self.survivor_mass_trace: list = []

    def snapshot(self) -> EmpiricalMeasure:
        xs = [self.x]
        flags = [self.alive.astype(np.uint8)]
        ws = [self.w]
        if self.pool_w:
            px = np.vstack(self.pool_x)
            xs.append(px)
            flags.append(np.zeros(px.shape[0], dtype=np.uint8))
            ws.append(np.concatenate(self.pool_w))
        return from_arrays(np.vstack(xs), np.concatenate(flags), np.concatenate(ws))

    def pool_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.pool_w:
            return np.zeros((0, self.x.shape[1])), np.zeros(0), np.zeros(0, dtype=int)
        return (
            np.vstack(self.pool_x),
            np.concatenate(self.pool_w),
            np.concatenate(self.pool_src),
        )

    def apply_node_stop(self, stop: StopMap) -> None:
        if not self.alive.any():
            return
        idx = np.nonzero(self.alive)[0]
        p = stop(self.x[idx])
        full = p == 0.0
        frac = (p > 0.0) & (p < 1.0)
        if frac.any():
            sub = idx[frac]
            shed = self.w[sub] * (1.0 - p[frac])
            self.pool_x.append(self.x[sub].copy())
            self.pool_w.append(shed)
            self.pool_src.append(sub)
            self.w[sub] = self.w[sub] * p[frac]
        if full.any():
            self.alive[idx[full]] = False


def _run_policy(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    maps: Sequence[StopMap],
    paths_per_atom: int,
    seed: int,
    start_node: int = 0,
    end_node: Optional[int] = None,
) -> _SimState:
    """Simulate nodes start_node..end_node with the given survival maps.

    `end_node` defaults to the full horizon; a smaller value stops the run at
    that node, leaving the state at t_end before any node-end_node stopping.
    """
    if abs(grid.horizon - problem.horizon) > 1e-12:
        raise ValueError("grid horizon differs from problem horizon")
    if len(maps) != grid.n:
        raise ValueError("policy must supply one map per decision node")
    if end_node is None:
        end_node = grid.n
    state = _SimState(m0, paths_per_atom)
    nodes = grid.nodes
    dt = grid.dt
    for k in range(start_node, end_node):
        state.apply_node_stop(maps[k])
        state.survivor_mass_trace.append(float(state.w[state.alive].sum()))
        m_k = state.snapshot() if problem.needs_snapshots() else None
        if problem.f is not None and state.alive.any():
            idx = np.nonzero(state.alive)[0]
            fv = np.asarray(problem.f(nodes[k], state.x[idx], m_k), dtype=float)
            fv = np.broadcast_to(fv, (idx.shape[0],))
            if not np.all(np.isfinite(fv)):
                raise ValueError("non-finite running reward")
            state.fsum[idx] += fv * state.w[idx] * dt
        noise = crng.normals(seed, state.ids, k, problem.d)
        state.x = advance_positions(
            state.x, state.alive, nodes[k], dt, problem, m_k, noise
        )
    return state


def _terminal_value_and_stderr(
    state: _SimState,
    problem: Problem,
    m0: EmpiricalMeasure,
    paths_per_atom: int,
    seed: int,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> tuple[float, float]:
    """Objective on the realized paths plus a stratified bootstrap stderr."""
    px, pw, psrc = state.pool_arrays()
    points = np.vstack([state.x, px])
    weights = np.concatenate([state.w, pw])
    value = float(state.fsum.sum() + problem.g(points, weights))
    if not np.isfinite(value):
        raise ValueError("non-finite terminal reward")
    if paths_per_atom < 2 or resamples == 0:
        return value, 0.0

    n_atoms = m0.n_atoms
    rng = rng_for(seed, "bootstrap")
    vals = np.empty(resamples)
    r = paths_per_atom
    offsets = (np.arange(n_atoms) * r)[:, None]
    n_total = len(state.ids)
    for bi in range(resamples):
        picks = rng.integers(0, r, size=(n_atoms, r)) + offsets
        mult = np.bincount(picks.ravel(), minlength=n_total).astype(float)
        w_res = np.concatenate([state.w * mult, pw * mult[psrc] if len(pw) else pw])
        vals[bi] = (state.fsum * mult).sum() + problem.g(points, w_res)
    return value, float(vals.std(ddof=1))


def evaluate_policy(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    pol: Policy,
    paths_per_atom: int,
    seed: int,
    start_node: int = 0,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> ValueEstimate:
    """Estimate the objective of one policy.

    Returns sum_k F(t_k, m_{t_k}) dt + g(terminal marginal) with F the
    survivor-weighted running reward at the post-stop snapshots, and a
    stratified (per source atom) bootstrap standard error.
    """
    state = _run_policy(m0, problem, grid, pol.maps, paths_per_atom, seed, start_node)
    value, stderr = _terminal_value_and_stderr(
        state, problem, m0, paths_per_atom, seed, resamples
    )
    return ValueEstimate(value=value, mc_stderr=stderr, n_paths=len(state.ids))


def evaluate_policy_detailed(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    pol: Policy,
    paths_per_atom: int,
    seed: int,
    start_node: int = 0,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> tuple[ValueEstimate, dict]:
    """evaluate_policy plus search diagnostics (survivor-mass trace)."""
    state = _run_policy(m0, problem, grid, pol.maps, paths_per_atom, seed, start_node)
    value, stderr = _terminal_value_and_stderr(
        state, problem, m0, paths_per_atom, seed, resamples
    )
    est = ValueEstimate(value=value, mc_stderr=stderr, n_paths=len(state.ids))
    diag = {
        "survivor_mass_mean": float(np.mean(state.survivor_mass_trace)),
        "terminal_snapshot": state.snapshot(),
        "n_pool_atoms": sum(len(w) for w in state.pool_w),
    }
    return est, diag


def unstopped_value(
    m: EmpiricalMeasure,
    problem: Problem,
    t_start: float,
    n_steps: int,
    paths_per_atom: int,
    seed: int,
) -> float:
    """The no-stopping objective started at time t_start from law m.

    Simulates the surviving atoms over [t_start, T] on a fresh uniform grid
    (noise keyed by local step index, so time bumps of t_start reuse the same
    increments) and returns the running-reward integral plus the terminal
    reward. Used by the derivative probes, which need the value as a smooth
    function of (t_start, m).
    """
    T = problem.horizon
    if t_start >= T:
        xs, ws = m.x_marginal()
        return float(problem.g(xs, ws))
    dt = (T - t_start) / n_steps
    n_atoms = m.n_atoms
    atom_of = np.repeat(np.arange(n_atoms), paths_per_atom)
    ids = np.arange(n_atoms * paths_per_atom, dtype=np.uint64)
    x = m.xs[atom_of].copy()
    alive = m.flags[atom_of] == 1
    w = m.ws[atom_of] / paths_per_atom
    total = 0.0
    for k in range(n_steps):
        t = t_start + k * dt
        m_k = (
            from_arrays(x, alive.astype(np.uint8), w)
            if problem.needs_snapshots()
            else None
        )
        if problem.f is not None and alive.any():
            fv = np.asarray(problem.f(t, x[alive], m_k), dtype=float)
            total += float((np.broadcast_to(fv, (alive.sum(),)) * w[alive]).sum()) * dt
        noise = crng.normals(seed, ids, k, problem.d)
        x = advance_positions(x, alive, t, dt, problem, m_k, noise)
    return total + float(problem.g(x, w))


# ---------------------------------------------------------------------------
# terminal stop optimization
# ---------------------------------------------------------------------------


def _stop_map_for_sites(sites: np.ndarray, p: np.ndarray) -> StopMap:
    return StopMap.site_lookup(sites, p, default=1.0)


def _coordinate_refine(
    m: EmpiricalMeasure,
    functional: Callable[[EmpiricalMeasure], float],
    sites: np.ndarray,
    p0: np.ndarray,
    rounds: int = 2,
    grid_points: int = 33,
) -> tuple[float, np.ndarray]:
    """Per-site line searches of the survival fractions, a few sweeps."""
    p = p0.astype(float).copy()
    best = functional(apply_stop(m, _stop_map_for_sites(sites, p)))
    candidates = np.linspace(0.0, 1.0, grid_points)
    for _ in range(rounds):
        improved = False
        for j in range(len(p)):
            trial = p.copy()
            vals = []
            for c in candidates:
                trial[j] = c
                vals.append(functional(apply_stop(m, _stop_map_for_sites(sites, trial))))
            jbest = int(np.argmax(vals))
            if vals[jbest] > best + 1e-15:
                best = vals[jbest]
                p[j] = candidates[jbest]
                improved = True
        if not improved:
            break
    return best, p


def terminal_stop_sup(
    m: EmpiricalMeasure,
    functional: Callable[[EmpiricalMeasure], float],
    mode: str = "exact",
    max_exact: int = 16,
    seed: int = 0,
) -> tuple[float, StopMap]:
    """Maximize functional(apply_stop(m, p)) over survival maps p.

    mode='exact' enumerates every pure {0,1} assignment over the surviving
    sites (at most `max_exact` of them) and then polishes the best corner
    with fractional per-site line searches; mode='search' replaces the
    enumeration with family sweeps (constant fractions, thresholds) before
    the same polish. Returns (best value, best map).

    For a functional that only reads the spatial marginal this is flat in p
    and returns the functional's current value with the identity map.
    """
    xs_live, _ = m.survivors()
    k = xs_live.shape[0]
    if k == 0:
        return float(functional(m)), StopMap.constant(1.0)

    sites = xs_live
    if mode == "exact":
        if k > max_exact:
            raise ValueError(f"exact mode supports at most {max_exact} survivors, got {k}")
        best_val = -np.inf
        best_p = np.ones(k)
        for mask in range(1 << k):
            p = np.array([(mask >> j) & 1 for j in range(k)], dtype=float)
            val = functional(apply_stop(m, _stop_map_for_sites(sites, p)))
            if val > best_val + 1e-15 or (
                abs(val - best_val) <= 1e-15 and p.sum() > best_p.sum()
            ):
                best_val, best_p = val, p
    elif mode == "search":
        rng = rng_for(seed, "terminal-search")
        candidates = [np.ones(k), np.zeros(k)]
        for c in np.linspace(0.0, 1.0, 9):
            candidates.append(np.full(k, c))
        order = np.argsort(sites[:, 0])
        for cut in range(k + 1):
            p = np.ones(k)
            p[order[:cut]] = 0.0  # stop the lowest `cut` sites
            candidates.append(p)
            candidates.append(1.0 - p)
        for _ in range(16):
            candidates.append(rng.uniform(0, 1, size=k))
        vals = [
            functional(apply_stop(m, _stop_map_for_sites(sites, p))) for p in candidates
        ]
        jbest = int(np.argmax(vals))
        best_val, best_p = vals[jbest], candidates[jbest]
    else:
        raise ValueError("mode must be 'exact' or 'search'")

    best_val, best_p = _coordinate_refine(m, functional, sites, best_p)
    return float(best_val), _stop_map_for_sites(sites, best_p)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_SERIALIZABLE = {"constant", "threshold", "logistic", "tabular", "site_lookup"}


def policy_to_json(pol: Policy) -> str:
    nodes = []
    for sm in pol.maps:
        if sm.family not in _SERIALIZABLE:
            raise ValueError(f"stop map family {sm.family!r} is not serializable")
        nodes.append({"family": sm.family, "params": sm.params})
    return json.dumps({"family": pol.family, "nodes": nodes}, sort_keys=True)


def _stop_map_from_dict(d: dict) -> StopMap:
    family, params = d["family"], d["params"]
    if family == "constant":
        return StopMap.constant(params["c"])
    if family == "threshold":
        return StopMap.threshold(params["theta"], params["side"])
    if family == "logistic":
        return StopMap.logistic(np.asarray(params["a"]), params["c"])
    if family == "tabular":
        return StopMap.tabular(params["edges"], params["values"])
    if family == "site_lookup":
        return StopMap.site_lookup(
            np.asarray(params["sites"]), np.asarray(params["values"]), params["default"]
        )
    raise ValueError(f"unknown stop map family {family!r}")


def policy_from_json(text: str) -> Policy:
    payload = json.loads(text)
    maps = tuple(_stop_map_from_dict(d) for d in payload["nodes"])
    return Policy(maps, payload["family"])
