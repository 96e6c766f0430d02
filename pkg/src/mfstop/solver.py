"""Value computation by forward policy search, with exact small-case oracles.

`solve_value` maximizes the stopped objective over parametric policy
families: a coarse sweep with one shared parameter across nodes, then
per-node coordinate descent with shrinking brackets. All candidate
evaluations share one seed, so the noise is common across policies and
comparisons are far less noisy than the individual values.

The state of the dynamic program is a measure, so no backward recursion over
a finite state space is available in general. For deterministic dynamics
(sigma identically zero) with few atoms, `backward_enumeration` evaluates
every per-atom stop-time assignment exactly; `solve_value` folds that
enumeration in automatically when it is affordable, and the same routine
serves as the brute-force oracle in tests.

`verify_dpp` checks the two-stage decomposition: solve on [0,T], replay the
optimal prefix to the split node, re-solve from the realized snapshot, and
compare. `monotonicity_check` samples random stop maps p and checks that
stopping first never helps: V(m) >= V(apply_stop(m, p)) up to noise.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dynamics import Problem, TimeGrid
from .measures import EmpiricalMeasure, StopMap, apply_stop, from_arrays
from .policy import (
    Policy,
    ValueEstimate,
    _run_policy,
    _terminal_value_and_stderr,
    evaluate_policy,
)
from .util import parallel_map, rng_for

__all__ = [
    "SearchConfig",
    "SolveResult",
    "solve_value",
    "backward_enumeration",
    "verify_dpp",
    "DppReport",
    "monotonicity_check",
    "MonotonicityReport",
]


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the policy search.

    families : which parametric families the coarse sweep covers.
    tol : absolute improvement below which a refinement round stops.
    enum_budget : cap on assignments for the deterministic enumeration;
        zero disables it.
    """

    families: tuple = ("threshold", "constant")
    paths_per_atom: int = 200
    coarse_points: int = 9
    refine_rounds: int = 3
    tol: float = 1e-3
    resamples: int = 200
    enum_budget: int = 6561
    restart_paths: int = 8
    threads: int = 1


@dataclass(frozen=True)
class SolveResult:
    """Search outcome; iterable as (estimate, policy)."""

    estimate: ValueEstimate
    policy: Policy
    converged: bool
    n_evaluations: int

    def __iter__(self):
        return iter((self.estimate, self.policy))


# ---------------------------------------------------------------------------
# forward search
# ---------------------------------------------------------------------------


class _Searcher:
    """Caches policy evaluations (no bootstrap) under one shared seed."""

    def __init__(self, m0, problem, grid, cfg, seed, start_node):
        self.m0 = m0
        self.problem = problem
        self.grid = grid
        self.cfg = cfg
        self.seed = seed
        self.start_node = start_node
        self.n_evaluations = 0
        self.seen: dict = {}  # policy key -> (value, survivor_mass_mean)

    def _key(self, pol: Policy):
        parts = []
        for sm in pol.maps[self.start_node :]:
            parts.append((sm.family, tuple(sorted(map(str, sm.params.items())))))
        return tuple(parts)

    def value(self, pol: Policy) -> float:
        key = self._key(pol)
        if key not in self.seen:
            state = _run_policy(
                self.m0,
                self.problem,
                self.grid,
                pol.maps,
                self.cfg.paths_per_atom,
                self.seed,
                self.start_node,
            )
            val, _ = _terminal_value_and_stderr(
                state, self.problem, self.m0, self.cfg.paths_per_atom, self.seed, 0
            )
            self.n_evaluations += 1
            self.seen[key] = (val, float(np.mean(state.survivor_mass_trace)))
        return self.seen[key][0]

    def survivor_mass(self, pol: Policy) -> float:
        self.value(pol)
        return self.seen[self._key(pol)][1]


def _sigma_scale(problem: Problem, m0: EmpiricalMeasure) -> float:
    xs, _ = m0.survivors()
    if xs.shape[0] == 0:
        xs = m0.xs
    sig = np.asarray(problem.sigma(0.0, xs, m0), dtype=float)
    return float(np.median(np.abs(sig))) if sig.size else float(abs(sig))


def _coarse_candidates(problem, m0, grid, cfg, start_node) -> list:
    """Shared-parameter policies: sentinels, constants, threshold sweeps."""
    n = grid.n
    active = range(start_node, n)

    def fill(make_map):
        maps = [StopMap.constant(1.0)] * n
        for k in active:
            maps[k] = make_map(k)
        return maps

    cands = [Policy(tuple(fill(lambda k: StopMap.constant(1.0))), "constant")]
    stop_first = fill(lambda k: StopMap.constant(1.0))
    stop_first[start_node] = StopMap.constant(0.0)
    cands.append(Policy(tuple(stop_first), "constant"))

    if "constant" in cfg.families:
        for c in np.linspace(0.0, 1.0, 5)[1:-1]:
            cands.append(Policy(tuple(fill(lambda k, c=c: StopMap.constant(c))), "constant"))

    if "threshold" in cfg.families and problem.d == 1:
        xs, _ = m0.survivors()
        if xs.shape[0]:
            scale = _sigma_scale(problem, m0) * np.sqrt(problem.horizon)
            scale = scale if scale > 0 else max(1.0, float(np.abs(xs).max()))
            lo = float(xs.min()) - 2.0 * scale
            hi = float(xs.max()) + 2.0 * scale
            for theta in np.linspace(lo, hi, cfg.coarse_points):
                for side in ("below", "above"):
                    cands.append(
                        Policy(
                            tuple(fill(lambda k, t=theta, s=side: StopMap.threshold(t, s))),
                            "threshold",
                        )
                    )
    return cands


def _node_variations(sm: StopMap, step: float) -> list:
    """Local moves of one node's map, plus the two pure extremes."""
    out = [StopMap.constant(0.0), StopMap.constant(1.0)]
    if sm.family == "threshold":
        theta, side = sm.params["theta"], sm.params["side"]
        for dd in (-step, -step / 3, step / 3, step):
            out.append(StopMap.threshold(theta + dd, side))
    elif sm.family == "constant":
        c = sm.params["c"]
        for dd in (-step, -step / 3, step / 3, step):
            cc = min(1.0, max(0.0, c + dd))
            out.append(StopMap.constant(cc))
    return out


def _initial_step(problem, m0, pol: Policy) -> float:
    if pol.family == "threshold":
        scale = _sigma_scale(problem, m0) * np.sqrt(problem.horizon)
        return max(scale, 1e-3)
    return 0.25


def solve_value(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    search_cfg: Optional[SearchConfig] = None,
    seed: int = 0,
    start_node: int = 0,
) -> SolveResult:
    """Best objective over the configured policy families.

    The returned value is a sampled lower bound on the grid-time value (up
    to MC error): it is the max the search saw, and every evaluated policy's
    value is a true objective. Near-optimal ties go to the policy that stops
    least (largest average survivor mass). A final pass re-evaluates the
    winner with bootstrap resamples to attach the standard error.
    """
    cfg = search_cfg or SearchConfig()
    searcher = _Searcher(m0, problem, grid, cfg, seed, start_node)

    candidates = _coarse_candidates(problem, m0, grid, cfg, start_node)
    enum_policy = _enumeration_candidate(m0, problem, grid, cfg, start_node)
    if enum_policy is not None:
        candidates.append(enum_policy)
    if cfg.threads > 1:
        # cache writes are idempotent, so racing duplicates are harmless
        parallel_map(searcher.value, candidates, cfg.threads)
    else:
        for pol in candidates:
            searcher.value(pol)

    best = max(candidates, key=searcher.value)
    step = _initial_step(problem, m0, best)
    converged = False
    for _ in range(cfg.refine_rounds):
        round_start = searcher.value(best)
        for k in range(start_node, grid.n):
            for sm in _node_variations(best.maps[k], step):
                trial = best.replace_node(k, sm)
                if searcher.value(trial) > searcher.value(best) + 1e-15:
                    best = trial
        step /= 3.0
        if searcher.value(best) - round_start < cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            "policy search budget exhausted before the improvement fell "
            f"below tol={cfg.tol}; returning the best value seen",
            RuntimeWarning,
            stacklevel=2,
        )

    # near-optimal tie-break: stop as little as possible
    best_val = searcher.value(best)
    tied = [
        pol
        for pol in candidates + [best]
        if searcher.value(pol) >= best_val - cfg.tol
    ]
    best = max(tied, key=searcher.survivor_mass)

    est = evaluate_policy(
        m0,
        problem,
        grid,
        best,
        cfg.paths_per_atom,
        seed,
        start_node=start_node,
        resamples=cfg.resamples,
    )
    return SolveResult(
        estimate=est,
        policy=best,
        converged=converged,
        n_evaluations=searcher.n_evaluations,
    )


# ---------------------------------------------------------------------------
# deterministic enumeration oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnumerationResult:
    value: float
    stop_nodes: tuple  # per surviving atom: node index, or None for never
    node_positions: tuple  # per node k: (n_live, d) positions entering node k


def _require_deterministic(problem: Problem, m0: EmpiricalMeasure) -> None:
    xs, _ = m0.survivors()
    probe = xs if xs.shape[0] else m0.xs
    sig = np.asarray(problem.sigma(0.0, probe, m0), dtype=float)
    if np.any(np.abs(sig) > 1e-12):
        raise ValueError("enumeration requires deterministic dynamics (sigma == 0)")


def backward_enumeration(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    start_node: int = 0,
    enum_budget: int = 6561,
) -> EnumerationResult:
    """Exact value for sigma == 0 by trying every per-atom stop assignment.

    Each surviving atom is assigned a stop node in {start_node..n-1} or
    'never'; the deterministic flow is replayed for every assignment (the
    coefficients may read the measure, so atoms are coupled and no
    factorization is attempted). Intended for tiny instances; raises when
    the assignment count exceeds `enum_budget`.
    """
    _require_deterministic(problem, m0)
    xs0, ws_live = m0.survivors()
    xstop, wstop = m0.stopped()
    k = xs0.shape[0]
    n = grid.n
    choices = (n - start_node) + 1
    if choices**k > enum_budget:
        raise ValueError(
            f"enumeration over {choices}^{k} assignments exceeds the budget {enum_budget}"
        )
    dt = grid.dt
    nodes = grid.nodes

    best: Optional[EnumerationResult] = None
    for raw in itertools.product(range(choices), repeat=k):
        stop_at = [start_node + a if a < choices - 1 else None for a in raw]
        x = xs0.copy()
        alive = np.ones(k, dtype=bool)
        reward = 0.0
        positions = []
        for j in range(start_node, n):
            positions.append(x.copy())
            newly = np.array([stop_at[i] == j for i in range(k)], dtype=bool)
            alive = alive & ~newly
            snap = None
            if problem.needs_snapshots():
                snap = from_arrays(
                    np.vstack([x, xstop]) if xstop.size else x,
                    np.concatenate([alive.astype(np.uint8), np.zeros(len(wstop), dtype=np.uint8)]),
                    np.concatenate([ws_live, wstop]),
                )
            if problem.f is not None and alive.any():
                fv = np.asarray(problem.f(nodes[j], x[alive], snap), dtype=float)
                reward += dt * float(np.broadcast_to(fv, (alive.sum(),)) @ ws_live[alive])
            bstep = np.broadcast_to(
                np.asarray(problem.b(nodes[j], x, snap), dtype=float), x.shape
            )
            x = x + bstep * dt * alive[:, None]
        pts = np.vstack([x, xstop]) if xstop.size else x
        wts = np.concatenate([ws_live, wstop])
        total = reward + float(problem.g(pts, wts))
        if best is None or total > best.value + 1e-15 or (
            abs(total - best.value) <= 1e-15
            and sum(s is None for s in stop_at) > sum(s is None for s in best.stop_nodes)
        ):
            best = EnumerationResult(total, tuple(stop_at), tuple(positions))
    assert best is not None
    return best


def _enumeration_candidate(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    cfg: SearchConfig,
    start_node: int,
) -> Optional[Policy]:
    """Exact-enumeration policy when the instance is tiny and deterministic."""
    if cfg.enum_budget <= 0:
        return None
    try:
        result = backward_enumeration(m0, problem, grid, start_node, cfg.enum_budget)
    except ValueError:
        return None
    return _assignment_to_policy(result, grid, start_node)


def _assignment_to_policy(
    result: EnumerationResult, grid: TimeGrid, start_node: int
) -> Optional[Policy]:
    """Express per-atom stop nodes as position-keyed maps, if separable."""
    maps = [StopMap.constant(1.0)] * grid.n
    for j in range(start_node, grid.n):
        x_here = result.node_positions[j - start_node]
        values = np.array(
            [0.0 if s == j else 1.0 for s in result.stop_nodes], dtype=float
        )
        # two atoms at one site with opposite decisions cannot be expressed
        for a in range(len(values)):
            for b in range(a + 1, len(values)):
                if np.all(np.abs(x_here[a] - x_here[b]) <= 1e-9) and values[a] != values[b]:
                    return None
        if np.any(values == 0.0):
            maps[j] = StopMap.site_lookup(x_here, values, default=1.0)
    return Policy(tuple(maps), "site_lookup")


# ---------------------------------------------------------------------------
# dynamic programming check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DppReport:
    lhs: float
    rhs: float
    residual: float
    combined_stderr: float
    split_index: int
    mode: str

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "residual": self.residual,
            "combined_stderr": self.combined_stderr,
            "split_index": self.split_index,
            "mode": self.mode,
        }


def _prefix_run(m0, problem, grid, pol, paths, seed, s):
    """Replay a policy to node s; returns (reward, reward stderr, snapshot)."""
    state = _run_policy(m0, problem, grid, pol.maps, paths, seed, 0, end_node=s)
    reward = float(state.fsum.sum())
    se = 0.0
    if problem.f is not None and paths >= 2:
        rng = rng_for(seed, "prefix-bootstrap")
        n_atoms = m0.n_atoms
        offsets = (np.arange(n_atoms) * paths)[:, None]
        vals = np.empty(100)
        for bi in range(vals.shape[0]):
            picks = rng.integers(0, paths, size=(n_atoms, paths)) + offsets
            mult = np.bincount(picks.ravel(), minlength=len(state.ids)).astype(float)
            vals[bi] = float(state.fsum @ mult)
        se = float(vals.std(ddof=1))
    return reward, se, state.snapshot()


def verify_dpp(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    split_index: int,
    solver_cfg: Optional[SearchConfig] = None,
    seed: int = 0,
    mode: str = "search",
) -> DppReport:
    """Two-stage consistency of the value: solve-whole vs solve-then-restart.

    LHS is the value on the full horizon. RHS replays the optimal policy's
    prefix to the split node (pre-stop snapshot), adds the prefix running
    reward, and re-solves from the realized measure. The optimal prefix
    attains the sup over first-segment policies, because any better prefix
    followed by its best continuation would beat the LHS optimum.

    mode='exact' does both sides by deterministic enumeration (sigma == 0
    instances) and reports a machine-precision residual; mode='search' uses
    the Monte Carlo solver and reports a combined stderr.
    """
    cfg = solver_cfg or SearchConfig()
    s = split_index
    if not 0 < s <= grid.n:
        raise ValueError("split index must satisfy 0 < s <= n")

    if mode == "exact":
        return _verify_dpp_exact(m0, problem, grid, s, cfg)
    if mode != "search":
        raise ValueError("mode must be 'search' or 'exact'")

    full = solve_value(m0, problem, grid, cfg, seed)
    prefix_reward, prefix_se, snapshot = _prefix_run(
        m0, problem, grid, full.policy, cfg.paths_per_atom, seed, s
    )

    if s == grid.n:
        # terminal layer: the restart value is the terminal-stop sup, which
        # is flat for marginal rewards, so no simulation is involved
        pts, wts = snapshot.x_marginal()
        restart_value, restart_se = float(problem.g(pts, wts)), 0.0
    else:
        restart_cfg = replace(cfg, paths_per_atom=cfg.restart_paths)
        restart = solve_value(
            snapshot,
            problem,
            grid,
            restart_cfg,
            seed=int(rng_for(seed, "dpp-restart").integers(0, 2**31)),
            start_node=s,
        )
        restart_value = restart.estimate.value
        restart_se = restart.estimate.mc_stderr

    rhs = prefix_reward + restart_value
    combined = float(
        np.sqrt(full.estimate.mc_stderr**2 + prefix_se**2 + restart_se**2)
    )
    return DppReport(
        lhs=full.estimate.value,
        rhs=rhs,
        residual=abs(full.estimate.value - rhs),
        combined_stderr=combined,
        split_index=s,
        mode=mode,
    )


def _verify_dpp_exact(m0, problem, grid, s, cfg) -> DppReport:
    """Enumerated two-sided check for deterministic dynamics."""
    lhs = backward_enumeration(m0, problem, grid, 0, cfg.enum_budget).value

    xs0, ws_live = m0.survivors()
    xstop, wstop = m0.stopped()
    k = xs0.shape[0]
    dt = grid.dt
    nodes = grid.nodes
    best_rhs = -np.inf
    # prefix assignment: stop at one of nodes 0..s-1, or still running at s
    for raw in itertools.product(range(s + 1), repeat=k):
        stop_at = [a if a < s else None for a in raw]
        x = xs0.copy()
        alive = np.ones(k, dtype=bool)
        reward = 0.0
        for j in range(s):
            newly = np.array([stop_at[i] == j for i in range(k)], dtype=bool)
            alive = alive & ~newly
            snap = None
            if problem.needs_snapshots():
                snap = from_arrays(
                    np.vstack([x, xstop]) if xstop.size else x,
                    np.concatenate(
                        [alive.astype(np.uint8), np.zeros(len(wstop), dtype=np.uint8)]
                    ),
                    np.concatenate([ws_live, wstop]),
                )
            if problem.f is not None and alive.any():
                fv = np.asarray(problem.f(nodes[j], x[alive], snap), dtype=float)
                reward += dt * float(np.broadcast_to(fv, (alive.sum(),)) @ ws_live[alive])
            bstep = np.broadcast_to(
                np.asarray(problem.b(nodes[j], x, snap), dtype=float), x.shape
            )
            x = x + bstep * dt * alive[:, None]
        all_x = np.vstack([x, xstop]) if xstop.size else x
        all_flags = np.concatenate(
            [alive.astype(np.uint8), np.zeros(len(wstop), dtype=np.uint8)]
        )
        all_w = np.concatenate([ws_live, wstop])
        snapshot = from_arrays(all_x, all_flags, all_w)
        if s == grid.n:
            pts, wts = snapshot.x_marginal()
            cont = float(problem.g(pts, wts))
        else:
            cont = backward_enumeration(snapshot, problem, grid, s, cfg.enum_budget).value
        best_rhs = max(best_rhs, reward + cont)

    return DppReport(
        lhs=lhs,
        rhs=best_rhs,
        residual=abs(lhs - best_rhs),
        combined_stderr=0.0,
        split_index=s,
        mode="exact",
    )


# ---------------------------------------------------------------------------
# stopping-order monotonicity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotonicityReport:
    n_trials: int
    n_violations: int
    worst_gap: float  # most negative of V(m) - V(m') + 3 se; >= 0 means clean
    details: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "n_violations": self.n_violations,
            "worst_gap": self.worst_gap,
            "details": list(self.details),
        }


def _random_stop_map(rng) -> StopMap:
    kind = rng.integers(0, 3)
    if kind == 0:
        return StopMap.constant(float(rng.uniform(0.0, 1.0)))
    if kind == 1:
        side = "below" if rng.uniform() < 0.5 else "above"
        return StopMap.threshold(float(rng.normal(0.0, 1.0)), side)
    return StopMap.logistic(float(rng.normal(0.0, 2.0)), float(rng.normal(0.0, 1.0)))


def monotonicity_check(
    m: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    trials: int,
    seed: int = 0,
    solver_cfg: Optional[SearchConfig] = None,
) -> MonotonicityReport:
    """Stopping first never raises the value: V(m) >= V(apply_stop(m, p)).

    Samples `trials` random stop maps p and solves both sides with a shared
    seed; a violation is V(m') exceeding V(m) by more than three combined
    standard errors plus an ulp-scale floor. The floor matters only in the
    degenerate regime where both optima are deterministic policies (zero
    bootstrap error): the two values are then reductions of the same terms
    in different orders, and summation rounding must not count as a
    violation of the ordering.
    """
    cfg = solver_cfg or SearchConfig()
    base = solve_value(m, problem, grid, cfg, seed)
    rng = rng_for(seed, "monotonicity")
    details = []
    n_viol = 0
    worst = np.inf
    rounding = 1e-12 * (1.0 + abs(base.estimate.value))
    for trial in range(trials):
        p = _random_stop_map(rng)
        m_prime = apply_stop(m, p)
        other = solve_value(m_prime, problem, grid, cfg, seed)
        combined = float(
            np.sqrt(base.estimate.mc_stderr**2 + other.estimate.mc_stderr**2)
        )
        gap = base.estimate.value - other.estimate.value + 3.0 * combined
        worst = min(worst, gap)
        violated = gap < -rounding
        n_viol += int(violated)
        details.append(
            {
                "trial": trial,
                "family": p.family,
                "v_base": base.estimate.value,
                "v_stopped": other.estimate.value,
                "combined_stderr": combined,
                "violated": violated,
            }
        )
    return MonotonicityReport(
        n_trials=trials,
        n_violations=n_viol,
        worst_gap=float(worst) if trials else 0.0,
        details=tuple(details),
    )
