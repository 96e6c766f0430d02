"""Euler-Maruyama simulation of stopped mean-field particle dynamics.

A `Problem` bundles the coefficients (b, sigma, f, g) and the horizon. The
drift and volatility may read the current particle law; the simulation then
feeds them the empirical snapshot of the whole system, lagged to the left
endpoint of each step (weak order-1 mean-field scheme).

Survival freezing: a particle whose flag is 0 never moves again. The flag
factor multiplies both the drift and the noise, which is the discrete copy of
stopped dynamics where integrands carry the survival indicator.

Noise comes from `rng.normals(seed, particle_ids, step, d)`, so a simulation
is a deterministic function of its seed regardless of batching or thread
count, and two simulations sharing a seed see identical increments wherever
their particle ids coincide.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as crng
from .measures import EmpiricalMeasure, from_arrays

__all__ = [
    "Problem",
    "TimeGrid",
    "PathBundle",
    "euler_step",
    "simulate_unstopped",
    "save_bundle",
    "load_bundle",
]


@dataclass(frozen=True)
class Problem:
    """Coefficient bundle for one stopping problem.

    Parameters
    ----------
    d : spatial dimension.
    b : drift, (t, x, m) -> array broadcastable to (N, d). `x` is the (N, d)
        block of surviving positions; `m` is the empirical snapshot or None
        when `b_uses_measure` is False.
    sigma : volatility, (t, x, m) -> scalar, (N,), (N, d) diagonal, or
        (N, d, d) full matrix. Must be nonnegative (componentwise for the
        diagonal forms).
    f : running reward density (t, x, m) -> (N,), or None for zero. Enters
        the objective as the survivor-weighted sum, i.e. integrated against
        m(dx, 1) only.
    g : terminal reward, (points (N, d), weights (N,)) -> float. Reads the
        full spatial marginal; it must not depend on atom order or on how
        mass is split among duplicate atoms.
    horizon : T > 0.
    b_uses_measure, sigma_uses_measure, f_uses_measure : set when the
        coefficient actually reads `m`; when all are False the simulation
        skips building per-step snapshots.
    truncated_horizon : marks a problem built by truncating an infinite
        horizon; simulation warns if the surviving state has not decayed.
    """

    d: int
    b: Callable
    sigma: Callable
    f: Optional[Callable]
    g: Callable[[np.ndarray, np.ndarray], float]
    horizon: float
    b_uses_measure: bool = False
    sigma_uses_measure: bool = False
    f_uses_measure: bool = False
    truncated_horizon: bool = False

    def __post_init__(self):
        if self.d < 1 or self.d > 3:
            raise ValueError("d must be 1, 2 or 3")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def measure_dependent(self) -> bool:
        return self.b_uses_measure or self.sigma_uses_measure

    def needs_snapshots(self) -> bool:
        return self.measure_dependent or self.f_uses_measure


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k T / n, k = 0..n."""

    n: int
    horizon: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid needs at least one step")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n + 1)


class PathBundle:
    """Simulated particle system: per-step positions, flags, live weights.

    Arrays are indexed [step, particle]. `pool` holds mass frozen by
    fractional stopping: pool[k] is either None or a (positions, weights)
    pair created at node k; those atoms never move, so they are stored once.
    Steps up to `k_filled` are complete and must be treated as immutable;
    `euler_step` only ever writes the next slot.
    """

    def __init__(self, grid: TimeGrid, n_particles: int, d: int, seed: int,
                 particle_ids: np.ndarray, atom_of: np.ndarray):
        n = grid.n
        self.grid = grid
        self.seed = int(seed)
        self.d = d
        self.xs = np.zeros((n + 1, n_particles, d))
        self.flags = np.zeros((n + 1, n_particles), dtype=np.uint8)
        self.ws = np.zeros((n + 1, n_particles))
        self.pool: list = [None] * (n + 1)
        self.particle_ids = np.asarray(particle_ids, dtype=np.uint64)
        self.atom_of = np.asarray(atom_of, dtype=np.int64)
        self.k_filled = 0

    @property
    def n_particles(self) -> int:
        return self.xs.shape[1]

    def state_arrays(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw (positions, flags, weights) of step k, pool excluded."""
        return self.xs[k], self.flags[k], self.ws[k]

    def pool_upto(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """All frozen-pool atoms created at nodes <= k."""
        xs = [p[0] for p in self.pool[: k + 1] if p is not None]
        ws = [p[1] for p in self.pool[: k + 1] if p is not None]
        if not xs:
            return np.zeros((0, self.d)), np.zeros(0)
        return np.vstack(xs), np.concatenate(ws)

    def snapshot(self, k: int) -> EmpiricalMeasure:
        """Empirical law at node k (live particles plus frozen pool)."""
        px, pw = self.pool_upto(k)
        xs = np.vstack([self.xs[k], px])
        flags = np.concatenate([self.flags[k], np.zeros(len(pw), dtype=np.uint8)])
        ws = np.concatenate([self.ws[k], pw])
        return from_arrays(xs, flags, ws)

    def marginal_arrays(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Spatial marginal at node k as raw arrays, in particle-then-pool order."""
        px, pw = self.pool_upto(k)
        return np.vstack([self.xs[k], px]), np.concatenate([self.ws[k], pw])

    def total_mass(self, k: int) -> float:
        _, pw = self.pool_upto(k)
        return float(self.ws[k].sum() + pw.sum())


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def _sigma_times_noise(sig, xi: np.ndarray) -> np.ndarray:
    """Apply sigma (scalar / diag / full) to the (N, d) noise block."""
    sig = np.asarray(sig, dtype=float)
    if sig.ndim <= 1:  # scalar or per-particle scalar
        return (sig.T * xi.T).T if sig.ndim == 1 else sig * xi
    if sig.ndim == 2:  # (N, d) diagonal
        return sig * xi
    if sig.ndim == 3:  # (N, d, d) full
        return np.einsum("nij,nj->ni", sig, xi)
    raise ValueError("sigma returned an array of unsupported rank")


def advance_positions(
    x: np.ndarray,
    alive: np.ndarray,
    t: float,
    dt: float,
    problem: Problem,
    m: Optional[EmpiricalMeasure],
    noise: np.ndarray,
) -> np.ndarray:
    """One Euler update x + 1_alive (b dt + sigma sqrt(dt) xi).

    Shared by the unstopped simulator and the policy evaluator so that runs
    with a common seed produce bitwise-identical paths wherever their alive
    sets coincide.
    """
    drift = np.broadcast_to(np.asarray(problem.b(t, x, m), dtype=float), x.shape)
    shock = _sigma_times_noise(problem.sigma(t, x, m), noise)
    incr = drift * dt + shock * np.sqrt(dt)
    if not np.all(np.isfinite(incr)):
        raise ValueError("non-finite coefficient evaluation during Euler step")
    return x + incr * alive[:, None]


def euler_step(bundle: PathBundle, k: int, problem: Problem, noise: np.ndarray) -> PathBundle:
    """Advance the bundle from node k to k+1 with the supplied Gaussians.

    Surviving particles move by b dt + sigma sqrt(dt) xi with coefficients
    frozen at (t_k, m_{t_k}); stopped particles keep (x, i, w) unchanged.
    """
    if k >= bundle.grid.n:
        raise ValueError("stepping past the terminal node")
    if noise.shape != (bundle.n_particles, bundle.d):
        raise ValueError("noise must have shape (n_particles, d)")
    t = bundle.grid.nodes[k]
    m = bundle.snapshot(k) if problem.measure_dependent else None
    x, flags, ws = bundle.state_arrays(k)
    alive = flags == 1
    bundle.xs[k + 1] = advance_positions(x, alive, t, bundle.grid.dt, problem, m, noise)
    bundle.flags[k + 1] = flags
    bundle.ws[k + 1] = ws
    bundle.k_filled = k + 1
    return bundle


def spawn_particles(
    m0: EmpiricalMeasure, grid: TimeGrid, paths_per_atom: int, seed: int
) -> PathBundle:
    """Replicate each atom into paths_per_atom particles of equal weight."""
    if paths_per_atom < 1:
        raise ValueError("paths_per_atom must be >= 1")
    n_atoms = m0.n_atoms
    n_part = n_atoms * paths_per_atom
    atom_of = np.repeat(np.arange(n_atoms), paths_per_atom)
    ids = np.arange(n_part, dtype=np.uint64)
    bundle = PathBundle(grid, n_part, m0.d, seed, ids, atom_of)
    bundle.xs[0] = m0.xs[atom_of]
    bundle.flags[0] = m0.flags[atom_of]
    bundle.ws[0] = m0.ws[atom_of] / paths_per_atom
    return bundle


def simulate_unstopped(
    m0: EmpiricalMeasure,
    problem: Problem,
    grid: TimeGrid,
    paths_per_atom: int,
    seed: int,
) -> PathBundle:
    """Run the dynamics with no stopping before T; flags drop to 0 at T.

    Atoms that start stopped stay frozen throughout. The terminal flag drop
    is the forced stop at the horizon; it changes no position or weight.
    """
    if abs(grid.horizon - problem.horizon) > 1e-12:
        raise ValueError("grid horizon differs from problem horizon")
    bundle = spawn_particles(m0, grid, paths_per_atom, seed)
    for k in range(grid.n):
        noise = crng.normals(seed, bundle.particle_ids, k, problem.d)
        euler_step(bundle, k, problem, noise)
    bundle.flags[grid.n] = 0
    _warn_if_truncation_unconverged(bundle, problem)
    return bundle


def _warn_if_truncation_unconverged(bundle: PathBundle, problem: Problem) -> None:
    if not problem.truncated_horizon:
        return
    x0 = np.abs(bundle.xs[0]).mean()
    xT = np.abs(bundle.xs[-1]).mean()
    if x0 > 0 and xT > 0.05 * x0:
        warnings.warn(
            "truncated infinite horizon: terminal state has only decayed to "
            f"{xT / x0:.1%} of its initial size; consider a larger horizon",
            RuntimeWarning,
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# binary replay dump
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   magic   8 bytes  b"MFSTOPB1"
#   u64     n_particles
#   u64     n_steps (grid.n)
#   u64     d
#   u64     seed
#   f64     horizon
#   f64     xs      (n_steps+1) * n_particles * d
#   u8      flags   (n_steps+1) * n_particles
#   f64     ws      (n_steps+1) * n_particles
#   u64     particle_ids   n_particles
#   i64     atom_of        n_particles
#   then per node k = 0..n_steps: u64 pool count c_k, then c_k * (d+1) f64
#   rows (x..., w)

_MAGIC = b"MFSTOPB1"


def save_bundle(bundle: PathBundle, path: str) -> None:
    """Serialize a bundle for replay; format documented above."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<QQQQd",
                bundle.n_particles,
                bundle.grid.n,
                bundle.d,
                bundle.seed,
                bundle.grid.horizon,
            )
        )
        fh.write(np.ascontiguousarray(bundle.xs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.flags, dtype="u1").tobytes())
        fh.write(np.ascontiguousarray(bundle.ws, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.particle_ids, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(bundle.atom_of, dtype="<i8").tobytes())
        for entry in bundle.pool:
            if entry is None:
                fh.write(struct.pack("<Q", 0))
            else:
                px, pw = entry
                fh.write(struct.pack("<Q", len(pw)))
                rows = np.hstack([px, pw[:, None]])
                fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def load_bundle(path: str) -> PathBundle:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a path-bundle file")
        n_part, n_steps, d, seed, horizon = struct.unpack("<QQQQd", fh.read(40))
        grid = TimeGrid(n=int(n_steps), horizon=horizon)

        def read(dtype, count):
            arr = np.frombuffer(fh.read(np.dtype(dtype).itemsize * count), dtype=dtype)
            return arr.astype(dtype if dtype != "u1" else np.uint8)

        xs = read("<f8", (n_steps + 1) * n_part * d).reshape(n_steps + 1, n_part, d)
        flags = read("u1", (n_steps + 1) * n_part).reshape(n_steps + 1, n_part)
        ws = read("<f8", (n_steps + 1) * n_part).reshape(n_steps + 1, n_part)
        ids = read("<u8", n_part)
        atom_of = read("<i8", n_part)
        bundle = PathBundle(grid, int(n_part), int(d), int(seed), ids, atom_of)
        bundle.xs[:] = xs
        bundle.flags[:] = flags
        bundle.ws[:] = ws
        for k in range(int(n_steps) + 1):
            (count,) = struct.unpack("<Q", fh.read(8))
            if count:
                rows = read("<f8", count * (d + 1)).reshape(count, d + 1)
                bundle.pool[k] = (rows[:, :d].copy(), rows[:, d].copy())
        bundle.k_filled = int(n_steps)
        return bundle
