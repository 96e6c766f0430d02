"""Counter-based Gaussian noise for particle simulation.

Every normal draw is addressed, not streamed: the increment used by particle
`p` at time step `k` is a pure function of (seed, p, k). Two consequences the
rest of the package leans on:

* runs are reproducible bit-for-bit regardless of how particles are batched
  or how many threads evaluate them, and
* two simulations that share a seed see identical noise wherever their
  (particle, step) indices coincide, which gives common-random-number
  comparisons (policy A vs policy B, bumped vs unbumped measure) for free.

The block cipher is Philox-4x32 with 10 rounds, implemented directly on
uint32 lanes so a whole vector of particle counters is evaluated in one shot.
Each 4-word block is turned into two 53-bit uniforms and then two standard
normals via Box-Muller.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_LO = np.uint64(0xFFFFFFFF)

_INV53 = float(2.0**-53)
_TWO_PI = 2.0 * np.pi


def _philox_rounds(c0, c1, c2, c3, k0, k1):
    """Ten Philox-4x32 rounds on uint32 lane arrays; returns four uint32 arrays."""
    for _ in range(10):
        p0 = _M0 * c0.astype(np.uint64)
        p1 = _M1 * c2.astype(np.uint64)
        lo0 = (p0 & _LO).astype(np.uint32)
        hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
        lo1 = (p1 & _LO).astype(np.uint32)
        hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


def _blocks(seed: int, particles: np.ndarray, step: int, block: int) -> tuple:
    """Evaluate one Philox block per particle for a fixed (step, block) slot."""
    particles = np.asarray(particles, dtype=np.uint64)
    n = particles.shape[0]
    c0 = np.full(n, block, dtype=np.uint32)
    c1 = np.full(n, step & 0xFFFFFFFF, dtype=np.uint32)
    c2 = (particles & _LO).astype(np.uint32)
    c3 = (particles >> np.uint64(32)).astype(np.uint32)
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    k0 = np.full(n, seed & 0xFFFFFFFF, dtype=np.uint32)
    k1 = np.full(n, seed >> 32, dtype=np.uint32)
    with np.errstate(over="ignore"):
        return _philox_rounds(c0, c1, c2, c3, k0, k1)


def _to_uniform_pair(x0, x1, x2, x3):
    """Map four uint32 lanes to two uniforms, the first in (0,1], the second in [0,1)."""
    a = (x0.astype(np.uint64) << np.uint64(32)) | x1.astype(np.uint64)
    b = (x2.astype(np.uint64) << np.uint64(32)) | x3.astype(np.uint64)
    u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
    u2 = (b >> np.uint64(11)).astype(np.float64) * _INV53
    return u1, u2


def normals(seed: int, particles: np.ndarray, step: int, d: int) -> np.ndarray:
    """Standard normal increments, shape (len(particles), d).

    `particles` are integer particle ids; `step` is the global time-step
    index. The output is a deterministic function of (seed, id, step, slot),
    so any subset of particles evaluated in any order sees the same numbers.
    """
    particles = np.asarray(particles)
    n = particles.shape[0]
    if n == 0:
        return np.zeros((0, d))
    nblocks = (d + 1) // 2
    out = np.empty((n, 2 * nblocks))
    for blk in range(nblocks):
        u1, u2 = _to_uniform_pair(*_blocks(seed, particles, step, blk))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = _TWO_PI * u2
        out[:, 2 * blk] = r * np.cos(theta)
        out[:, 2 * blk + 1] = r * np.sin(theta)
    return out[:, :d]


def uniforms(seed: int, particles: np.ndarray, step: int, d: int) -> np.ndarray:
    """Uniform [0,1) variates with the same addressing scheme as `normals`."""
    particles = np.asarray(particles)
    n = particles.shape[0]
    if n == 0:
        return np.zeros((0, d))
    nblocks = (d + 1) // 2
    out = np.empty((n, 2 * nblocks))
    for blk in range(nblocks):
        u1, u2 = _to_uniform_pair(*_blocks(seed, particles, step, blk))
        out[:, 2 * blk] = u1 - _INV53
        out[:, 2 * blk + 1] = u2
    return out[:, :d]
