"""Small shared helpers: seeded generator derivation, parallel map, atomic IO."""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    return zlib.crc32(str(tag).encode("utf-8"))


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Derive an independent numpy Generator from a base seed and a tag path.

    The same (seed, tags) always yields the same stream, independent of any
    other stream derived from the same seed. Used for auxiliary sampling
    (bootstrap resamples, random stop maps, smoothing draws); particle noise
    goes through the counter-based generator in `rng.py` instead.
    """
    entropy = (int(seed) & _MASK64, *(_tag_to_int(t) for t in tags))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map preserving input order; thread pool when threads > 1.

    Results are collected in input order, so the reduction is deterministic
    regardless of scheduling.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def dump_json_atomic(path: str, payload: dict) -> None:
    """Write JSON to `path` atomically (temp file + rename), sorted keys, LF."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_text_atomic(path: str, text: str) -> None:
    """Write text to `path` atomically (temp file + rename), UTF-8, LF."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_digest(config: dict) -> str:
    """sha256 of the canonical (sorted, compact) JSON encoding of a config."""
    import hashlib

    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
