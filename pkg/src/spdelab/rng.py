"""Deterministic stream derivation for reproducible Monte Carlo.

Streams are Philox counter-based generators keyed by a master seed plus a
tuple of identifiers (module tag, experiment tag, path block, ...).  Any
consumer can reconstruct its stream from the identifiers alone, so results
never depend on evaluation order, and nested estimators can split off
independent sub-streams without coordination.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(part) -> bytes:
    if isinstance(part, (bool, np.bool_)):
        part = int(part)
    if isinstance(part, (int, np.integer)):
        return b"i" + int(part).to_bytes(16, "little", signed=True)
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    if isinstance(part, (float, np.floating)):
        return b"f" + np.float64(part).tobytes()
    raise TypeError(f"stream id parts must be int, float or str, got {type(part)!r}")


def stream_key(*parts) -> int:
    """Collapse identifier parts into a stable 64-bit key.

    Uses blake2b rather than ``hash()`` so keys do not depend on
    PYTHONHASHSEED and survive across processes.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(_encode(part))
    return int.from_bytes(h.digest(), "little")


def substream(seed: int, *parts) -> np.random.Generator:
    """Generator for the (seed, *parts) stream.

    Identical inputs replay bit for bit; distinct id tuples give
    statistically independent Philox streams.
    """
    key = np.array([seed & _MASK64, stream_key(*parts)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
