"""Keyed, counter-based random streams.

Every stochastic routine in this package draws from a Philox generator
derived from a (seed, *key_parts) tuple.  Streams with the same key are
bit-identical no matter where or in what order they are created, which is
what makes per-user evaluation order-independent and thread-safe.

Key parts must be ints or strings; floats are rejected because their repr
is a portability hazard.
"""

import hashlib

import numpy as np


def stream_key(seed, *parts):
    """Hash (seed, *parts) into a 128-bit Philox key."""
    for p in parts:
        if not isinstance(p, (int, str)):
            raise TypeError(f"stream key parts must be int or str, got {type(p).__name__}")
    payload = repr((int(seed),) + tuple(parts)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()

def stream(seed, *parts):
    """Return a numpy Generator keyed by (seed, *parts)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *parts)))
