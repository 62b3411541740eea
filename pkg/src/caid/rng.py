"""Portable counter-based random streams.

Output ``i`` of a stream with key ``k`` is ``splitmix64_mix(k + (i + 1) * GOLDEN)``
(all arithmetic mod 2**64), so any draw can be reproduced in any language from
the key and the counter alone.  Child keys are derived by hashing the parent
key together with a label using BLAKE2b-64.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def derive_key(key: int, *labels) -> int:
    """Deterministically derive a child key from ``key`` and labels (ints or strings)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", key & _MASK))
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            h.update(b"i" + struct.pack("<q", int(lab)))
        else:
            h.update(b"s" + str(lab).encode("utf-8") + b"\0")
    return struct.unpack("<Q", h.digest())[0]


class Stream:
    """A SplitMix64 counter stream.  Not thread-safe; derive one per consumer."""

    def __init__(self, key: int, *labels):
        self.key = derive_key(key, *labels) if labels else key & _MASK
        self.counter = 0

    def child(self, *labels) -> "Stream":
        return Stream(self.key, *labels)

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(np.uint64(self.key) + idx * GOLDEN)

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        """Floats in ``[low, high)`` from the top 53 bits of each draw."""
        m = 1 if n is None else n
        u = (self.raw(m) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in ``[low, high)``."""
        m = 1 if n is None else n
        u = self.uniform(m)
        v = low + np.minimum(np.floor(u * (high - low)), high - low - 1).astype(np.int64)
        return int(v[0]) if n is None else v

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on paired uniforms."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation by sorting 64-bit keys (stable on ties)."""
        return np.argsort(self.raw(n), kind="stable")
