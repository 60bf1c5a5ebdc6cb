"""Portable SplitMix64 generator.

Every random draw in the package goes through this generator so that
datasets, initial weights, shuffles and samples are reproducible across
platforms and across implementations in other languages.

Constants (all arithmetic modulo 2**64)::

    state_k  = seed + k * 0x9E3779B97F4A7C15          (k = 1, 2, ...)
    z        = state_k
    z        = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z        = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output_k = z ^ (z >> 31)

Uniforms are ``(output >> 11) * 2**-53`` in [0, 1).  Normals use the
Box-Muller transform on consecutive uniform pairs ``(a, b)``:
``r = sqrt(-2 log(1 - a))`` and the pair ``(r cos 2*pi*b, r sin 2*pi*b)``,
emitted in that order.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, tag: str | int) -> int:
    """Child seed for an independent stream named ``tag``."""
    if isinstance(tag, str):
        tag = fnv1a64(tag.encode("utf-8"))
    return mix64((seed & MASK64) ^ mix64(tag + GAMMA))


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-style SplitMix64 stream; draws are vectorized with numpy."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def split(self, tag: str | int) -> "SplitMix64":
        return SplitMix64(derive_seed(self.state, tag))

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + k * np.uint64(GAMMA)
            out = _mix_array(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        a, b = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-a))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * b)
        out[1::2] = r * np.sin(2.0 * np.pi * b)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, high index first."""
        idx = np.arange(n)
        if n < 2:
            return idx
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx
