"""Counter-based deterministic random streams.

Every source of randomness in the package is derived from a single user
seed through the splitmix64 finalizer, applied to a counter.  Streams are
pure functions of (seed, counter), so results never depend on call order,
thread partitioning, or platform RNG state.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit mix."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *path: int) -> int:
    """Derive a sub-seed from ``seed`` and an integer path.

    Used to hand independent streams to components (sampler chains,
    per-input samplers, noise sets) without sharing mutable state.
    """
    z = mix64(seed & _MASK64)
    for p in path:
        z = mix64((z + _GOLDEN + (p & _MASK64)) & _MASK64)
    return z


def uint64_stream(seed: int, start: int, count: int) -> np.ndarray:
    """Vectorized splitmix64 outputs for counters start..start+count-1."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    c = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (np.uint64(seed & _MASK64) + np.uint64(_GOLDEN) * (c + np.uint64(1)))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def uniform01(seed: int, start: int, count: int) -> np.ndarray:
    """Uniforms in [0, 1) built from the top 53 bits of the stream."""
    return (uint64_stream(seed, start, count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normals(seed: int, count: int) -> np.ndarray:
    """Standard normals via Box-Muller on the counter-based stream.

    Pairs (z0, z1) are produced from uniform counters (2i, 2i+1); u1 is
    shifted into (0, 1] so log(u1) is always finite.
    """
    npairs = (count + 1) // 2
    u1 = (uint64_stream(seed, 0, 2 * npairs)[0::2] >> np.uint64(11)).astype(np.float64)
    u1 = (u1 + 1.0) * (2.0 ** -53)
    u2 = uniform01(seed, 0, 2 * npairs)[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    z = np.empty(2 * npairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:count]
