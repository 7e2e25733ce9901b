"""
Counter-based Gaussian streams keyed by (seed, wavevector, step, stream).

Every normal variate is a pure function of its key, so a draw for mode
``(k1, k2)`` at step ``n`` is the same whatever the lattice size, batch
layout or evaluation order.  The mixer is the SplitMix64 finaliser applied
to a chained key; uniforms take the top 53 bits, normals use Box-Muller.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream tags, kept distinct so different uses never share variates
STREAM_INCREMENT = 1
STREAM_STATIONARY = 2
STREAM_BACKWARD = 3
STREAM_SAMPLE = 4


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _u64(v: int) -> np.uint64:
    return np.uint64(v & _MASK)


def _mix_scalar(v: int) -> int:
    return int(_mix(np.array([v & _MASK], dtype=np.uint64))[0])


def mode_keys(seeds, k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Keys of shape (len(seeds),) + k1.shape; seeds may be a scalar or 1-d."""
    seeds = np.atleast_1d(np.asarray(seeds, dtype=object))
    seed_keys = np.array([_mix_scalar(int(s) * _GOLDEN + 1) for s in seeds], dtype=np.uint64)
    k1u = np.asarray(k1, dtype=np.int64).astype(np.uint64)
    k2u = np.asarray(k2, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(seed_keys.reshape((-1,) + (1,) * k1u.ndim) ^ (k1u + np.uint64(_GOLDEN)))
        h = _mix(h ^ (k2u * np.uint64(0xD1B54A32D192ED03) + np.uint64(0x2545F4914F6CDD1D)))
    return h


def uniforms(keys: np.ndarray, counter: int, stream: int, lane: int) -> np.ndarray:
    """Uniform(0, 1) variates, one per key, for the given (counter, stream, lane)."""
    salt = _mix_scalar(((counter & _MASK) * _GOLDEN) ^ (stream << 48) ^ (lane << 40) ^ 0x632BE59BD9B4E019)
    with np.errstate(over="ignore"):
        h = _mix(keys + _u64(salt))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(keys: np.ndarray, counter: int, stream: int, pair: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two independent standard normal arrays shaped like ``keys``."""
    u1 = uniforms(keys, counter, stream, 2 * pair)
    u2 = uniforms(keys, counter, stream, 2 * pair + 1)
    r = np.sqrt(-2.0 * np.log(u1))
    th = 2.0 * np.pi * u2
    return r * np.cos(th), r * np.sin(th)
