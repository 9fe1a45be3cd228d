"""Counter-based uniform streams.

Every uniform is a pure function of ``(seed, stream, counter)`` so a
trajectory's random numbers do not depend on how trajectories are batched
or distributed over workers. The mixing function is the SplitMix64
finalizer.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_keys(seed, streams):
    """Per-stream 64-bit keys derived from a base seed."""
    base = _mix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) ^ _GOLDEN)
    streams = np.asarray(streams, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(base + (streams + np.uint64(1)) * _GOLDEN)


def uniforms(keys, counters):
    """Uniform draws in the open interval (0, 1), one per (key, counter)."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _mix64(keys + counters * _GOLDEN) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
