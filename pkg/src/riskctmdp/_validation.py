"""Input validation helpers shared by the public API."""

import numbers

import numpy as np


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_theta(theta, name="theta", allow_zero=True):
    theta = np.asarray(theta, dtype=float)
    lo_ok = theta >= 0 if allow_zero else theta > 0
    if not np.all(np.isfinite(theta)) or not np.all(lo_ok & (theta <= 1)):
        interval = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {theta!r}")
    return theta


def check_state_index(x, num_states, name="x0"):
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, (numbers.Integral, np.integer)):
        raise TypeError(f"{name} must be a state index, got {x!r}")
    if not 0 <= int(x) < num_states:
        raise ValueError(f"{name}={x} out of range for {num_states} states")
    return int(x)


def check_count(n, name, minimum=1):
    if isinstance(n, bool) or not isinstance(n, (numbers.Integral, np.integer)) or n < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {n!r}")
    return int(n)


def check_array(values, name, shape=None, nonnegative=False):
    arr = np.array(values, dtype=float)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if nonnegative and np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    arr.setflags(write=False)
    return arr


def check_schedule(values, name, increasing):
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-d sequence")
    steps = np.diff(arr)
    if increasing and np.any(steps <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    if not increasing and np.any(steps >= 0):
        raise ValueError(f"{name} must be strictly decreasing")
    return arr
