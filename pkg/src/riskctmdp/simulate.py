"""Monte Carlo for the controlled jump process under deterministic Markov controls.

Paths are simulated by thinning: candidate events arrive at the majorant
rate ``q*(x)`` of the current state and are accepted with probability
``q_x(a_t) / q*(x)``, where ``a_t`` is the action in force at the candidate
time. Trajectories advance in lockstep as numpy batches.

The discounted cost integral is exact. A control ``f(theta0 e^{-alpha t}, x)``
with nearest-node lookup is piecewise constant in time, so along a sojourn
in state ``x`` the integral of ``e^{-alpha t} c(x, a_t)`` is a difference of a
precomputed per-state antiderivative ``A_x``. The path integral is summed as
``A_{x_T}(T) + sum over jumps of (A_old(tau) - A_new(tau))``, so paths through
states of equal cost give bit-identical integrals.

Every uniform is a function of ``(seed, trajectory index, counter)`` so
estimates do not depend on the chunking or on the number of worker threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _rng
from ._validation import check_count, check_positive, check_state_index, check_theta
from .hjb import PolicyField

log = logging.getLogger(__name__)

__all__ = [
    "MarkovControl",
    "Trajectory",
    "EstimatorResult",
    "JEstimate",
    "ExplosionError",
    "sample_trajectory",
    "simulate_batch",
    "estimate_truncated_functional",
    "estimate_J",
    "tail_horizon",
    "estimate_state_moment",
    "estimate_exp_moment",
]

CHUNK = 4096
DEFAULT_JUMP_CAP = 1_000_000


class ExplosionError(RuntimeError):
    """A trajectory exceeded the jump cap before its horizon."""


@dataclass(frozen=True, eq=False)
class MarkovControl:
    """Time-domain control ``f(t, x) = policy(theta0 exp(-alpha t), x)`` with nearest-node lookup."""

    policy: PolicyField
    theta0: float
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "theta0", float(check_theta(self.theta0, "theta0")))
        object.__setattr__(self, "alpha", check_positive(self.alpha, "alpha"))

    def action(self, t, x):
        theta = self.theta0 * np.exp(-self.alpha * np.asarray(t, dtype=float))
        return self.policy.action(theta, x)

    def schedule(self):
        """Switch times ``t_k`` (``t_0 = 0``) and the node index in force on ``[t_k, t_{k+1})``.

        theta decreases in time, so the node index steps down each time
        ``theta0 e^{-alpha t}`` crosses a midpoint between policy nodes.
        """
        theta = self.policy.theta
        start = int(self.policy.nearest_node(self.theta0))
        if self.theta0 == 0.0 or start == 0:
            return np.zeros(1), np.array([start])
        mids = 0.5 * (theta[1:start + 1] + theta[:start])
        # crossing below mids[j] switches to node j; the switch happens once theta < mid
        times = np.log(self.theta0 / mids[::-1]) / self.alpha
        nodes = np.arange(start, -1, -1)
        return np.concatenate([[0.0], times]), nodes


@dataclass
class Trajectory:
    """Jump times (``jump_times[0] = 0``), visited states and the action in force after each jump."""

    jump_times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    horizon: float
    cost_integral: float = 0.0

    def state_at(self, t):
        return self.states[np.searchsorted(self.jump_times, t, side="right") - 1]


@dataclass
class EstimatorResult:
    mean: float
    std_error: float
    num_samples: int
    horizon_used: float

    @classmethod
    def from_samples(cls, samples, horizon):
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        if n and np.all(samples == samples[0]):
            return cls(float(samples[0]), 0.0, n, float(horizon))
        se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(samples.mean()), se, n, float(horizon))


@dataclass
class JEstimate:
    J_tilde: EstimatorResult
    J_log: float


@dataclass
class _Plan:
    """Everything the batch engine needs, precomputed once per (model, control)."""

    starts: np.ndarray
    seg_actions: np.ndarray
    cum: np.ndarray
    seg_cost: np.ndarray
    exit_rates: np.ndarray
    q_star: np.ndarray
    cdf: np.ndarray
    alpha: float


def _plan(model, control):
    if control.policy.num_states != model.num_states:
        raise ValueError("policy and model have different numbers of states")
    if np.any(control.policy.actions >= model.num_actions) or np.any(control.policy.actions < 0):
        raise ValueError("policy uses an action index outside the model's action set")
    alpha = model.alpha
    if not math.isclose(control.alpha, alpha, rel_tol=1e-12):
        raise ValueError(f"control alpha={control.alpha} differs from model alpha={alpha}")
    starts, nodes = control.schedule()
    seg_actions = control.policy.actions[nodes]
    states = np.arange(model.num_states)
    seg_cost = model.cost[states[None, :], seg_actions]
    decay = np.exp(-alpha * starts)
    pieces = seg_cost[:-1] * (decay[:-1] - decay[1:])[:, None] / alpha
    cum = np.vstack([np.zeros((1, model.num_states)), np.cumsum(pieces, axis=0)])

    rates = np.array(model.kernel.dense(), dtype=float)
    idx = np.arange(model.num_states)
    rates[idx, :, idx] = 0.0
    rates = np.maximum(rates, 0.0)
    total = rates.sum(axis=2, keepdims=True)
    cdf = np.cumsum(rates, axis=2) / np.where(total > 0, total, 1.0)
    return _Plan(starts, seg_actions, cum, seg_cost, model.exit_rates, model.q_star, cdf, alpha)


def _antiderivative(plan, x, t):
    """``int_0^t e^{-alpha s} c(x, a_s) ds`` along a path that sits in state ``x``."""
    k = np.searchsorted(plan.starts, t, side="right") - 1
    tk = plan.starts[k]
    c = plan.seg_cost[k, x]
    return plan.cum[k, x] + c * (np.exp(-plan.alpha * tk) - np.exp(-plan.alpha * t)) / plan.alpha


def _run_chunk(plan, x0, horizon, seed, indices, sample_times, record, jump_cap):
    b = indices.size
    keys = _rng.stream_keys(seed, indices)
    x = np.full(b, x0, dtype=np.int64)
    t = np.zeros(b)
    integral = np.zeros(b)
    jumps = np.zeros(b, dtype=np.int64)
    first_jump = np.full(b, np.inf)
    cand = np.zeros(b, dtype=np.uint64)
    active = np.ones(b, dtype=bool)
    ns = 0 if sample_times is None else sample_times.size
    sampled = np.zeros((b, ns), dtype=np.int64)
    ptr = np.zeros(b, dtype=np.int64)
    paths = [([0.0], [x0], [plan.seg_actions[0, x0]]) for _ in range(b)] if record else None
    if horizon == 0:
        active[:] = False

    while active.any():
        i = np.nonzero(active)[0]
        xi = x[i]
        qm = plan.q_star[xi]
        c3 = cand[i] * np.uint64(3)
        u1 = _rng.uniforms(keys[i], c3)
        with np.errstate(divide="ignore"):
            t_new = np.where(qm > 0, t[i] - np.log(u1) / np.where(qm > 0, qm, 1.0), np.inf)
        stop = np.minimum(t_new, horizon)
        if ns:
            while True:
                hit = ptr[i] < ns
                hit[hit] = sample_times[ptr[i][hit]] < stop[hit]
                if not hit.any():
                    break
                j = i[hit]
                sampled[j, ptr[j]] = x[j]
                ptr[j] += 1
        finished = t_new >= horizon
        active[i[finished]] = False
        integral[i[finished]] += _antiderivative(plan, xi[finished], horizon)
        t[i] = np.where(finished, horizon, t_new)
        cand[i] += np.uint64(1)

        go = ~finished
        if not go.any():
            break
        j = i[go]
        tj = t[j]
        xj = x[j]
        k = np.searchsorted(plan.starts, tj, side="right") - 1
        a = plan.seg_actions[k, xj]
        u2 = _rng.uniforms(keys[j], c3[go] + np.uint64(1))
        accept = u2 * plan.q_star[xj] < plan.exit_rates[xj, a]
        if not accept.any():
            continue
        j, xj, a, tj = j[accept], xj[accept], a[accept], tj[accept]
        u3 = _rng.uniforms(keys[j], c3[go][accept] + np.uint64(2))
        y = np.argmax(plan.cdf[xj, a] > u3[:, None], axis=1)
        # telescoped sojourn integrals: exact zero when both states cost the same
        integral[j] += _antiderivative(plan, xj, tj) - _antiderivative(plan, y, tj)
        x[j] = y
        jumps[j] += 1
        first_jump[j] = np.minimum(first_jump[j], tj)
        if record:
            for p, tt, yy in zip(j, tj, y):
                kk = np.searchsorted(plan.starts, tt, side="right") - 1
                paths[p][0].append(float(tt))
                paths[p][1].append(int(yy))
                paths[p][2].append(int(plan.seg_actions[kk, yy]))
        if jumps[j].max() > jump_cap:
            raise ExplosionError(f"a trajectory exceeded {jump_cap} jumps before t={horizon}")

    if ns:
        rest = ptr < ns
        for p in np.nonzero(rest)[0]:
            sampled[p, ptr[p]:] = x[p]
    return {
        "integral": integral,
        "jumps": jumps,
        "first_jump": first_jump,
        "candidates": cand.astype(np.int64),
        "states": sampled,
        "final": x,
        "paths": paths,
    }


def simulate_batch(
    model,
    control,
    x0,
    horizon,
    num_traj,
    seed,
    sample_times=None,
    threads=1,
    jump_cap=DEFAULT_JUMP_CAP,
):
    """Simulate trajectories ``0 .. num_traj-1`` and return per-trajectory arrays.

    Keys: ``integral`` (discounted cost to ``horizon``), ``jumps``,
    ``first_jump`` (time, ``inf`` if none), ``candidates`` (thinning
    proposals drawn), ``final`` (state at ``horizon``) and ``states`` (state
    at each of ``sample_times``).
    """
    x0 = check_state_index(x0, model.num_states)
    num_traj = check_count(num_traj, "num_traj")
    threads = check_count(threads, "threads")
    horizon = float(horizon)
    if not (np.isfinite(horizon) and horizon >= 0):
        raise ValueError(f"horizon must be finite and >= 0, got {horizon}")
    if sample_times is not None:
        sample_times = np.asarray(sample_times, dtype=float)
        if np.any(np.diff(sample_times) < 0) or np.any(sample_times < 0) or np.any(sample_times > horizon):
            raise ValueError("sample_times must be sorted and lie in [0, horizon]")
    plan = _plan(model, control)
    chunks = [np.arange(lo, min(lo + CHUNK, num_traj), dtype=np.uint64) for lo in range(0, num_traj, CHUNK)]

    def work(idx):
        return _run_chunk(plan, x0, horizon, seed, idx, sample_times, False, jump_cap)

    if threads == 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    keys = ("integral", "jumps", "first_jump", "candidates", "states", "final")
    out = {k: np.concatenate([p[k] for p in parts]) for k in keys}
    log.debug("simulated %d trajectories, max %d jumps", num_traj, int(out["jumps"].max()))
    return out


def _as_control(control, theta, alpha):
    if isinstance(control, PolicyField):
        return MarkovControl(control, theta, alpha)
    if not math.isclose(control.theta0, theta, rel_tol=0, abs_tol=1e-15):
        raise ValueError(f"control starts at theta0={control.theta0}, expected {theta}")
    return control


def sample_trajectory(model, control, x0, horizon, seed, index=0, jump_cap=DEFAULT_JUMP_CAP):
    """One trajectory; identical to trajectory ``index`` of a batch with the same seed."""
    x0 = check_state_index(x0, model.num_states)
    horizon = float(horizon)
    if not (np.isfinite(horizon) and horizon >= 0):
        raise ValueError(f"horizon must be finite and >= 0, got {horizon}")
    plan = _plan(model, control)
    res = _run_chunk(plan, x0, horizon, seed, np.array([index], dtype=np.uint64), None, True, jump_cap)
    times, states, actions = res["paths"][0]
    return Trajectory(
        np.array(times), np.array(states, dtype=np.int64), np.array(actions, dtype=np.int64),
        horizon, float(res["integral"][0]),
    )


def estimate_truncated_functional(model_n, control, theta, delta, x0, num_traj, seed, threads=1):
    """Mean of ``e^{n delta/alpha} exp(theta int_0^{T} e^{-alpha t} c_n dt)`` with ``T = log(theta/delta)/alpha``."""
    theta = float(check_theta(theta, "theta", allow_zero=False))
    delta = check_positive(delta, "delta")
    if delta > theta:
        raise ValueError(f"delta={delta} exceeds theta={theta}; the horizon log(theta/delta)/alpha is undefined")
    alpha = model_n.alpha
    control = _as_control(control, theta, alpha)
    horizon = math.log(theta / delta) / alpha
    res = simulate_batch(model_n, control, x0, horizon, num_traj, seed, threads=threads)
    samples = math.exp(model_n.n * delta / alpha) * np.exp(theta * res["integral"])
    return EstimatorResult.from_samples(samples, horizon)


def tail_horizon(model, theta, tail_eps, cert=None):
    """Horizon beyond which the discarded cost changes the functional by a factor at most ``1 + tail_eps``.

    The cost rate on the grid is at most ``c_max`` (the grid maximum, further
    capped by ``rho1 log max V0 + L0`` when a certificate is given), so the
    tail ``theta int_T^inf e^{-alpha t} c dt`` is at most
    ``theta c_max e^{-alpha T} / alpha``.
    """
    c_max = float(model.cost.max())
    if cert is not None:
        c_max = min(c_max, float(cert.rho1 * np.log(cert.V0_on(model.space).max()) + cert.L0))
    alpha = model.alpha
    if c_max <= 0 or theta == 0:
        return 0.0
    return max(0.0, math.log(theta * c_max / (alpha * math.log1p(tail_eps))) / alpha)


def estimate_J(model, control, theta, x0, num_traj, seed, tail_eps=1e-4, cert=None, threads=1):
    """Risk-sensitive criterion ``E exp(theta int_0^inf e^{-alpha t} c dt)`` and its log form."""
    theta = float(check_theta(theta, "theta", allow_zero=False))
    tail_eps = check_positive(tail_eps, "tail_eps")
    control = _as_control(control, theta, model.alpha)
    horizon = tail_horizon(model, theta, tail_eps, cert)
    res = simulate_batch(model, control, x0, horizon, num_traj, seed, threads=threads)
    with np.errstate(over="ignore"):
        samples = np.exp(theta * res["integral"])
    if not np.all(np.isfinite(samples)):
        raise FloatingPointError("exp(theta * cost integral) overflowed for some trajectory")
    est = EstimatorResult.from_samples(samples, horizon)
    return JEstimate(est, math.log(est.mean) / theta)


def estimate_state_moment(model, control, x0, times, values, num_traj, seed, threads=1):
    """``E values[xi_t]`` at each of ``times``; one :class:`EstimatorResult` per time."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    res = simulate_batch(model, control, x0, float(times.max()), num_traj, seed, sample_times=times, threads=threads)
    return [EstimatorResult.from_samples(values[res["states"][:, j]], t) for j, t in enumerate(times)]


def estimate_exp_moment(model, control, x0, horizon, num_traj, seed, factor=2.0, threads=1):
    """``E exp(factor int_0^horizon e^{-alpha t} c dt)``."""
    res = simulate_batch(model, control, x0, horizon, num_traj, seed, threads=threads)
    return EstimatorResult.from_samples(np.exp(factor * res["integral"]), horizon)
