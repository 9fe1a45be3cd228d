"""Truncated HJB fixed point, the double limit in (delta, n) and policy extraction.

For a truncation level ``n`` and left end ``delta`` the value solves

    u(theta, x) = e^{n delta/alpha}
        + (1/alpha) int_delta^theta min_a [ (1/s) (Q_a u)(s, x) + c_n(x, a) u(s, x) ] ds

which is iterated to its fixed point (Picard). Below ``delta`` the field is
extended by the constant boundary value. The optimal value is the limit as
``delta -> 0`` and then ``n -> infinity``.

The operator is positively homogeneous, so the truncated value factors as
``e^{n delta/alpha} * psi`` where ``psi`` has boundary value one. ``psi``
increases as ``delta`` decreases, the raw field decreases, and both share the
same limit; :func:`solve_hjb` extrapolates ``psi`` linearly in ``delta`` to
estimate that limit and monitors the raw sequences for monotonicity.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid
from sklearn.exceptions import ConvergenceWarning

from ._validation import check_count, check_positive, check_schedule
from .lyapunov import second_moment_bound, truncated_lipschitz_constant, value_upper_bound
from .model import TruncatedModel, truncate

log = logging.getLogger(__name__)

__all__ = [
    "ThetaGrid",
    "ValueField",
    "PolicyField",
    "TruncatedSolveReport",
    "HJBReport",
    "ConvergenceError",
    "MonotonicityError",
    "apply_T",
    "solve_truncated",
    "contraction_bound",
    "empirical_contraction",
    "solve_hjb",
    "extract_policy",
    "hjb_objective",
    "residual",
    "max_theta_slope",
    "default_delta_list",
    "default_n_list",
]


_STALL_SWEEPS = 25
_STALL_LEVEL = 1e-3
_POLISH_CHECK = 1e-12
_EPS = np.finfo(float).eps


class ConvergenceError(RuntimeError):
    """Picard iteration hit ``max_iter`` before reaching the tolerance."""

    def __init__(self, message, last_residual):
        super().__init__(message)
        self.last_residual = last_residual


class MonotonicityError(RuntimeError):
    """A (delta, n) sequence broke its monotone ordering beyond tolerance."""


@dataclass(frozen=True, eq=False)
class ThetaGrid:
    """Reporting nodes on ``[0, 1]`` and the left end ``delta`` of truncated solves.

    Truncated solves run on ``solve_nodes()``: ``delta``, the reporting nodes
    above it, and geometric nodes ``delta * exp(k * log_step)`` wherever the
    reporting grid is coarser than ``log_step`` in ``log(theta)``.
    """

    nodes: np.ndarray
    delta: float
    log_step: float = 0.05

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("theta nodes must be strictly increasing")
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ValueError("theta nodes must include both endpoints 0 and 1")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        check_positive(self.log_step, "log_step")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "delta", float(self.delta))

    @classmethod
    def uniform(cls, num=201, delta=0.1, log_step=0.05):
        num = check_count(num, "theta grid size", minimum=2)
        return cls(np.linspace(0.0, 1.0, num), delta, log_step)

    @property
    def step(self):
        return float(np.max(np.diff(self.nodes)))

    def with_delta(self, delta):
        return replace(self, delta=delta)

    def refined(self):
        """Grid with every reporting interval halved and half the log step."""
        mids = 0.5 * (self.nodes[1:] + self.nodes[:-1])
        nodes = np.sort(np.concatenate([self.nodes, mids]))
        return ThetaGrid(nodes, self.delta, self.log_step / 2)

    def solve_nodes(self):
        d = self.delta
        above = self.nodes[self.nodes > d * (1 + 1e-12)]
        top = min(1.0, self.step / self.log_step)
        k_max = int(np.floor(np.log(top / d) / self.log_step)) if top > d else 0
        geo = d * np.exp(self.log_step * np.arange(1, k_max + 1))
        geo = geo[geo < 1.0]
        if geo.size and above.size:
            gap = np.min(np.abs(geo[:, None] - above[None, :]), axis=1)
            geo = geo[gap > 0.25 * self.log_step * geo]
        return np.unique(np.concatenate([[d], geo, above]))

    def extended_nodes(self):
        below = self.nodes[self.nodes < self.delta * (1 - 1e-12)]
        return np.concatenate([below, self.solve_nodes()])


@dataclass(eq=False)
class ValueField:
    """``phi[i, x]`` is the value at ``theta[i]`` and state ``x``."""

    theta: np.ndarray
    phi: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.ndim != 2 or self.phi.shape[0] != self.theta.size:
            raise ValueError("phi must have one row per theta node")

    @property
    def num_states(self):
        return self.phi.shape[1]

    def node_index(self, theta, exact=True):
        i = int(np.argmin(np.abs(self.theta - theta)))
        if exact and abs(self.theta[i] - theta) > 1e-12:
            raise KeyError(f"theta={theta} is not a node of this field")
        return i

    def at(self, theta):
        return self.phi[self.node_index(theta)]

    def restrict(self, nodes):
        idx = [self.node_index(t) for t in nodes]
        return ValueField(self.theta[idx], self.phi[idx], dict(self.meta))

    def interpolate(self, theta, x):
        """Linear interpolation in theta at state index ``x``."""
        return np.interp(theta, self.theta, self.phi[:, x])

    def derivative(self):
        """``d phi / d theta``: central differences inside, one-sided at the ends.

        The second-order nonuniform stencil is written in terms of differences
        so that a constant field has derivative exactly zero.
        """
        h = np.diff(self.theta)[:, None]
        d = np.diff(self.phi, axis=0)
        out = np.empty_like(self.phi)
        out[0], out[-1] = d[0] / h[0], d[-1] / h[-1]
        h1, h2 = h[:-1], h[1:]
        out[1:-1] = (h1**2 * d[1:] + h2**2 * d[:-1]) / (h1 * h2 * (h1 + h2))
        return out


@dataclass(eq=False)
class PolicyField:
    """Deterministic selector ``actions[i, x]`` at theta node ``i`` and state ``x``."""

    theta: np.ndarray
    actions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 2 or self.actions.shape[0] != self.theta.size:
            raise ValueError("actions must have one row per theta node")
        if np.any(np.diff(self.theta) <= 0):
            raise ValueError("policy theta nodes must be strictly increasing")

    @classmethod
    def constant(cls, actions):
        """A theta-independent (stationary) selector."""
        actions = np.asarray(actions, dtype=np.int64)
        return cls(np.array([0.0, 1.0]), np.vstack([actions, actions]))

    @property
    def num_states(self):
        return self.actions.shape[1]

    def nearest_node(self, theta):
        """Index of the nearest node; ties go to the lower node."""
        mids = 0.5 * (self.theta[1:] + self.theta[:-1])
        return np.searchsorted(mids, theta, side="right")

    def action(self, theta, x):
        return self.actions[self.nearest_node(theta), x]

    def time_selector(self, theta0, alpha):
        """``f(t, x) = policy(theta0 * exp(-alpha t), x)`` with nearest-node lookup."""

        def select(t, x):
            return self.action(theta0 * np.exp(-alpha * np.asarray(t, dtype=float)), x)

        return select


@dataclass
class TruncatedSolveReport:
    n: float
    delta: float
    boundary_value: float
    q_bar: float
    iterations: int = 0
    sweep_changes: list = field(default_factory=list)
    converged: bool = False
    roundoff_floor: bool = False
    polish_change: float = 0.0

    @property
    def sup_norm_residual(self):
        return self.sweep_changes[-1] if self.sweep_changes else float("nan")

    @property
    def contraction_ratios(self):
        """Per-sweep ratios of successive sup-norm changes (above the noise floor)."""
        return empirical_contraction(self.sweep_changes, 1, floor=1e-13 * self.boundary_value)


@dataclass
class HJBReport:
    delta_list: list
    n_list: list
    delta_diffs: dict = field(default_factory=dict)
    n_diffs: list = field(default_factory=list)
    delta_monotone_violation: float = 0.0
    n_monotone_violation: float = 0.0
    delta_converged: dict = field(default_factory=dict)
    n_converged: bool = False
    lipschitz_truncated_ratio: float = 0.0
    lipschitz_limit_ratio: float = float("nan")
    lower_bound_violations: int = 0
    upper_bound_violations: int = 0
    residual: float = float("nan")
    iterations: int = 0
    solves: int = 0
    truncated_reports: list = field(default_factory=list)

    def as_rows(self):
        return [
            ("deltas_used", ";".join(f"{n}:{len(v) + 2}" for n, v in self.delta_diffs.items())),
            ("n_used", ";".join(repr(float(n)) for n in self.n_list[: len(self.n_diffs) + 1])),
            ("picard_iterations", self.iterations),
            ("truncated_solves", self.solves),
            ("delta_converged", all(self.delta_converged.values())),
            ("n_converged", self.n_converged),
            ("delta_monotone_violation", self.delta_monotone_violation),
            ("n_monotone_violation", self.n_monotone_violation),
            ("lipschitz_truncated_ratio", self.lipschitz_truncated_ratio),
            ("lipschitz_limit_ratio", self.lipschitz_limit_ratio),
            ("lower_bound_violations", self.lower_bound_violations),
            ("upper_bound_violations", self.upper_bound_violations),
            ("residual", self.residual),
        ]


def _model_alpha(model, alpha):
    return model.alpha if alpha is None else check_positive(alpha, "alpha")


def hjb_objective(phi, model):
    """``Q_a phi(theta, .)(x) + theta c(x, a) phi(theta, x)`` with shape ``(T, N, K)``."""
    u = phi.phi
    return model.kernel.apply(u) + phi.theta[:, None, None] * model.cost[None, :, :] * u[:, :, None]


def _T(u, s, model_n, alpha, boundary):
    flow = model_n.kernel.apply(u) / s[:, None, None] + model_n.cost[None, :, :] * u[:, :, None]
    integrand = flow.min(axis=2)
    return boundary + cumulative_trapezoid(integrand, s, axis=0, initial=0.0) / alpha


def _march(u, s, model_n, alpha, boundary, max_inner=100):
    """Solve the discrete fixed-point equations of ``T`` node by node, starting from ``u``."""
    out = np.array(u, dtype=float)
    out[0] = boundary

    def integrand(v, si):
        flow = model_n.kernel.apply(v[None, :])[0] / si + model_n.cost * v[:, None]
        return flow.min(axis=1)

    f_prev = integrand(out[0], s[0])
    for i in range(1, s.size):
        w = 0.5 * (s[i] - s[i - 1]) / alpha
        base = out[i - 1] + w * f_prev
        x = out[i]
        for _ in range(max_inner):
            fx = integrand(x, s[i])
            nxt = base + w * fx
            done = np.max(np.abs(nxt - x)) <= 4 * _EPS * np.max(np.abs(nxt))
            x = nxt
            if done:
                break
        out[i] = x
        f_prev = integrand(x, s[i])
    return out


def apply_T(u, model_n, alpha=None):
    """One Picard sweep on a field whose first theta node is ``delta``.

    The theta integral uses the cumulative trapezoid rule on the field's nodes,
    so ``Tu(delta, .)`` equals the boundary value exactly.
    """
    alpha = _model_alpha(model_n, alpha)
    s = u.theta
    if s[0] <= 0:
        raise ValueError("apply_T needs a field on [delta, 1] with delta > 0")
    boundary = math.exp(model_n.n * s[0] / alpha)
    out = _T(u.phi, s, model_n, alpha, boundary)
    return ValueField(s.copy(), out, dict(u.meta))


def solve_truncated(model_n, grid, tol=1e-12, max_iter=10_000, alpha=None, u0=None):
    """Picard-iterate the truncated operator from ``u0`` (default: the boundary constant).

    Iteration stops once the sup-norm change of a sweep is below
    ``tol * exp(n delta / alpha)``. Round-off is amplified by the transient
    growth of ``T`` before its m-step contraction takes over, so with small
    ``delta`` the sweeps can settle into a noise cycle above ``tol``. When the
    change has stopped shrinking, the iterate is finished by one forward
    marching pass that solves the same discrete equations node by node; the
    report flags this as ``roundoff_floor``. The returned field lives on
    ``grid.extended_nodes()``: constant ``exp(n delta / alpha)`` below ``delta``.
    """
    if not isinstance(model_n, TruncatedModel):
        raise TypeError("solve_truncated needs a TruncatedModel")
    alpha = _model_alpha(model_n, alpha)
    check_positive(tol, "tol")
    max_iter = check_count(max_iter, "max_iter")
    s = grid.solve_nodes()
    delta = grid.delta
    boundary = math.exp(model_n.n * delta / alpha)
    report = TruncatedSolveReport(model_n.n, delta, boundary, model_n.q_bar)
    if u0 is None:
        u = np.full((s.size, model_n.num_states), boundary)
    else:
        u = np.array(u0, dtype=float)
        if u.shape != (s.size, model_n.num_states):
            raise ValueError(f"u0 must have shape {(s.size, model_n.num_states)}")
    best, stalled = np.inf, 0
    for k in range(1, max_iter + 1):
        new = _T(u, s, model_n, alpha, boundary)
        change = float(np.max(np.abs(new - u)))
        report.sweep_changes.append(change)
        u, prev = new, u
        if change <= tol * boundary:
            report.converged = True
            break
        if change < best:
            best, stalled = change, 0
        else:
            stalled += 1
        if stalled >= _STALL_SWEEPS and change <= _STALL_LEVEL * np.max(np.abs(u)):
            polished = _march(0.5 * (u + prev), s, model_n, alpha, boundary)
            report.polish_change = float(np.max(np.abs(polished - u)))
            u = polished
            check = float(np.max(np.abs(_T(u, s, model_n, alpha, boundary) - u)))
            report.sweep_changes.append(check)
            report.roundoff_floor = True
            report.converged = check <= max(tol * boundary, _POLISH_CHECK * np.max(np.abs(u)))
            break
    report.iterations = k
    if not report.converged:
        raise ConvergenceError(
            f"Picard iteration did not converge in {max_iter} sweeps (n={model_n.n}, delta={delta})",
            report.sup_norm_residual,
        )
    theta = grid.extended_nodes()
    below = theta.size - s.size
    phi = np.empty((theta.size, model_n.num_states))
    phi[:below] = boundary
    phi[below:] = u
    meta = {
        "n": model_n.n,
        "delta": delta,
        "iterations": report.iterations,
        "sup_norm_residual": report.sup_norm_residual,
        "grid": grid,
        "alpha": alpha,
    }
    return ValueField(theta, phi, meta), report


def contraction_bound(n, delta, q_bar, alpha, m):
    """``beta = [-2 q_bar log(delta) + n (1 - delta)]^m / (alpha^m m!)`` and the least m with beta < 1."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    m = check_count(m, "m")
    bracket = -2.0 * q_bar * math.log(delta) + n * (1.0 - delta)

    def beta_of(j):
        if bracket == 0:
            return 0.0
        return math.exp(j * math.log(bracket / alpha) - math.lgamma(j + 1))

    m_star = 1
    while beta_of(m_star) >= 1:
        m_star += 1
    return beta_of(m), m_star


def empirical_contraction(changes, m, floor=0.0):
    """Ratios ``changes[k + m] / changes[k]`` for sweeps whose change exceeds ``floor``."""
    d = np.asarray(changes, dtype=float)
    if d.size <= m:
        return np.array([])
    num, den = d[m:], d[:-m]
    keep = (den > floor) & (num > floor)
    return num[keep] / den[keep]


def max_theta_slope(phi):
    """Largest ``|phi(theta_i) - phi(theta_j)| / |theta_i - theta_j|`` per state.

    Adjacent nodes attain the maximum over all node pairs.
    """
    slopes = np.abs(np.diff(phi.phi, axis=0)) / np.diff(phi.theta)[:, None]
    return slopes.max(axis=0)


def default_delta_list(delta_max=0.1, delta_min=1e-3):
    """Halving from ``delta_max`` until the first value at or below ``delta_min``."""
    out = [delta_max]
    while out[-1] > delta_min:
        out.append(out[-1] / 2)
    return out


def default_n_list(model, cert):
    """Doubling from ``max(2, ceil(median V0))`` until one level past ``max V0``."""
    v0 = cert.V0_on(model.space)
    n = max(2, math.ceil(float(np.median(v0))))
    out = [n]
    while out[-1] < v0.max():
        out.append(out[-1] * 2)
    out.append(out[-1] * 2)
    return out


def _extrapolate(psi_prev, psi_cur, d_prev, d_cur, theta):
    out = psi_cur + d_cur / (d_prev - d_cur) * (psi_cur - psi_prev)
    partial = theta < d_prev * (1 - 1e-12)
    out[partial] = psi_cur[partial]
    return out


def solve_hjb(
    model,
    cert,
    delta_list=None,
    n_list=None,
    grid=None,
    tol=1e-4,
    picard_tol=1e-12,
    max_iter=10_000,
):
    """Approximate the untruncated value by the double limit delta -> 0, n -> infinity.

    ``tol`` is relative to the field scale and governs both outer loops; each
    stops early once successive limit estimates differ by less than it.
    Returns the final field on ``grid.nodes`` and an :class:`HJBReport` with the
    monotonicity, Lipschitz and enclosure monitors.
    """
    cert.require(model.alpha)
    alpha = model.alpha
    if grid is None:
        grid = ThetaGrid.uniform(201)
    if delta_list is None:
        delta_list = default_delta_list()
    if n_list is None:
        n_list = default_n_list(model, cert)
    deltas = check_schedule(delta_list, "delta_list", increasing=False)
    levels = check_schedule(n_list, "n_list", increasing=True)
    if deltas[0] >= 1 or deltas[-1] <= 0:
        raise ValueError("delta_list must lie in (0, 1)")
    check_positive(tol, "tol")
    nodes = grid.nodes
    report = HJBReport(list(map(float, deltas)), list(map(float, levels)))
    mono_tol = 10 * tol

    limit_prev = None
    limit = None
    for n in levels:
        model_n = truncate(model, cert, n)
        raw_prev = psi_prev = est_prev = None
        diffs = []
        report.delta_converged[float(n)] = False
        lip_n = truncated_lipschitz_constant(n, alpha)
        for k, delta in enumerate(deltas):
            fld, sub = solve_truncated(model_n, grid.with_delta(delta), picard_tol, max_iter)
            report.iterations += sub.iterations
            report.solves += 1
            report.truncated_reports.append(sub)
            raw = fld.restrict(nodes)
            report.lipschitz_truncated_ratio = max(
                report.lipschitz_truncated_ratio, float(max_theta_slope(raw).max() / lip_n)
            )
            psi = raw.phi / sub.boundary_value
            if raw_prev is None:
                est = psi
            else:
                viol = float(np.max(raw.phi - raw_prev)) / raw_prev.max()
                report.delta_monotone_violation = max(report.delta_monotone_violation, viol)
                if viol > mono_tol:
                    raise MonotonicityError(
                        f"truncated value increased as delta decreased to {delta} (n={n}): {viol:.3g}"
                    )
                est = _extrapolate(psi_prev, psi, deltas[k - 1], delta, nodes)
                if k >= 2:
                    # est_prev is extrapolated only above deltas[k - 2]
                    both = nodes >= deltas[k - 2] * (1 - 1e-12)
                    diff = float(np.max(np.abs(est - est_prev)[both])) / est.max()
                    diffs.append(diff)
                    if diff <= tol and deltas[k - 1] <= nodes[1]:
                        report.delta_converged[float(n)] = True
                        break
            raw_prev, psi_prev, est_prev = raw.phi, psi, est
        report.delta_diffs[float(n)] = diffs
        if not report.delta_converged[float(n)]:
            warnings.warn(
                f"delta schedule exhausted at n={n} without reaching tol={tol}", ConvergenceWarning
            )
        limit = est
        log.debug("n=%s: %d delta levels", n, len(diffs) + 2)
        if limit_prev is not None:
            viol = float(np.max(limit_prev - limit)) / limit.max()
            report.n_monotone_violation = max(report.n_monotone_violation, viol)
            if viol > mono_tol:
                raise MonotonicityError(f"limit value decreased as n increased to {n}: {viol:.3g}")
            diff = float(np.max(np.abs(limit - limit_prev))) / limit.max()
            report.n_diffs.append(diff)
            if diff <= tol:
                report.n_converged = True
                break
        limit_prev = limit
    if not report.n_converged:
        warnings.warn(f"n schedule exhausted without reaching tol={tol}", ConvergenceWarning)

    final = ValueField(
        nodes.copy(),
        limit,
        {"n": float(n), "delta": 0.0, "iterations": report.iterations, "alpha": alpha, "grid": grid},
    )
    coords = model.space.coords
    upper = value_upper_bound(cert, alpha, nodes[:, None], coords[None, :])
    scale_eps = 1e-12 * limit.max()
    report.lower_bound_violations = int(np.sum(limit < 1 - scale_eps))
    report.upper_bound_violations = int(np.sum(limit > upper + scale_eps))
    report.lipschitz_limit_ratio = float(
        np.max(max_theta_slope(final) / second_moment_bound(cert, alpha, coords))
    )
    report.residual = residual(final, model)
    final.meta["sup_norm_residual"] = report.residual
    return final, report


def extract_policy(phi, model, alpha=None, tie_tol=1e-10):
    """Pointwise argmin of the HJB objective; ties go to the lowest action index."""
    obj = hjb_objective(phi, model)
    best = obj.min(axis=2)
    u = phi.phi
    scale = (model.q_star[None, :] + phi.theta[:, None] * model.cost.max(axis=1)[None, :] + 1.0) * np.abs(u)
    chosen = np.argmax(obj <= (best + tie_tol * scale)[:, :, None], axis=2)
    return PolicyField(phi.theta.copy(), chosen, {"alpha": _model_alpha(model, alpha)})


def residual(phi, model, alpha=None, exclude_quantile=0.0):
    """Max over interior theta nodes of ``|alpha theta d(phi)/d(theta) - min_a objective|``."""
    alpha = _model_alpha(model, alpha)
    lhs = alpha * phi.theta[:, None] * phi.derivative()
    rhs = hjb_objective(phi, model).min(axis=2)
    r = np.abs(lhs - rhs)[1:-1]
    if r.size == 0:
        return 0.0
    if exclude_quantile > 0:
        return float(np.quantile(r, 1.0 - exclude_quantile))
    return float(r.max())
