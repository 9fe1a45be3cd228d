"""CTMDP model containers, the Gaussian jump builder and (n)-truncation.

A model lives on a finite list of states. Two kernel representations are
supported:

* :class:`RateMatrix` -- an explicit signed rate row ``q(.|x, a)`` for every
  state-action pair.
* :class:`IntensityJump` -- a jump intensity ``lambda(x, a)`` together with
  a jump distribution over the grid; the signed kernel is
  ``lambda(x, a) * (P[x, .] - 1{x})``. The jump distribution may put mass on
  ``x`` itself (a discretisation artefact of continuum densities); such
  self-jumps do not move the process, so the effective exit rate is
  ``lambda(x, a) * (1 - P[x, x])``.

Arrays are laid out as ``[state, action, ...]``. Value fields are laid out
as ``[theta, state]``.
"""

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._validation import check_array, check_count, check_positive

log = logging.getLogger(__name__)

__all__ = [
    "Violation",
    "ValidationReport",
    "StateSpace",
    "ActionSet",
    "RateMatrix",
    "IntensityJump",
    "CTMDPModel",
    "TruncatedModel",
    "GridTooCoarseError",
    "build_gaussian_model",
    "validate_kernel",
    "truncate",
    "read_rate_csv",
]


class GridTooCoarseError(ValueError):
    """The state grid cannot resolve the Gaussian jump density."""


@dataclass(frozen=True)
class Violation:
    check_id: str
    state_index: int
    x: float
    action: int
    lhs: float
    rhs: float

    @property
    def margin(self):
        return self.rhs - self.lhs


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def by_check(self, check_id):
        return [v for v in self.violations if v.check_id == check_id]

    def rows(self):
        return [(v.check_id, v.x, v.action, v.lhs, v.rhs, v.margin) for v in self.violations]


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Ordered finite state list with coordinates and quadrature weights."""

    coords: np.ndarray
    weights: np.ndarray
    labels: tuple = None

    def __post_init__(self):
        coords = check_array(self.coords, "coords")
        if coords.ndim != 1 or coords.size == 0:
            raise ValueError("coords must be a nonempty 1-d array")
        weights = check_array(self.weights, "weights", shape=coords.shape)
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be > 0")
        if np.unique(coords).size != coords.size:
            raise ValueError("state coordinates must be distinct")
        labels = self.labels
        if labels is None:
            labels = tuple(str(i) for i in range(coords.size))
        elif len(labels) != coords.size:
            raise ValueError("labels must match the number of states")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "labels", tuple(labels))

    @classmethod
    def finite(cls, num_states, coords=None, labels=None):
        num_states = check_count(num_states, "num_states")
        if coords is None:
            coords = np.arange(num_states, dtype=float)
        return cls(np.asarray(coords, dtype=float), np.ones(num_states), labels)

    @classmethod
    def uniform_grid(cls, x_min, x_max, num_states):
        """Uniform nodes with trapezoid weights summing to ``x_max - x_min``."""
        num_states = check_count(num_states, "num_states", minimum=2)
        if not (np.isfinite(x_min) and np.isfinite(x_max) and x_min < x_max):
            raise ValueError(f"grid bounds must be finite with x_min < x_max, got {x_min}, {x_max}")
        coords = np.linspace(x_min, x_max, num_states)
        h = (x_max - x_min) / (num_states - 1)
        weights = np.full(num_states, h)
        weights[[0, -1]] = h / 2
        return cls(coords, weights)

    @property
    def size(self):
        return self.coords.size

    def index_of(self, x):
        """Index of the state nearest to coordinate ``x``."""
        return int(np.argmin(np.abs(self.coords - x)))


@dataclass(frozen=True, eq=False)
class ActionSet:
    """``params[x, a]`` is the real parameter of action ``a`` at state ``x``."""

    params: np.ndarray

    def __post_init__(self):
        params = check_array(self.params, "action params")
        if params.ndim != 2 or params.shape[1] == 0:
            raise ValueError("every state needs a nonempty action list")
        object.__setattr__(self, "params", params)

    @classmethod
    def indexed(cls, num_states, count):
        count = check_count(count, "actions per state")
        return cls(np.tile(np.arange(count, dtype=float), (num_states, 1)))

    @property
    def count(self):
        return self.params.shape[1]


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Explicit signed rates, ``rates[x, a, y] = q({y} | x, a)``."""

    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        if rates.ndim != 3 or rates.shape[0] != rates.shape[2]:
            raise ValueError(f"rates must have shape (N, K, N), got {rates.shape}")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def shape(self):
        return self.rates.shape[:2]

    @cached_property
    def exit_rates(self):
        n = self.rates.shape[0]
        idx = np.arange(n)
        return -self.rates[idx, :, idx]

    def dense(self):
        return self.rates

    def apply(self, u):
        """``(Q_a u)(x)`` for ``u`` of shape ``(T, N)``; returns ``(T, N, K)``."""
        return np.einsum("xay,ty->txa", self.rates, u, optimize=True)

    def apply_policy(self, actions):
        """Rate matrix ``(N, N)`` of the stationary selector ``actions[x]``."""
        n = self.rates.shape[0]
        return self.rates[np.arange(n), actions, :]

    def restrict(self, inside):
        rates = np.where(np.asarray(inside)[:, None, None], self.rates, 0.0)
        return RateMatrix(rates)


@dataclass(frozen=True, eq=False)
class IntensityJump:
    """Jump intensity ``intensity[x, a]`` and jump distribution ``jump_density[x, y]``."""

    intensity: np.ndarray
    jump_density: np.ndarray

    def __post_init__(self):
        lam = np.array(self.intensity, dtype=float)
        dens = np.array(self.jump_density, dtype=float)
        if lam.ndim != 2 or dens.shape != (lam.shape[0], lam.shape[0]):
            raise ValueError("intensity must be (N, K) and jump_density (N, N)")
        lam.setflags(write=False)
        dens.setflags(write=False)
        object.__setattr__(self, "intensity", lam)
        object.__setattr__(self, "jump_density", dens)

    @property
    def shape(self):
        return self.intensity.shape

    @cached_property
    def exit_rates(self):
        stay = np.diag(self.jump_density)
        return self.intensity * (1.0 - stay)[:, None]

    def dense(self):
        n = self.intensity.shape[0]
        rates = self.intensity[:, :, None] * self.jump_density[:, None, :]
        idx = np.arange(n)
        rates[idx, :, idx] -= self.intensity
        return rates

    def apply(self, u):
        moved = u @ self.jump_density.T - u
        return moved[:, :, None] * self.intensity[None, :, :]

    def apply_policy(self, actions):
        n = self.intensity.shape[0]
        lam = self.intensity[np.arange(n), actions]
        return lam[:, None] * (self.jump_density - np.eye(n))

    def restrict(self, inside):
        lam = np.where(np.asarray(inside)[:, None], self.intensity, 0.0)
        return IntensityJump(lam, self.jump_density)


@dataclass(frozen=True, eq=False)
class CTMDPModel:
    """State space, actions, kernel, cost rate ``cost[x, a]`` and discount ``alpha``."""

    space: StateSpace
    actions: ActionSet
    kernel: object
    cost: np.ndarray
    alpha: float

    def __post_init__(self):
        n = self.space.size
        if self.actions.params.shape[0] != n:
            raise ValueError("action set does not match the state space")
        if tuple(self.kernel.shape) != (n, self.actions.count):
            raise ValueError(
                f"kernel shape {tuple(self.kernel.shape)} does not match ({n}, {self.actions.count})"
            )
        cost = check_array(self.cost, "cost", shape=(n, self.actions.count), nonnegative=True)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "alpha", check_positive(self.alpha, "alpha"))

    @property
    def num_states(self):
        return self.space.size

    @property
    def num_actions(self):
        return self.actions.count

    @cached_property
    def exit_rates(self):
        return self.kernel.exit_rates

    @cached_property
    def q_star(self):
        """``q*(x) = max_a q_x(a)``."""
        return self.exit_rates.max(axis=1)


@dataclass(frozen=True, eq=False)
class TruncatedModel:
    """The level-``n`` truncation of ``base``; ``model`` holds the truncated rates and costs."""

    base: CTMDPModel
    n: float
    inside: np.ndarray
    model: CTMDPModel

    @property
    def kernel(self):
        return self.model.kernel

    @property
    def cost(self):
        return self.model.cost

    @property
    def alpha(self):
        return self.model.alpha

    @property
    def space(self):
        return self.model.space

    @property
    def actions(self):
        return self.model.actions

    @property
    def num_states(self):
        return self.model.num_states

    @property
    def num_actions(self):
        return self.model.num_actions

    @property
    def exit_rates(self):
        return self.model.exit_rates

    @property
    def q_star(self):
        return self.model.q_star

    @property
    def q_bar(self):
        """``max_{x, a}`` of the truncated exit rate."""
        return float(self.model.exit_rates.max())


def build_gaussian_model(
    sigma,
    M,
    lambda_spec,
    cost_spec,
    grid,
    actions_per_state,
    alpha=1.0,
    action_params=None,
    renorm_threshold=1e-3,
    tail_sigmas=5.0,
):
    """Discretise the Gaussian jump model on a uniform grid.

    ``lambda_spec(x, a)`` and ``cost_spec(x, a)`` are evaluated with ``x`` of
    shape ``(N, 1)`` and the action parameter ``a`` of shape ``(N, K)``
    (action index by default); both must broadcast to ``(N, K)``.

    Row ``x`` of the jump distribution is the normal density centred at ``x``
    evaluated at the nodes, times the quadrature weights, renormalised to
    mass one. Rows whose centre lies at least ``tail_sigmas`` standard
    deviations inside the grid must need a renormalisation factor within
    ``renorm_threshold`` of one, otherwise the grid is too coarse.
    """
    sigma = check_positive(sigma, "sigma")
    M = check_positive(M, "M")
    if isinstance(grid, StateSpace):
        space = grid
    else:
        space = StateSpace.uniform_grid(grid["x_min"], grid["x_max"], grid["num_states"])
    n = space.size
    k = check_count(actions_per_state, "actions_per_state")
    if action_params is None:
        actions = ActionSet.indexed(n, k)
    else:
        actions = ActionSet(np.broadcast_to(np.asarray(action_params, dtype=float), (n, k)))

    x = space.coords
    diff = x[None, :] - x[:, None]
    raw = np.exp(-0.5 * (diff / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma) * space.weights[None, :]
    mass = raw.sum(axis=1)
    resolved = (x - x[0] >= tail_sigmas * sigma) & (x[-1] - x >= tail_sigmas * sigma)
    if not resolved.any():
        raise GridTooCoarseError(
            f"grid [{x[0]}, {x[-1]}] is narrower than 2*{tail_sigmas} sigma; no row resolves the jump tails"
        )
    worst = float(np.max(np.abs(mass[resolved] - 1.0)))
    if worst > renorm_threshold:
        raise GridTooCoarseError(
            f"renormalisation factor deviates from 1 by {worst:.3g} > {renorm_threshold} on interior rows"
        )
    log.debug("gaussian grid: worst interior renormalisation deviation %.3g", worst)
    density = raw / mass[:, None]

    xs = x[:, None]
    lam = np.broadcast_to(np.asarray(lambda_spec(xs, actions.params), dtype=float), (n, k)).copy()
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise ValueError("lambda_spec must be finite and > 0 on the grid")
    cap = M * (x**2 + 1)
    over = lam.max(axis=1) - cap
    if np.any(over > 1e-12 * cap):
        i = int(np.argmax(over))
        raise ValueError(
            f"lambda_spec exceeds M(x^2+1) at x={x[i]}: {lam[i].max()} > {cap[i]}"
        )
    cost = np.broadcast_to(np.asarray(cost_spec(xs, actions.params), dtype=float), (n, k)).copy()
    return CTMDPModel(space, actions, IntensityJump(lam, density), cost, alpha)


def validate_kernel(model, tol=None):
    """Conservativity, off-diagonal sign and stability checks, as data."""
    if tol is None:
        tol = 1e-5 if isinstance(model.kernel, IntensityJump) else 1e-8
    rates = model.kernel.dense()
    n, k = rates.shape[:2]
    coords = model.space.coords
    report = ValidationReport()
    row_sums = rates.sum(axis=2)
    idx = np.arange(n)
    off = rates.copy()
    off[idx, :, idx] = 0.0
    q_star = model.q_star
    for x in range(n):
        for a in range(k):
            s = row_sums[x, a]
            if not np.isfinite(s) or abs(s) > tol:
                report.violations.append(Violation("conservative", x, coords[x], a, abs(s), tol))
            neg = off[x, a].min()
            if neg < -tol:
                report.violations.append(Violation("off_diagonal", x, coords[x], a, -neg, tol))
        if not np.isfinite(q_star[x]):
            report.violations.append(Violation("stable", x, coords[x], -1, np.inf, np.finfo(float).max))
    if isinstance(model.kernel, IntensityJump):
        lam = model.kernel.intensity
        for x, a in zip(*np.nonzero(lam < 0)):
            report.violations.append(Violation("intensity", int(x), coords[x], int(a), -lam[x, a], 0.0))
    return report


def truncate(model, cert, n):
    """Zero the rates outside ``S_n = {V0 <= n}`` and cap the cost rate.

    Inside ``S_n`` the cost becomes ``min(c, n, rho1 log V0 + L0)``; outside
    it is zero.
    """
    n = check_positive(n, "n")
    if n < 1:
        raise ValueError(f"truncation level must be >= 1, got {n}")
    if isinstance(model, TruncatedModel):
        model = model.base
    v0 = cert.V0_on(model.space)
    inside = v0 <= n
    cap = np.minimum(n, cert.rho1 * np.log(v0) + cert.L0)
    cost = np.where(inside[:, None], np.minimum(model.cost, cap[:, None]), 0.0)
    truncated = CTMDPModel(model.space, model.actions, model.kernel.restrict(inside), cost, model.alpha)
    inside = np.array(inside)
    inside.setflags(write=False)
    return TruncatedModel(model, float(n), inside, truncated)


def read_rate_csv(path, num_actions):
    """Rates from CSV: one row per (state, action) pair, state-major, one column per state."""
    num_actions = check_count(num_actions, "num_actions")
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row and row[0].strip()]
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[0] % num_actions:
        raise ValueError(f"{path}: expected a multiple of {num_actions} rows, got {arr.shape[0]}")
    n = arr.shape[0] // num_actions
    if arr.shape[1] != n:
        raise ValueError(f"{path}: expected {n} columns per row, got {arr.shape[1]}")
    return arr.reshape(n, num_actions, n)
