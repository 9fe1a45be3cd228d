"""Cross-checks of solver output against independent routes.

* Monte Carlo of the truncated exponential functional under the extracted
  policy (and under random competitors, which may not do better).
* A linear RK4 march for a fixed policy, an ODE route that shares no code
  with the Picard solver beyond the model arrays.
* Analytically forced special cases.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_count, check_positive, check_state_index
from .hjb import PolicyField, ThetaGrid, ValueField, extract_policy, solve_hjb, solve_truncated
from .lyapunov import LyapunovCertificate, certify_gaussian
from .model import ActionSet, CTMDPModel, RateMatrix, StateSpace, build_gaussian_model
from .simulate import estimate_truncated_functional

log = logging.getLogger(__name__)

__all__ = [
    "CheckResult",
    "CheckReport",
    "MarchingError",
    "richardson_grid_error",
    "crosscheck_feynman_kac",
    "oracle_fixed_policy",
    "run_analytic_suite",
]


class MarchingError(RuntimeError):
    """RK4 results at step sizes ``h`` and ``h/2`` disagree."""


@dataclass
class CheckResult:
    check_id: str
    lhs: float
    rhs: float
    passed: bool

    @property
    def margin(self):
        return self.rhs - self.lhs


@dataclass
class CheckReport:
    results: list = field(default_factory=list)

    def add(self, check_id, lhs, rhs, passed=None):
        lhs, rhs = float(lhs), float(rhs)
        ok = lhs <= rhs if passed is None else bool(passed)
        self.results.append(CheckResult(check_id, lhs, rhs, ok))
        return ok

    def extend(self, other):
        self.results.extend(other.results)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]

    def __iter__(self):
        return iter(self.results)

    def __len__(self):
        return len(self.results)

    def rows(self):
        return [(r.check_id, r.lhs, r.rhs, r.margin, r.passed) for r in self.results]


def richardson_grid_error(model_n, grid, theta, x0, tol=1e-12, order=2):
    """Richardson estimate of the theta-grid error of ``phi_h`` at ``(theta, x0)``.

    Re-solves with every theta interval halved; for a method of the given
    order the error of ``phi_h`` is ``|phi_h - phi_{h/2}| / (1 - 2**-order)``.
    """
    coarse, _ = solve_truncated(model_n, grid, tol)
    fine, _ = solve_truncated(model_n, grid.refined(), tol)
    gap = abs(coarse.interpolate(theta, x0) - fine.interpolate(theta, x0))
    return gap / (1.0 - 2.0**-order)


def _random_policies(rng, num_states, num_actions, count):
    return [PolicyField.constant(rng.integers(0, num_actions, size=num_states)) for _ in range(count)]


def crosscheck_feynman_kac(
    model_n,
    phi,
    theta,
    delta,
    x0,
    num_traj,
    seed,
    grid_error=None,
    num_random=20,
    threads=1,
):
    """Compare ``phi^(n, delta)(theta, x0)`` with Monte Carlo of the truncated functional.

    The extracted policy must reproduce the value within ``3 SE + grid_error``;
    ``num_random`` random stationary policies must not beat it by more than
    ``3 SE + grid_error`` (the solver value itself carries the grid error,
    which matters when a path functional has no variance). A failing Monte Carlo check is rerun once with four times the
    samples before it is reported.
    """
    x0 = check_state_index(x0, model_n.num_states)
    num_traj = check_count(num_traj, "num_traj")
    if not math.isclose(phi.meta.get("delta", delta), delta, rel_tol=1e-12):
        raise ValueError(f"phi was solved with delta={phi.meta.get('delta')}, not {delta}")
    if phi.meta.get("n", model_n.n) != model_n.n:
        raise ValueError(f"phi was solved at n={phi.meta.get('n')}, not {model_n.n}")
    value = float(phi.interpolate(theta, x0))
    if grid_error is None:
        grid_error = richardson_grid_error(model_n, phi.meta["grid"], theta, x0)
    report = CheckReport()

    def mc(policy, n):
        return estimate_truncated_functional(model_n, policy, theta, delta, x0, n, seed, threads=threads)

    policy = extract_policy(phi, model_n)
    est = mc(policy, num_traj)
    if abs(value - est.mean) > 3 * est.std_error + grid_error:
        est = mc(policy, 4 * num_traj)
    report.add(f"fk_optimal:x0={x0}", abs(value - est.mean), 3 * est.std_error + grid_error)

    rng = np.random.default_rng(seed)
    for i, pol in enumerate(_random_policies(rng, model_n.num_states, model_n.num_actions, num_random)):
        est = mc(pol, num_traj)
        if est.mean < value - 3 * est.std_error - grid_error:
            est = mc(pol, 4 * num_traj)
        report.add(f"fk_infimum:x0={x0}:policy={i}", value - est.mean, 3 * est.std_error + grid_error)
    return report


def _rk4_segment(u, tau0, tau1, q, c, alpha, steps):
    h = (tau1 - tau0) / steps

    def f(tau, v):
        return (q @ v + math.exp(tau) * c * v) / alpha

    tau = tau0
    for _ in range(steps):
        k1 = f(tau, u)
        k2 = f(tau + h / 2, u + h / 2 * k1)
        k3 = f(tau + h / 2, u + h / 2 * k2)
        k4 = f(tau + h, u + h * k3)
        u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += h
    return u


def _march_policy(model_n, policy, alpha, targets, delta, dtau, refine=1):
    switch = 0.5 * (policy.theta[1:] + policy.theta[:-1])
    switch = switch[(switch > delta) & (switch < targets[-1])]
    knots = np.unique(np.concatenate([targets, switch]))
    states = np.arange(model_n.num_states)
    u = np.full(model_n.num_states, math.exp(model_n.n * delta / alpha))
    out = {knots[0]: u}
    for lo, hi in zip(knots[:-1], knots[1:]):
        node = policy.nearest_node(0.5 * (lo + hi))
        acts = policy.actions[node]
        q = model_n.kernel.apply_policy(acts)
        c = model_n.cost[states, acts]
        t0, t1 = math.log(lo), math.log(hi)
        steps = refine * max(1, math.ceil((t1 - t0) / dtau))
        u = _rk4_segment(u, t0, t1, q, c, alpha, steps)
        out[hi] = u
    return np.array([out[t] for t in targets])


def oracle_fixed_policy(model_n, policy, grid, alpha=None, dtau=0.02, march_tol=1e-8):
    """Value of a fixed selector from the linear theta-equation, by RK4 in ``log(theta)``.

    Solves ``alpha theta u' = Q_f u + theta c_f u`` from ``u(delta) = e^{n delta/alpha}``
    piece by piece between the policy's switching points, with step at most
    ``dtau`` in ``log(theta)``. The march is repeated with half the step and
    must agree within ``march_tol`` (relative). Returns a field on
    ``grid.extended_nodes()``, constant below ``delta``.
    """
    alpha = model_n.alpha if alpha is None else check_positive(alpha, "alpha")
    check_positive(dtau, "dtau")
    delta = grid.delta
    targets = grid.solve_nodes()
    coarse = _march_policy(model_n, policy, alpha, targets, delta, dtau)
    fine = _march_policy(model_n, policy, alpha, targets, delta, dtau, refine=2)
    gap = float(np.max(np.abs(fine - coarse)))
    if gap > march_tol * float(np.max(np.abs(fine))):
        raise MarchingError(f"RK4 step halving changed the result by {gap:.3g}")
    theta = grid.extended_nodes()
    below = theta.size - targets.size
    phi = np.empty((theta.size, model_n.num_states))
    phi[:below] = math.exp(model_n.n * delta / alpha)
    phi[below:] = fine
    meta = {"n": model_n.n, "delta": delta, "grid": grid, "alpha": alpha, "march_gap": gap}
    return ValueField(theta, phi, meta)


def _three_state(cost, alpha):
    rates = np.zeros((3, 2, 3))
    rates[:, 0] = [[-1.0, 0.5, 0.5], [1.0, -2.0, 1.0], [0.3, 0.7, -1.0]]
    rates[:, 1] = [[-0.2, 0.2, 0.0], [0.0, -0.1, 0.1], [2.0, 0.0, -2.0]]
    return CTMDPModel(StateSpace.finite(3), ActionSet.indexed(3, 2), RateMatrix(rates), cost, alpha)


def _flat_certificate(c0, alpha):
    def one(x):
        return np.ones_like(np.asarray(x, dtype=float))

    rho0 = 1.0
    return LyapunovCertificate(
        V0=one, V1=one, rho0=rho0, M0=2.0, L0=c0, rho1=0.5 * min(alpha, alpha**2 / rho0),
        rho2=0.5 * alpha, b1=0.0, M1=1.0,
    )


def run_analytic_suite(alpha=1.0, tol=1e-4, c0=1.0):
    """Zero cost, constant cost, the theta = 0 boundary and the Gaussian bound enclosure."""
    alpha = check_positive(alpha, "alpha")
    report = CheckReport()
    grid = ThetaGrid.uniform(201)

    zero = _three_state(np.zeros((3, 2)), alpha)
    phi0, _ = solve_hjb(zero, _flat_certificate(0.0, alpha), n_list=[2, 4], grid=grid)
    report.add("analytic:zero_cost", np.max(np.abs(phi0.phi - 1.0)), tol)

    const = _three_state(np.full((3, 2), c0), alpha)
    phic, _ = solve_hjb(const, _flat_certificate(c0, alpha), n_list=[2, 4], grid=grid)
    exact = np.exp(phic.theta[:, None] * c0 / alpha)
    report.add("analytic:constant_cost", np.max(np.abs(phic.phi / exact - 1.0)), tol)

    boundary = max(np.max(np.abs(phi0.phi[0] - 1.0)), np.max(np.abs(phic.phi[0] - 1.0)))
    report.add("analytic:theta_zero", boundary, 0.0)

    sigma, M, rho1 = 1.0, 6e-5, 0.5 * alpha
    cert = certify_gaussian(sigma, M, rho1, alpha)
    gauss = build_gaussian_model(
        sigma, M,
        lambda x, a: M * (x**2 + 1) * (1 - 0.3 * a),
        lambda x, a: rho1 * np.log1p(x**2) * (0.5 + 0.25 * a),
        {"x_min": -6.0, "x_max": 6.0, "num_states": 121},
        3, alpha=alpha,
    )
    _, rep = solve_hjb(gauss, cert, grid=grid)
    report.add("analytic:gaussian_enclosure", rep.lower_bound_violations + rep.upper_bound_violations, 0)
    return report
