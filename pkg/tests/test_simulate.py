import math

import numpy as np
import pytest
from scipy import integrate

import riskctmdp.simulate as simulate
from conftest import flat_certificate, rate_model
from riskctmdp.hjb import PolicyField, extract_policy, solve_hjb
from riskctmdp.lyapunov import drift_bound, second_moment_bound, value_upper_bound
from riskctmdp.model import truncate
from riskctmdp.simulate import (
    ExplosionError,
    MarkovControl,
    estimate_exp_moment,
    estimate_J,
    estimate_state_moment,
    estimate_truncated_functional,
    sample_trajectory,
    simulate_batch,
)


def stationary(actions, alpha=1.0, theta0=1.0):
    return MarkovControl(PolicyField.constant(actions), theta0, alpha)


def single_state(cost, alpha=1.0):
    return rate_model(np.zeros((1, len(cost), 1)), [cost], alpha)


class TestThinning:
    def test_absorbing_state_never_jumps(self):
        m = rate_model([[[0.0, 0.0]], [[1.0, -1.0]]], np.zeros((2, 1)))
        res = simulate_batch(m, stationary([0, 0]), 0, 100.0, 500, seed=1)
        assert np.all(res["jumps"] == 0) and np.all(res["final"] == 0)
        traj = sample_trajectory(m, stationary([0, 0]), 0, 100.0, seed=1)
        assert traj.jump_times.tolist() == [0.0] and traj.states.tolist() == [0]

    def test_exponential_sojourn(self):
        m = rate_model([[[-1.0, 1.0]], [[0.0, 0.0]]], np.zeros((2, 1)))
        n = 100_000
        res = simulate_batch(m, stationary([0, 0]), 0, 60.0, n, seed=7)
        assert np.all(np.isfinite(res["first_jump"]))
        assert abs(res["first_jump"].mean() - 1.0) <= 3 / math.sqrt(n)

    def test_full_rate_accepts_every_candidate(self):
        m = rate_model([[[-2.0, 2.0]], [[0.5, -0.5]]], np.zeros((2, 1)))
        res = simulate_batch(m, stationary([0, 0]), 0, 5.0, 2000, seed=3)
        np.testing.assert_array_equal(res["candidates"], res["jumps"] + 1)

    def test_thinning_rejects_slow_action(self):
        rates = np.array([[[-2.0, 2.0], [-0.5, 0.5]], [[1.0, -1.0], [1.0, -1.0]]])
        m = rate_model(rates, np.zeros((2, 2)))
        res = simulate_batch(m, stationary([1, 0]), 0, 60.0, 50_000, seed=5)
        # the sojourn in state 0 under the slow action is Exp(0.5)
        assert abs(res["first_jump"].mean() - 2.0) <= 3 * 2.0 / math.sqrt(50_000)
        assert np.all(res["candidates"] >= res["jumps"] + 1)

    def test_explosion_cap(self):
        m = rate_model([[[-50.0, 50.0]], [[50.0, -50.0]]], np.zeros((2, 1)))
        with pytest.raises(ExplosionError):
            simulate_batch(m, stationary([0, 0]), 0, 10.0, 4, seed=0, jump_cap=20)


class TestCostIntegral:
    def test_switching_control_matches_quadrature(self):
        alpha = 0.7
        m = single_state([0.3, 1.9], alpha)
        pol = PolicyField([0.0, 0.3, 0.6, 1.0], [[0], [1], [0], [1]])
        ctl = MarkovControl(pol, 0.95, alpha)
        horizon = 6.0
        f = lambda t: math.exp(-alpha * t) * m.cost[0, ctl.action(t, 0)]
        times, _ = ctl.schedule()
        brk = [t for t in times if 0 < t < horizon]
        exact, _ = integrate.quad(f, 0, horizon, points=brk, epsabs=1e-14, limit=200)
        traj = sample_trajectory(m, ctl, 0, horizon, seed=0)
        assert traj.cost_integral == pytest.approx(exact, rel=1e-10)

    def test_schedule_switch_times(self):
        pol = PolicyField([0.0, 0.5, 1.0], [[0], [1], [0]])
        starts, nodes = MarkovControl(pol, 1.0, 2.0).schedule()
        np.testing.assert_allclose(starts, [0.0, math.log(1 / 0.75) / 2, math.log(1 / 0.25) / 2])
        assert nodes.tolist() == [2, 1, 0]


class TestTruncatedFunctional:
    def test_closed_form(self):
        m_n = truncate(single_state([1.0]), flat_certificate(1.0), 1)
        est = estimate_truncated_functional(m_n, PolicyField.constant([0]), 1.0, 0.1, 0, 100, seed=0)
        assert est.mean == pytest.approx(math.e, rel=1e-13) and est.std_error == 0

    def test_theta_equals_delta(self, two_state):
        m_n = truncate(*two_state, 5)
        est = estimate_truncated_functional(m_n, PolicyField.constant([0, 1]), 0.3, 0.3, 0, 50, seed=0)
        assert est.horizon_used == 0 and est.mean == math.exp(5 * 0.3) and est.std_error == 0

    def test_zero_cost(self):
        m = rate_model([[[-1.0, 1.0]], [[2.0, -2.0]]], np.zeros((2, 1)))
        m_n = truncate(m, flat_certificate(0.0), 2)
        est = estimate_truncated_functional(m_n, PolicyField.constant([0, 0]), 1.0, 0.05, 0, 200, seed=0)
        assert est.mean == pytest.approx(math.exp(0.1), rel=1e-15) and est.std_error == 0

    def test_delta_above_theta(self, two_state):
        with pytest.raises(ValueError):
            estimate_truncated_functional(truncate(*two_state, 5), PolicyField.constant([0, 0]), 0.2, 0.3, 0, 5, seed=0)


class TestJ:
    def test_small_theta(self, two_state):
        model, cert = two_state
        est = estimate_J(model, PolicyField.constant([0, 1]), 1e-6, 0, 2000, seed=1, cert=cert)
        assert abs(est.J_tilde.mean - 1) <= 2e-6

    def test_constant_cost(self, constant_cost):
        model, cert = constant_cost
        est = estimate_J(model, PolicyField.constant([0, 1, 0]), 1.0, 1, 1000, seed=2, cert=cert)
        assert abs(est.J_log - 0.5) <= 1e-3
        assert est.J_tilde.std_error == 0

    def test_matches_solver(self, two_state):
        model, cert = two_state
        phi, _ = solve_hjb(model, cert)
        pol = extract_policy(phi, model)
        est = estimate_J(model, pol, 1.0, 0, 100_000, seed=11, cert=cert, threads=2)
        value = phi.at(1.0)[0]
        assert abs(est.J_tilde.mean - value) <= 3 * est.J_tilde.std_error + 1e-4 * value + 1e-4


    @pytest.mark.parametrize("theta", [0.2, 1.0])
    def test_enclosure(self, two_state, theta):
        model, cert = two_state
        for x0, acts in ((0, [0, 0]), (1, [1, 0])):
            est = estimate_J(model, PolicyField.constant(acts), theta, x0, 20_000, seed=x0, cert=cert)
            samples = simulate_batch(model, stationary(acts, theta0=theta), x0, 2.0, 500, seed=1)["integral"]
            assert np.all(np.exp(theta * samples) >= 1.0) and est.J_tilde.mean >= 1.0
            bound = value_upper_bound(cert, model.alpha, theta, model.space.coords[x0])
            assert est.J_tilde.mean <= bound + 3 * est.J_tilde.std_error


class TestMoments:
    @pytest.mark.parametrize("name", ["two_state", "gaussian_small"])
    def test_bounds(self, request, name):
        model, cert = request.getfixturevalue(name)
        rng = np.random.default_rng(0)
        ctl = stationary(rng.integers(0, model.num_actions, model.num_states), model.alpha)
        x0 = model.num_states // 2
        x = model.space.coords[x0]
        times = np.array([0.25, 1.0, 3.0])
        v0 = cert.V0_on(model.space)
        for t, est in zip(times, estimate_state_moment(model, ctl, x0, times, v0, 10_000, seed=4)):
            assert est.mean <= drift_bound(cert, t, x) + 3 * est.std_error
        horizon = simulate.tail_horizon(model, 1.0, 1e-6, cert)
        est = estimate_exp_moment(model, ctl, x0, horizon, 10_000, seed=5)
        assert est.mean <= second_moment_bound(cert, model.alpha, x) + 3 * est.std_error


class TestDeterminism:
    def test_threads_and_chunks(self, two_state, monkeypatch):
        model, _ = two_state
        ctl = stationary([1, 0])
        a = simulate_batch(model, ctl, 0, 4.0, 10_000, seed=99, threads=1)
        b = simulate_batch(model, ctl, 0, 4.0, 10_000, seed=99, threads=4)
        monkeypatch.setattr(simulate, "CHUNK", 333)
        c = simulate_batch(model, ctl, 0, 4.0, 10_000, seed=99, threads=3)
        for k in ("integral", "jumps", "final"):
            np.testing.assert_array_equal(a[k], b[k])
            np.testing.assert_array_equal(a[k], c[k])

    def test_single_trajectory_matches_batch(self, two_state):
        model, _ = two_state
        ctl = MarkovControl(PolicyField([0.0, 0.5, 1.0], [[0, 0], [1, 1], [0, 1]]), 1.0, model.alpha)
        batch = simulate_batch(model, ctl, 1, 3.0, 20, seed=8)
        for i in (0, 7, 19):
            tr = sample_trajectory(model, ctl, 1, 3.0, seed=8, index=i)
            assert tr.cost_integral == batch["integral"][i]
            assert tr.states[-1] == batch["final"][i] and tr.states.size - 1 == batch["jumps"][i]
            assert np.all(np.diff(tr.jump_times) > 0)

    def test_seed_changes_paths(self, two_state):
        model, _ = two_state
        a = simulate_batch(model, stationary([0, 0]), 0, 4.0, 100, seed=1)
        b = simulate_batch(model, stationary([0, 0]), 0, 4.0, 100, seed=2)
        assert not np.array_equal(a["integral"], b["integral"])

    def test_rejects_mismatched_policy(self, two_state):
        with pytest.raises(ValueError):
            simulate_batch(two_state[0], stationary([0, 2]), 0, 1.0, 10, seed=0)
        with pytest.raises(ValueError):
            simulate_batch(two_state[0], stationary([0, 0], alpha=2.0), 0, 1.0, 10, seed=0)
