import math

import numpy as np
import pytest

from conftest import flat_certificate, rate_model
from riskctmdp.hjb import PolicyField, ThetaGrid, extract_policy, solve_truncated
from riskctmdp.model import truncate
from riskctmdp.verify import (
    CheckReport,
    MarchingError,
    crosscheck_feynman_kac,
    oracle_fixed_policy,
    richardson_grid_error,
    run_analytic_suite,
)


@pytest.fixture(scope="module")
def two_state_solved(two_state):
    m_n = truncate(*two_state, 5)
    grid = ThetaGrid.uniform(201, delta=0.01)
    phi, _ = solve_truncated(m_n, grid)
    return m_n, grid, phi


class TestFeynmanKac:
    def test_zero_cost_exact(self):
        m = rate_model([[[-1.0, 1.0]], [[2.0, -2.0]]], np.zeros((2, 1)))
        m_n = truncate(m, flat_certificate(0.0), 3)
        phi, _ = solve_truncated(m_n, ThetaGrid.uniform(51, delta=0.05))
        rep = crosscheck_feynman_kac(m_n, phi, 1.0, 0.05, 0, 500, seed=1, num_random=2)
        assert rep.passed
        for r in rep:
            assert r.lhs == 0.0

    def test_single_state_closed_form(self):
        m_n = truncate(rate_model(np.zeros((1, 1, 1)), [[1.0]]), flat_certificate(1.0), 1)
        phi, _ = solve_truncated(m_n, ThetaGrid.uniform(201, delta=0.1))
        assert phi.interpolate(1.0, 0) == pytest.approx(math.e, rel=1e-4)
        rep = crosscheck_feynman_kac(m_n, phi, 1.0, 0.1, 0, 100, seed=1, num_random=1)
        assert rep.passed

    def test_two_state(self, two_state_solved):
        m_n, grid, phi = two_state_solved
        rep = crosscheck_feynman_kac(m_n, phi, 1.0, 0.01, 0, 20_000, seed=5, num_random=3)
        assert rep.passed, rep.failures()
        assert [r.check_id for r in rep][0] == "fk_optimal:x0=0"

    def test_detects_wrong_value(self, two_state_solved):
        m_n, grid, phi = two_state_solved
        wrong = type(phi)(phi.theta, phi.phi * 1.05, dict(phi.meta))
        rep = crosscheck_feynman_kac(m_n, wrong, 1.0, 0.01, 0, 20_000, seed=5, num_random=0, grid_error=0.0)
        assert not rep.passed

    def test_delta_mismatch(self, two_state_solved):
        m_n, _, phi = two_state_solved
        with pytest.raises(ValueError):
            crosscheck_feynman_kac(m_n, phi, 1.0, 0.02, 0, 10, seed=0)

    def test_richardson_error_small(self, two_state_solved):
        m_n, grid, _ = two_state_solved
        assert 0 < richardson_grid_error(m_n, grid, 1.0, 0) < 1e-4


class TestOracle:
    def test_minimizer_matches_solver(self, two_state_solved):
        m_n, grid, phi = two_state_solved
        pol = extract_policy(phi, m_n)
        u = oracle_fixed_policy(m_n, pol, grid)
        np.testing.assert_array_equal(u.theta, phi.theta)
        assert np.max(np.abs(u.phi - phi.phi)) <= 1e-4
        assert u.meta["march_gap"] <= 1e-8 * u.phi.max()

    def test_dominated_policy(self, two_state_solved):
        m_n, grid, phi = two_state_solved
        # the constant selector that is never optimal in state 1 at theta = 1
        pol = extract_policy(phi, m_n)
        worse = PolicyField.constant(1 - pol.actions[-1])
        u = oracle_fixed_policy(m_n, worse, grid)
        assert np.all(u.phi >= phi.phi - 1e-4)
        assert np.max(u.at(1.0) - phi.at(1.0)) > 1e-3

    def test_zero_cost(self):
        m = rate_model([[[-1.0, 1.0]], [[2.0, -2.0]]], np.zeros((2, 1)))
        m_n = truncate(m, flat_certificate(0.0), 2)
        u = oracle_fixed_policy(m_n, PolicyField.constant([0, 0]), ThetaGrid.uniform(21, delta=0.1))
        np.testing.assert_allclose(u.phi, math.exp(0.2), rtol=1e-13)

    def test_step_halving_guard(self, two_state_solved):
        m_n, grid, phi = two_state_solved
        with pytest.raises(MarchingError):
            oracle_fixed_policy(m_n, extract_policy(phi, m_n), grid, dtau=2.0, march_tol=1e-17)


class TestAnalyticSuite:
    @pytest.mark.parametrize("alpha", [1.0, 2.0])
    def test_passes(self, alpha):
        rep = run_analytic_suite(alpha=alpha)
        assert rep.passed, rep.failures()
        assert {r.check_id for r in rep} == {
            "analytic:zero_cost", "analytic:constant_cost", "analytic:theta_zero", "analytic:gaussian_enclosure"
        }

    def test_report_rows(self):
        rep = CheckReport()
        rep.add("a", 1.0, 2.0)
        rep.add("b", 3.0, 2.0)
        assert not rep.passed and [r.check_id for r in rep.failures()] == ["b"]
        assert rep.rows()[0] == ("a", 1.0, 2.0, 1.0, True)


def test_verify_battery_three_initial_states(tmp_path):
    from riskctmdp.cli import verify_config
    from riskctmdp.config import load_config

    cfg = load_config("fixture:gaussian_small", output_dir=tmp_path)
    rep = verify_config(cfg, threads=2)
    assert rep.passed, rep.failures()
    starts = {r.check_id.split(":")[1] for r in rep if r.check_id.startswith("fk_optimal")}
    assert starts == {"x0=40", "x0=60", "x0=80"}
