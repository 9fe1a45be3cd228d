import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from riskctmdp.estimator import HJBSolver
from riskctmdp.hjb import extract_policy, solve_hjb


@pytest.fixture(scope="module")
def fitted(two_state):
    return HJBSolver().fit(*two_state)


def test_params_round_trip():
    est = HJBSolver(theta_nodes=101, tol=1e-3)
    assert est.get_params()["theta_nodes"] == 101
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert est.set_params(tie_tol=1e-8).tie_tol == 1e-8


def test_not_fitted():
    with pytest.raises(NotFittedError):
        HJBSolver().predict([[0.5, 0]])


def test_matches_functional_api(fitted, two_state):
    phi, _ = solve_hjb(*two_state)
    pol = extract_policy(phi, two_state[0])
    X = np.array([[t, x] for t in phi.theta[::10] for x in (0, 1)])
    np.testing.assert_array_equal(fitted.predict(X), [pol.action(t, int(x)) for t, x in X])
    np.testing.assert_allclose(fitted.predict_value(X), [phi.interpolate(t, int(x)) for t, x in X], rtol=0, atol=0)
    assert fitted.report_.n_converged and fitted.n_states_ == 2


@pytest.mark.parametrize("X", [[[1.5, 0]], [[0.5, 2]], [[0.5, 0.5]], [[0.5, 0, 1]]])
def test_rejects_bad_queries(fitted, X):
    with pytest.raises(ValueError):
        fitted.predict(X)


def test_fit_type_checks(two_state):
    model, cert = two_state
    with pytest.raises(TypeError):
        HJBSolver().fit(cert, model)
    with pytest.raises(ValueError):
        HJBSolver(theta_nodes=2).fit(model, cert)
