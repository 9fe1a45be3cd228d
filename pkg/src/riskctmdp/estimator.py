"""scikit-learn style front end for the HJB solver."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count, check_positive
from .hjb import ThetaGrid, extract_policy, solve_hjb
from .lyapunov import LyapunovCertificate
from .model import CTMDPModel


class HJBSolver(BaseEstimator):
    """Fit the optimal value and policy of a CTMDP; predict actions at ``(theta, state)`` pairs.

    ``fit`` takes the model and its Lyapunov certificate in place of the usual
    ``(X, y)``. ``predict`` and ``predict_value`` take an array with columns
    ``theta`` and ``state_index``.
    """

    def __init__(
        self,
        theta_nodes=201,
        delta_list=None,
        n_list=None,
        tol=1e-4,
        picard_tol=1e-12,
        max_iter=10_000,
        tie_tol=1e-10,
    ):
        self.theta_nodes = theta_nodes
        self.delta_list = delta_list
        self.n_list = n_list
        self.tol = tol
        self.picard_tol = picard_tol
        self.max_iter = max_iter
        self.tie_tol = tie_tol

    def fit(self, model, certificate):
        if not isinstance(model, CTMDPModel):
            raise TypeError(f"model must be a CTMDPModel, got {type(model).__name__}")
        if not isinstance(certificate, LyapunovCertificate):
            raise TypeError("certificate must be a LyapunovCertificate")
        check_count(self.theta_nodes, "theta_nodes", minimum=3)
        check_positive(self.tol, "tol")
        check_positive(self.picard_tol, "picard_tol")
        grid = ThetaGrid.uniform(self.theta_nodes)
        self.value_, self.report_ = solve_hjb(
            model, certificate, self.delta_list, self.n_list, grid,
            tol=self.tol, picard_tol=self.picard_tol, max_iter=self.max_iter,
        )
        self.policy_ = extract_policy(self.value_, model, tie_tol=self.tie_tol)
        self.n_states_ = model.num_states
        return self

    def _query(self, X):
        check_is_fitted(self, "value_")
        X = check_array(X, dtype=float, ensure_min_samples=1)
        if X.shape[1] != 2:
            raise ValueError(f"expected columns (theta, state_index), got {X.shape[1]} columns")
        theta, state = X[:, 0], X[:, 1]
        if np.any((theta < 0) | (theta > 1)):
            raise ValueError("theta must lie in [0, 1]")
        idx = state.astype(np.int64)
        if np.any(idx != state) or np.any((idx < 0) | (idx >= self.n_states_)):
            raise ValueError(f"state_index must be integers in [0, {self.n_states_})")
        return theta, idx

    def predict(self, X):
        """Optimal action index at the nearest theta node."""
        theta, idx = self._query(X)
        return self.policy_.actions[self.policy_.nearest_node(theta), idx]

    def predict_value(self, X):
        """Optimal value, linear in theta between nodes."""
        theta, idx = self._query(X)
        return np.array([self.value_.interpolate(t, x) for t, x in zip(theta, idx)])
