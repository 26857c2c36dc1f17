"""Estimator-style wrappers around the solvers.

``fit`` takes a ProblemSpec and stores the solved field in trailing-underscore
attributes; ``predict`` evaluates it at simplex points. Hyperparameters live
in ``__init__`` so ``get_params``/``set_params``/``clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from mfcontrol.hjb_solver import extract_feedback, measure_lipschitz, solve_full_state, solve_VN
from mfcontrol.limit_mfcp import ReferenceFeedback, optimal_trajectory, reference_value
from mfcontrol.simplex_grid import DEFAULT_MAX_POINTS


def _check_simplex(m, d: int) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[-1] != d:
        raise ValueError(f"expected points with {d} coordinates, got {m.shape[-1]}")
    if np.any(m < -1e-9) or np.any(np.abs(m.sum(axis=-1) - 1) > 1e-9):
        raise ValueError("points must lie in the simplex")
    return m


class NAgentHJBSolver(BaseEstimator):
    """Value function V^N of the N-agent problem on S_d^N.

    Parameters
    ----------
    n_agents : int
        Resolution N of the grid.
    dt : float or None
        Time step; None uses T / ceil(4 T N M d).
    thin : int
        Keep every ``thin``-th time knot.
    max_points : int
        Grid size cap.
    """

    def __init__(self, n_agents=8, dt=None, thin=1, max_points=DEFAULT_MAX_POINTS):
        self.n_agents = n_agents
        self.dt = dt
        self.thin = thin
        self.max_points = max_points

    def fit(self, problem, y=None):
        self.problem_ = problem
        self.field_ = solve_VN(problem, self.n_agents, dt=self.dt, thin=self.thin,
                               max_points=self.max_points)
        self.grid_ = self.field_.grid
        self.policy_ = extract_feedback(problem, self.field_)
        return self

    def predict(self, m, t=0.0):
        """V^N(t, m) at the grid point nearest to each row of ``m``."""
        check_is_fitted(self, "field_")
        m = _check_simplex(m, self.grid_.d)
        return self.field_.at_time(t)[self.grid_.nearest_index(m)]

    def feedback(self, t, i, m):
        check_is_fitted(self, "policy_")
        return self.policy_(t, i, m)

    def lipschitz(self):
        check_is_fitted(self, "field_")
        return measure_lipschitz(self.field_)


class MeanFieldReference(BaseEstimator):
    """Fine-grid surrogate of the limit value function V."""

    def __init__(self, n_ref=256, dt=None, scheme="forward", max_points=DEFAULT_MAX_POINTS):
        self.n_ref = n_ref
        self.dt = dt
        self.scheme = scheme
        self.max_points = max_points

    def fit(self, problem, y=None):
        self.problem_ = problem
        self.reference_ = reference_value(problem, self.n_ref, dt=self.dt, scheme=self.scheme,
                                          max_points=self.max_points)
        self.policy_ = ReferenceFeedback(self.reference_)
        return self

    def predict(self, m, t=0.0):
        check_is_fitted(self, "reference_")
        m = _check_simplex(m, self.problem_.d)
        return self.reference_(t, m)

    def gradient(self, m, t=0.0):
        check_is_fitted(self, "reference_")
        return self.reference_.gradient(t, _check_simplex(m, self.problem_.d))

    def transform(self, m0, dt=None):
        """Optimal flow from m0 under the reference feedback."""
        check_is_fitted(self, "reference_")
        flow, _ = optimal_trajectory(self.problem_, self.reference_, m0, dt)
        return flow


class FullStateSolver(BaseEstimator):
    """Value function v^N on the product space {0..d-1}^N (small N only)."""

    def __init__(self, n_agents=2, dt=None):
        self.n_agents = n_agents
        self.dt = dt

    def fit(self, problem, y=None):
        self.problem_ = problem
        self.field_ = solve_full_state(problem, self.n_agents, dt=self.dt)
        return self

    def predict(self, x, t=0.0):
        """v^N(t, x) for integer profiles x (rows of states)."""
        check_is_fitted(self, "field_")
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        idx = (x * self.problem_.d ** np.arange(self.n_agents)).sum(axis=1)
        k = int(np.argmin(np.abs(self.field_.times - t)))
        return self.field_.values[k, idx]
