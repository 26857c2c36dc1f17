import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mfcontrol import FullStateSolver, MeanFieldReference, NAgentHJBSolver


def test_params_and_clone():
    est = NAgentHJBSolver(n_agents=6, thin=2)
    assert est.get_params()["n_agents"] == 6
    other = clone(est).set_params(n_agents=9)
    assert other.n_agents == 9 and est.n_agents == 6


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        NAgentHJBSolver().predict([[0.5, 0.5]])


def test_fit_predict(smooth_d2):
    est = NAgentHJBSolver(n_agents=4).fit(smooth_d2)
    out = est.predict([[0.5, 0.5], [1.0, 0.0]])
    assert out.shape == (2,)
    assert out[0] == est.field_.values[0, est.grid_.index([2, 2])]
    with pytest.raises(ValueError):
        est.predict([[0.6, 0.6]])
    space, time = est.lipschitz()
    assert space > 0 and time > 0


def test_full_state_agrees_with_grid_solver(smooth_d2):
    full = FullStateSolver(n_agents=3).fit(smooth_d2)
    grid = NAgentHJBSolver(n_agents=3).fit(smooth_d2)
    v = full.predict([[0, 1, 1], [1, 0, 1]])
    assert v[0] == pytest.approx(v[1], abs=1e-12)
    assert v[0] == pytest.approx(grid.predict([[1 / 3, 2 / 3]])[0], abs=1e-9)


def test_reference_transform(smooth_d2):
    ref = MeanFieldReference(n_ref=64, scheme="central").fit(smooth_d2)
    flow = ref.transform([0.5, 0.5])
    assert flow.mu.shape[1] == 2 and np.allclose(flow.mu.sum(axis=1), 1)
    assert ref.gradient([[0.5, 0.5]]).shape == (1, 2, 2)
