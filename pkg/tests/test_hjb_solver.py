import numpy as np
import pytest

from mfcontrol.hjb_solver import (
    CACHE_MAGIC,
    DivergenceError,
    ValueField,
    auto_steps,
    extract_feedback,
    measure_lipschitz,
    solve_full_state,
    solve_JN,
    solve_VN,
)
from mfcontrol.limit_mfcp import OpenLoopControl
from mfcontrol.model import aggregate_G, quadratic_preset
from mfcontrol.simplex_grid import SimplexGrid


def test_riccati_two_thirds():
    # one player, terminal cost 1 in state 2: u' = u^2/2, u(1) = 1, u(0) = 2/3
    spec = quadratic_preset(2, terminal=[{"kind": "constant", "b": [0.0, 1.0]}])
    V = solve_VN(spec, 1)
    start = V.values[0, V.grid.index([0, 1])]
    assert start == pytest.approx(2.0 / 3.0, abs=1e-6)
    assert V.values[0, V.grid.index([1, 0])] == 0


def test_riccati_step_halving_is_fourth_order():
    spec = quadratic_preset(2, terminal=[{"kind": "constant", "b": [0.0, 1.0]}])
    errs = [abs(solve_VN(spec, 1, dt=h).values[0, 1] - 2.0 / 3.0) for h in (0.25, 0.125, 0.0625)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(8 <= r <= 32 for r in ratios), ratios


def test_zero_cost_is_zero(zero_cost_d2):
    V = solve_VN(zero_cost_d2, 5)
    assert np.all(V.values == 0)


def test_m_independent_costs_give_linear_value():
    spec = quadratic_preset(3, terminal=[{"kind": "constant", "b": [0.0, 1.0, 0.4]}])
    ref = solve_VN(spec, 1).values[0]
    for N in (2, 4, 7):
        V = solve_VN(spec, N)
        assert np.allclose(V.values[0], V.grid.coords @ ref, atol=1e-6)


def test_no_control_integrates_costs():
    run = [{"kind": "quadratic", "kappa": 1.0, "center": [0.2, 0.8]}]
    term = [{"kind": "affine", "c": [[1.0, 0.0], [0.0, 2.0]]}]
    spec = quadratic_preset(2, M=0.0, running=run, terminal=term, T=2.0)
    V = solve_VN(spec, 6)
    m = V.grid.coords
    expect = aggregate_G(spec, m) + 2.0 * spec.running_base.aggregate(m)
    assert np.allclose(V.values[0], expect, atol=1e-12)


def test_auto_steps():
    assert auto_steps(1.0, 64, 1.0, 3) == 768
    assert auto_steps(1.0, 8, 0.0, 2) == 1


def test_equivalence_with_full_state(smooth_d3):
    full = solve_full_state(smooth_d3, 2)
    VN = solve_VN(smooth_d3, 2)
    counts = np.stack([np.bincount(x, minlength=3) for x in full.profiles])
    assert np.max(np.abs(full.values - VN.values[:, VN.grid.index(counts)])) <= 1e-9


def test_full_state_cap(smooth_d2):
    with pytest.raises(ValueError, match="cap"):
        solve_full_state(smooth_d2, 20)


def test_non_finite_terminal_raises():
    spec = quadratic_preset(2, terminal=[{"kind": "constant", "b": [np.nan, 0.0]}])
    with pytest.raises(DivergenceError):
        solve_VN(spec, 3)


def test_time_interpolation_and_call(smooth_d2):
    V = solve_VN(smooth_d2, 4)
    mid = 0.5 * (V.times[3] + V.times[4])
    assert np.allclose(V.at_time(mid), 0.5 * (V.values[3] + V.values[4]))
    assert V(0.0, [0.5, 0.5]) == V.values[0, V.grid.index([2, 2])]


def test_cache_round_trip(tmp_path, smooth_d2):
    V = solve_VN(smooth_d2, 6, thin=4)
    path = tmp_path / "v.mfcvf"
    V.save(path)
    raw = path.read_bytes()
    assert raw.startswith(CACHE_MAGIC) and raw[len(CACHE_MAGIC)] == 1
    W = ValueField.load(path)
    assert W.N == 6 and np.array_equal(W.values, V.values) and np.array_equal(W.times, V.times)


def test_cache_rejects_foreign_files(tmp_path):
    bad = tmp_path / "x.bin"
    bad.write_bytes(b"garbage")
    with pytest.raises(ValueError, match="not a value-field"):
        ValueField.load(bad)
    wrong = tmp_path / "y.bin"
    wrong.write_bytes(CACHE_MAGIC + bytes([99]))
    with pytest.raises(ValueError, match="version"):
        ValueField.load(wrong)


def test_csv_dump(tmp_path, smooth_d2):
    V = solve_VN(smooth_d2, 2, dt=0.5)
    path = tmp_path / "v.csv"
    V.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,index,k_1,k_2,value"
    assert len(lines) == 1 + 3 * 3


def test_feedback_is_argmax_of_grid_gradient(smooth_d2):
    V = solve_VN(smooth_d2, 8)
    policy = extract_feedback(smooth_d2, V)
    p = V.grid.index([3, 5])
    Z = V.grid.discrete_gradient(V.values[0])[p]
    a = policy(0.0, np.array([0, 1]), np.tile(V.grid.coords[p], (2, 1)))
    expect = np.clip(-Z, 0, 1) * (1 - np.eye(2))
    assert np.allclose(a, expect)


def test_fixed_control_cost_dominates_value(smooth_d2):
    V = solve_VN(smooth_d2, 8)
    for rate in (0.0, 0.3, 1.0):
        ctl = OpenLoopControl.constant(rate * (1 - np.eye(2)), smooth_d2.T)
        J = solve_JN(smooth_d2, ctl, 8)
        assert np.all(J.values[0] >= V.values[0] - 1e-9)


def test_fixed_control_zero_rates_integrates_costs():
    run = [{"kind": "quadratic", "kappa": 2.0, "center": [0.2, 0.8]}]
    spec = quadratic_preset(2, running=run)
    J = solve_JN(spec, OpenLoopControl.constant(np.zeros((2, 2)), 1.0), 5)
    assert np.allclose(J.values[0], spec.running_base.aggregate(J.grid.coords), atol=1e-12)


def test_lipschitz_of_linear_field():
    spec = quadratic_preset(2, terminal=[{"kind": "constant", "b": [0.0, 1.0]}], M=0.0)
    space, time = measure_lipschitz(solve_VN(spec, 10))
    assert space == pytest.approx(1.0 / np.sqrt(2))
    assert time == 0


def test_thin_keeps_endpoints(smooth_d2):
    V = solve_VN(smooth_d2, 4, thin=5)
    assert V.times[0] == 0 and V.times[-1] == pytest.approx(1.0)


def test_grid_cap_is_enforced(smooth_d2):
    from mfcontrol.simplex_grid import GridSizeError

    with pytest.raises(GridSizeError):
        solve_VN(smooth_d2, 50, max_points=10)
