import math

import numpy as np
import pytest
from scipy.stats import binom

from mfcontrol.hjb_solver import FeedbackPolicy, extract_feedback, solve_VN
from mfcontrol.limit_mfcp import OpenLoopControl, optimal_trajectory, reference_value, solve_fokker_planck
from mfcontrol.model import quadratic_preset
from mfcontrol.simulator import (
    LANE_ACCEPT,
    LANE_CLOCK,
    MajorantError,
    SimConfig,
    counter_uniform,
    estimate_sup_distance,
    iid_counts,
    multinomial_check,
    simulate_coupled_particles,
    simulate_empirical,
)


def test_counter_uniform_is_a_pure_function():
    a = counter_uniform(7, np.arange(5), 3, 11, LANE_CLOCK)
    b = counter_uniform(7, np.arange(5), 3, 11, LANE_CLOCK)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, counter_uniform(7, np.arange(5), 3, 11, LANE_ACCEPT))
    assert not np.array_equal(a, counter_uniform(8, np.arange(5), 3, 11, LANE_CLOCK))


def test_counter_uniform_moments():
    u = counter_uniform(1, 0, 0, np.arange(200_000), LANE_CLOCK)
    assert np.all((u > 0) & (u < 1))
    assert abs(u.mean() - 0.5) < 4 * math.sqrt(1 / 12 / u.size)
    assert abs(np.corrcoef(u[:-1], u[1:])[0, 1]) < 0.01


def test_no_rates_no_events():
    spec = quadratic_preset(2, M=0.0)
    ens = simulate_empirical(spec, OpenLoopControl.constant(np.zeros((2, 2)), 1.0), SimConfig(N=4, paths=3), [0.5, 0.5])
    assert all(len(ev) == 0 for ev in ens.events)


def test_fixed_start_must_be_on_grid(smooth_d2):
    ctl = OpenLoopControl.constant(np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError, match="grid"):
        simulate_empirical(smooth_d2, ctl, SimConfig(N=4, paths=1), [0.3, 0.7])
    with pytest.raises(ValueError):
        simulate_empirical(smooth_d2, ctl, SimConfig(N=4, paths=1), [0.5, 0.5], initial="nope")


class _TooFast(FeedbackPolicy):
    d = 2

    def __call__(self, t, i, m):
        return np.full(np.shape(m), 5.0)


def test_majorant_violation_is_detected(smooth_d2):
    with pytest.raises(MajorantError):
        simulate_empirical(smooth_d2, _TooFast(), SimConfig(N=4, paths=5), [0.5, 0.5])


def test_counts_stay_on_the_grid(smooth_d2):
    ref = reference_value(smooth_d2, 32)
    flow, pol = optimal_trajectory(smooth_d2, ref, [0.5, 0.5])
    ens = simulate_empirical(smooth_d2, pol, SimConfig(N=6, paths=20, seed=3), [0.5, 0.5])
    for p in range(ens.paths):
        _, counts = ens.count_path(p)
        assert np.all(counts >= 0) and np.all(counts.sum(axis=1) == 6)


def test_mean_matches_the_flow_for_open_loop_rates():
    # with rates independent of m the agents are independent, so E mu^N_t = mu_t
    spec = quadratic_preset(3)
    alpha = np.array([[0, 0.8, 0.1], [0.3, 0, 0.5], [0.2, 0.6, 0]])
    ctl = OpenLoopControl.constant(alpha, 1.0)
    m0 = np.array([0.5, 0.25, 0.25])
    flow = solve_fokker_planck(spec, ctl, m0)
    ens = simulate_empirical(spec, ctl, SimConfig(N=8, paths=4000, seed=11), m0)
    mu_T = ens.knot_measures([1.0])[:, 0]
    se = mu_T.std(axis=0, ddof=1) / math.sqrt(len(mu_T))
    assert np.all(np.abs(mu_T.mean(axis=0) - flow.mu[-1]) < 4 * se)


def test_iid_counts_law():
    draws = np.stack([iid_counts([0.2, 0.8], 10, 5, p) for p in range(5000)])
    assert draws.sum(axis=1).tolist() == [10] * 5000
    assert abs(draws[:, 0].mean() - 2.0) < 4 * math.sqrt(1.6 / 5000)


def test_coupled_systems_agree_when_rates_ignore_m():
    spec = quadratic_preset(2)
    alpha = np.array([[0, 0.7], [0.4, 0]])
    ctl = OpenLoopControl.constant(alpha, 1.0)
    flow = solve_fokker_planck(spec, ctl, [0.5, 0.5])
    res = simulate_coupled_particles(spec, ctl, ctl, flow, SimConfig(N=10, paths=5, seed=2))
    assert np.all(res["mismatch_fraction"] == 0) and np.all(res["particle_sup"] == 0)
    for p in range(5):
        assert np.array_equal(res["X"].events[p], res["Xt"].events[p])
        assert np.array_equal(res["X"].events[p], res["Y"].events[p])


def test_coupled_results_do_not_depend_on_threads(smooth_d2):
    ref = reference_value(smooth_d2, 64)
    flow, pol = optimal_trajectory(smooth_d2, ref, [0.5, 0.5])
    pN = extract_feedback(smooth_d2, solve_VN(smooth_d2, 8))
    runs = [simulate_coupled_particles(smooth_d2, pN, pol, flow, SimConfig(N=8, paths=12, seed=9, threads=k))
            for k in (1, 4)]
    for name in ("X", "Y", "Xt"):
        for a, b in zip(runs[0][name].events, runs[1][name].events):
            assert np.array_equal(a, b)
    assert np.array_equal(runs[0]["particle_sup"], runs[1]["particle_sup"])


def test_sup_distance_of_a_static_chain():
    spec = quadratic_preset(2, M=0.0)
    ctl = OpenLoopControl.constant(np.zeros((2, 2)), 1.0)
    flow = solve_fokker_planck(spec, ctl, [0.5, 0.5])
    ens = simulate_empirical(spec, ctl, SimConfig(N=4, paths=3), [0.75, 0.25])
    mean, se = estimate_sup_distance(ens, flow)
    assert mean == pytest.approx(math.sqrt(2) * 0.25) and se == 0


def test_multinomial_matches_binomial_enumeration():
    res = multinomial_check([0.5, 0.5], 100, samples=10_000, seed=1)
    k = np.arange(101)
    exact = float(np.sum(binom.pmf(k, 100, 0.5) * math.sqrt(2) * np.abs(k / 100 - 0.5)))
    assert abs(res.mean - exact) <= 3 * res.stderr
    assert res.passed


def test_multinomial_needs_samples():
    with pytest.raises(ValueError):
        multinomial_check([0.5, 0.5], 10, samples=10)


def test_event_rows(smooth_d2):
    ctl = OpenLoopControl.constant(np.full((2, 2), 0.5), 1.0)
    ens = simulate_empirical(smooth_d2, ctl, SimConfig(N=4, paths=2, seed=1), [0.5, 0.5])
    rows = list(ens.event_rows())
    assert len(rows) == sum(len(e) for e in ens.events)
    assert all(r[2] == -1 for r in rows)
