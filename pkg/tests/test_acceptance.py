"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import binom

from mfcontrol import cli
from mfcontrol import experiments as ex
from mfcontrol.hjb_solver import extract_feedback, measure_lipschitz, solve_full_state, solve_VN
from mfcontrol.limit_mfcp import (
    OpenLoopControl,
    ReferenceFeedback,
    interior_lower_bound,
    optimal_trajectory,
    reference_value,
    solve_fokker_planck,
)
from mfcontrol.model import quadratic_hamiltonian, quadratic_preset, search_hamiltonian
from mfcontrol.pontryagin import AdjointPath, adjoint_gap, build_u, mfg_residual, solve_adjoint
from mfcontrol.simulator import multinomial_check

from conftest import smooth_running_d2, smooth_terminal_d2

pytestmark = pytest.mark.slow

SMOOTH_D2 = {"kind": "quadratic", "flag": "C", "running": smooth_running_d2(), "terminal": smooth_terminal_d2()}
SMOOTH_D3 = {
    "kind": "quadratic",
    "flag": "C",
    "running": [{"kind": "quadratic", "kappa": 1.0, "center": [0.5, 0.3, 0.2]}],
    "terminal": [
        {"kind": "quadratic", "kappa": 1.0, "center": [0.2, 0.3, 0.5]},
        {"kind": "constant", "b": [0.0, 0.3, 0.6]},
    ],
}
TRIG_D2 = {
    "kind": "quadratic",
    "flag": "A",
    "running": [{"kind": "trig", "beta": [1.0, -1.0], "gamma": 6.0, "c": [[1.0, 0.0], [1.0, 0.0]]}],
    "terminal": [{"kind": "trig", "beta": [0.5, 0.5], "gamma": 5.0, "c": [[0.0, 1.0], [1.0, 0.0]]}],
}


def config(preset, d, **kw):
    raw = {"preset": preset, "d": d, "m0": [1.0 / d] * d}
    raw.update(kw)
    return ex.ExperimentConfig.from_dict(raw)


def fmt(values):
    return "[" + ", ".join(f"{v:.4g}" for v in values) + "]"


def test_criterion_01_equivalence_identity(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    cases = [(config(SMOOTH_D2, 2), 2), (config(SMOOTH_D2, 2), 3), (config(SMOOTH_D3, 3), 2)]
    for cfg, N in cases:
        spec = cfg.build_spec()
        full = solve_full_state(spec, N)
        VN = solve_VN(spec, N)
        counts = np.stack([np.bincount(x, minlength=spec.d) for x in full.profiles])
        worst = max(worst, float(np.max(np.abs(full.values - VN.values[:, VN.grid.index(counts)]))))
    runtime = time.perf_counter() - t0
    ok = worst <= 1e-6 and runtime < 10
    criterion(1, ok, f"max |v^N - V^N| = {worst:.2e} (<= 1e-6), runtime {runtime:.1f}s (< 10s)")
    assert ok


def test_criterion_02_value_convergence(criterion):
    t0 = time.perf_counter()
    smooth = ex.run_convergence(config(SMOOTH_D3, 3, N_list=[4, 8, 16, 32, 64], N_ref=256))
    runtime = time.perf_counter() - t0
    trig = ex.run_convergence(config(TRIG_D2, 2, N_list=[4, 8, 16, 32, 64], N_ref=256))
    ok = smooth.passed and trig.passed and runtime < 600
    criterion(2, ok,
              f"d=3 flag C E_N={fmt(smooth.errors)} slope {smooth.slope:.3f}, runtime {runtime:.0f}s; "
              f"d=2 trig flag A slope {trig.slope:.3f} (<= -0.45, strictly decreasing)")
    assert ok


def test_criterion_03_epsilon_transfer(criterion):
    t0 = time.perf_counter()
    rep = ex.run_epsilon_transfer(config(SMOOTH_D2, 2, N_list=[8, 16, 32, 64], N_ref=512))
    runtime = time.perf_counter() - t0
    ok = (min(rep.errors) >= -1e-8 and ex.strictly_decreasing(rep.errors)
          and rep.slope <= -0.4 and runtime < 300)
    criterion(3, ok, f"gap_N={fmt(rep.errors)} slope {rep.slope:.3f} (<= -0.4), runtime {runtime:.0f}s")
    assert ok


def test_criterion_04_propagation_of_chaos(criterion):
    t0 = time.perf_counter()
    rep = ex.run_chaos(config(SMOOTH_D2, 2, N_list=[8, 32, 128], N_ref=512, paths=200, seed=0))
    runtime = time.perf_counter() - t0
    mism = rep.extras["mismatch_fraction"]
    ok = (ex.strictly_decreasing(rep.errors) and rep.slope <= -0.111
          and ex.strictly_decreasing(mism) and rep.extras["mismatch_slope"] <= -0.45 and runtime < 600)
    criterion(4, ok,
              f"E sup|mu^N - mu|={fmt(rep.errors)} slope {rep.slope:.3f} (<= -0.111); "
              f"mismatch={fmt(mism)} slope {rep.extras['mismatch_slope']:.3f} (<= -0.45); runtime {runtime:.0f}s")
    assert ok


def test_criterion_05_multinomial_bound(criterion):
    t0 = time.perf_counter()
    checks = []
    rng = np.random.default_rng(5)
    for d, N in ((2, 100), (3, 25), (5, 64)):
        m = rng.dirichlet(np.full(d, 4.0))
        checks.append(multinomial_check(m, N, samples=10_000, seed=d).passed)
    half = multinomial_check([0.5, 0.5], 100, samples=10_000, seed=1)
    k = np.arange(101)
    exact = float(np.sum(binom.pmf(k, 100, 0.5) * math.sqrt(2) * np.abs(k / 100 - 0.5)))
    match = abs(half.mean - exact) <= 3 * half.stderr
    runtime = time.perf_counter() - t0
    ok = all(checks) and half.passed and match and runtime < 30
    criterion(5, ok, f"bounds {checks}; d=2 N=100 MC {half.mean:.5f} vs exact {exact:.5f} "
                     f"(3 se = {3 * half.stderr:.5f}), runtime {runtime:.1f}s")
    assert ok


def test_criterion_06_interior_invariance(criterion):
    worst = np.inf
    rng = np.random.default_rng(6)
    for preset, d in ((SMOOTH_D2, 2), (SMOOTH_D3, 3), (TRIG_D2, 2)):
        spec = config(preset, d).build_spec()
        ref = reference_value(spec, 48 if d == 3 else 128)
        policies = [ReferenceFeedback(ref), extract_feedback(spec, solve_VN(spec, 12))]
        policies += [OpenLoopControl.constant(rng.uniform(0, spec.rate_bound, (d, d)), spec.T) for _ in range(3)]
        for m0 in rng.dirichlet(np.full(d, 0.7), size=4):
            floor = interior_lower_bound(spec, m0)
            for pol in policies:
                flow = solve_fokker_planck(spec, pol, m0)
                worst = min(worst, float(np.min(flow.mu.min(axis=0) - floor)))
    ok = worst >= -1e-8
    criterion(6, ok, f"min_t mu^i_t - mu^i_0 exp(-TM(d-1)) = {worst:.3e} (>= -1e-8)")
    assert ok


def test_criterion_07_discrete_derivative_error(criterion):
    spec = config(SMOOTH_D2, 2).build_spec()
    field = solve_VN(spec, 512, thin=8)
    errs = [ex.derivative_error(field, N) for N in (32, 64, 128)]
    ratios = [errs[1] / errs[0], errs[2] / errs[1]]
    ok = all(0.4 <= r <= 0.6 for r in ratios)
    criterion(7, ok, f"errors {fmt(errs)}, ratios {fmt(ratios)} (in [0.4, 0.6])")
    assert ok


def test_criterion_08_hamiltonian_oracle(criterion):
    spec = config(SMOOTH_D2, 2).build_spec()
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    worst = 0.0
    for i in (0, 1):
        n = 500
        m = rng.dirichlet(np.ones(2), size=n)
        z = rng.uniform(-2.0, 2.0, size=(n, 2))
        z[:, i] = 0.0
        closed, _ = quadratic_hamiltonian(spec, i, m, z)
        search, _ = search_hamiltonian(spec, rng.uniform(0, 1), i, m, z, lattice=1001)
        worst = max(worst, float(np.max(np.abs(closed - search))))
    runtime = time.perf_counter() - t0
    ok = worst <= 1e-5 and runtime < 5
    criterion(8, ok, f"max |closed - lattice| = {worst:.2e} over 1000 samples (<= 1e-5), runtime {runtime:.2f}s")
    assert ok


def test_criterion_09_pontryagin_consistency(criterion):
    spec = config(SMOOTH_D2, 2).build_spec()
    ref = reference_value(spec, 512, scheme="central")
    flow, _ = optimal_trajectory(spec, ref, [0.5, 0.5])
    adj = solve_adjoint(spec, flow)
    gap = adjoint_gap(adj, ref)
    resid = mfg_residual(spec, build_u(spec, adj), flow)
    w = adj.w.copy()
    w[len(w) // 2] += 0.1
    faulty = mfg_residual(spec, build_u(spec, AdjointPath(adj.times, w, adj.x)), flow)
    ok = gap <= 5e-3 and resid <= 1e-3 and faulty >= 0.05
    criterion(9, ok, f"sup|w - D_x V| = {gap:.2e} (<= 5e-3), residual {resid:.2e} (<= 1e-3), "
                     f"fault-injected residual {faulty:.3g} (>= 0.05)")
    assert ok


def test_criterion_10_determinism_and_lipschitz(criterion, tmp_path, monkeypatch):
    monkeypatch.setenv(ex.CACHE_ENV, str(tmp_path / "cache"))
    raw = {"preset": SMOOTH_D2, "d": 2, "m0": [0.5, 0.5], "N_list": [8, 32], "N_ref": 128, "paths": 25}
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(raw))
    outs = []
    for k in (1, 8):
        out = tmp_path / f"threads{k}"
        assert cli.main(["simulate", "--config", str(path), "--seed", "1234", "--threads", str(k),
                         "--out", str(out)]) == cli.EXIT_PASS
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    identical = outs[0] == outs[1] and len(outs[0]) == 7
    factors = []
    for preset, d in ((SMOOTH_D2, 2), (SMOOTH_D3, 3)):
        spec = config(preset, d).build_spec()
        L = np.array([measure_lipschitz(solve_VN(spec, N)) for N in (8, 16, 32, 64)])
        factors += list(L.max(axis=0) / L.min(axis=0))
    ok = identical and max(factors) <= 1.5
    criterion(10, ok, f"byte-identical across threads 1/8: {identical}; "
                      f"Lipschitz max/min over N in 8..64: {fmt(factors)} (<= 1.5)")
    assert ok
