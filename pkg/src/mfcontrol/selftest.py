"""Seconds-long oracle checks behind ``mfcontrol selftest``."""
from __future__ import annotations

import numpy as np

from mfcontrol.hjb_solver import solve_full_state, solve_VN
from mfcontrol.model import quadratic_preset, quadratic_hamiltonian, search_hamiltonian
from mfcontrol.simulator import multinomial_check


def _two_thirds():
    # u' = u^2 / 2, u(1) = 1 gives u(0) = 2/3 from the state with terminal cost 1
    spec = quadratic_preset(2, terminal=[{"kind": "constant", "b": [0.0, 1.0]}])
    V = solve_VN(spec, 1, dt=1e-3).values[0]
    err = abs(V[1] - 2.0 / 3.0) + abs(V[0])
    return "riccati oracle", err < 1e-9, f"err={err:.2e}"


def _hamiltonian_lattice():
    spec = quadratic_preset(2, running=[{"kind": "affine", "c": [[0.3, -0.2], [0.1, 0.4]]}])
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        i = int(rng.integers(2))
        m = rng.dirichlet(np.ones(2))
        z = rng.uniform(-2, 2, size=2)
        z[i] = 0.0
        h, _ = quadratic_hamiltonian(spec, i, m, z)
        hs, _ = search_hamiltonian(spec, 0.0, i, m, z, lattice=1001)
        worst = max(worst, abs(float(h) - float(hs)))
    return "hamiltonian lattice", worst <= 1e-5, f"max diff={worst:.2e}"


def _equivalence():
    spec = quadratic_preset(2, running=[{"kind": "quadratic", "kappa": 1.0, "center": [0.3, 0.7]}],
                            terminal=[{"kind": "affine", "c": [[0.0, 1.0], [1.0, 0.0]]}])
    full = solve_full_state(spec, 3)
    VN = solve_VN(spec, 3)
    counts = np.stack([np.bincount(x, minlength=2) for x in full.profiles])
    worst = float(np.max(np.abs(full.values - VN.values[:, VN.grid.index(counts)])))
    return "full-state identity", worst <= 1e-6, f"max diff={worst:.2e}"


def _multinomial():
    res = multinomial_check([0.5, 0.5], 100, samples=10_000, seed=0)
    return "multinomial bound", res.passed, f"mean={res.mean:.4f} bound={res.bound:.4f}"


def run_selftest() -> list:
    return [check() for check in (_two_thirds, _hamiltonian_lattice, _equivalence, _multinomial)]
