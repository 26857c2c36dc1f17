"""Local-chart Hamiltonians, the adjoint (Pontryagin) system along an optimal
flow, and the consistency check against the associated mean field game."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from mfcontrol.hjb_solver import rk4_backward
from mfcontrol.limit_mfcp import FlowTrajectory
from mfcontrol.model import ProblemSpec, clamp_rate, hamiltonian_field

FD_STEP = 1e-5
BOUNDARY_TOL = 1e-6


class UnsupportedModelError(ValueError):
    """The check needs structure (split cost, flag B) the problem lacks."""


def from_chart_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, 1.0 - x.sum(axis=-1, keepdims=True)], axis=-1)


def chart_z(w: np.ndarray) -> np.ndarray:
    """z-vectors for every state: Z[..., i, :] = (w, 0) - (w, 0)_i."""
    w = np.asarray(w, dtype=float)
    wh = np.concatenate([w, np.zeros(w.shape[:-1] + (1,))], axis=-1)
    return wh[..., None, :] - wh[..., :, None]


def chart_hamiltonian(spec: ProblemSpec, t: float, x, w):
    """Aggregated chart Hamiltonian and the per-state values H-hat^i.

    ``x`` and ``w`` have shape (d-1,) or a common batch shape (..., d-1).
    Returns (aggregate, per_state) with shapes (...) and (..., d).
    """
    m = from_chart_array(x)
    Z = chart_z(w)
    lead = m.shape[:-1]
    H, _ = hamiltonian_field(spec, t, m.reshape(-1, spec.d), Z.reshape(-1, spec.d, spec.d))
    H = H.reshape(lead + (spec.d,))
    return np.sum(m * H, axis=-1), H


def chart_hamiltonian_grad_x(spec: ProblemSpec, t: float, x, w, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient in x of the aggregated chart Hamiltonian."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = step
        hp, _ = chart_hamiltonian(spec, t, x + e, w)
        hm, _ = chart_hamiltonian(spec, t, x - e, w)
        out[..., j] = (hp - hm) / (2 * step)
    return out


def _chart_grad(model, m: np.ndarray) -> np.ndarray:
    g = model.aggregate_grad(m)
    return g[..., :-1] - g[..., -1:]


def _chart_grad_fd(fun, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = step
        out[..., j] = (fun(from_chart_array(x + e)) - fun(from_chart_array(x - e))) / (2 * step)
    return out


def terminal_chart_gradient(spec: ProblemSpec, x) -> np.ndarray:
    """D_x G-hat, closed form for cost-model presets, else central differences."""
    if spec.terminal_model is not None:
        return _chart_grad(spec.terminal_model, from_chart_array(x))
    from mfcontrol.model import aggregate_G

    return _chart_grad_fd(lambda m: aggregate_G(spec, m), x)


def running_base_chart_gradient(spec: ProblemSpec, x) -> np.ndarray:
    """D_x F-hat_0 with F_0(m) = sum_i m_i f_0^i(m)."""
    if spec.running_base is None:
        raise UnsupportedModelError("running cost does not split into control and mean-field parts")
    return _chart_grad(spec.running_base, from_chart_array(x))


@dataclass
class AdjointPath:
    times: np.ndarray
    w: np.ndarray
    x: np.ndarray

    def to_csv(self, path) -> None:
        k = self.w.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"x_{j + 1}" for j in range(k)] + [f"w_{j + 1}" for j in range(k)])
            for t, x, w in zip(self.times, self.x, self.w):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in w])


def _require_flag_b(spec: ProblemSpec):
    if spec.flag not in ("B", "C"):
        raise UnsupportedModelError("adjoint checks need a flag-B problem")


def solve_adjoint(spec: ProblemSpec, flow: FlowTrajectory, step: float = FD_STEP) -> AdjointPath:
    """Integrate dw/dt = D_x H-hat(t, x_t, w_t) backward from w_T = D_x G-hat(x_T)."""
    _require_flag_b(spec)
    x_knots = flow.mu[:, :-1]
    if np.min(flow.mu) < BOUNDARY_TOL:
        raise ValueError("trajectory touches the chart boundary")

    def x_at(t):
        return np.array([np.interp(t, flow.times, x_knots[:, j]) for j in range(x_knots.shape[1])])

    def rhs(t, w):
        return chart_hamiltonian_grad_x(spec, t, x_at(t), w, step)

    w_T = terminal_chart_gradient(spec, x_knots[-1])
    w = rk4_backward(rhs, w_T, flow.times)
    return AdjointPath(flow.times.copy(), w, x_knots.copy())


def adjoint_gap(adjoint: AdjointPath, ref, interpolate: bool = True) -> float:
    """sup_t |w_t - D_x V-hat(t, x_t)| against a ReferenceValue."""
    m = from_chart_array(adjoint.x)
    grads = np.array([ref.chart_gradient(t, mk, interpolate) for t, mk in zip(adjoint.times, m)])
    return float(np.max(np.linalg.norm(adjoint.w - grads, axis=1)))


# -- mean field game view -------------------------------------------------------

@dataclass
class MfgCouplings:
    """Potential-game couplings: f^i - f^d = D_{x_i} F-hat_0, g^i - g^d = D_{x_i} G-hat,
    with the last state's couplings set to zero."""

    spec: ProblemSpec

    def running(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        g = running_base_chart_gradient(self.spec, m[..., :-1])
        return np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1)

    def terminal(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        g = terminal_chart_gradient(self.spec, m[..., :-1])
        return np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1)


def control_hamiltonian(spec: ProblemSpec, Z: np.ndarray) -> np.ndarray:
    """H_0^i(z) = max_a {-<Q_{i,.}(a), z> - l^i(a)} for every state; Z is (..., d, d)."""
    if not spec.closed_form:
        raise UnsupportedModelError("mfg residual needs the split quadratic preset")
    Z = np.asarray(Z, dtype=float)
    mask = spec.mask
    a = clamp_rate(-Z, spec.actions.M) * mask
    return np.sum(mask * (-a * Z - 0.5 * a * a), axis=-1)


def build_u(spec: ProblemSpec, adjoint: AdjointPath) -> np.ndarray:
    """Per-state MFG values from the adjoint: u^d solves
    -du^d/dt + H_0^d((w, 0)) = 0 with u^d_T = 0, and u^j = w^j + u^d."""
    if not spec.closed_form:
        raise UnsupportedModelError("mfg residual needs the split quadratic preset")
    Z = chart_z(adjoint.w)
    h_last = control_hamiltonian(spec, Z)[:, -1]
    # u^d(t) = -int_t^T h_last
    tail = cumulative_trapezoid(h_last[::-1], -adjoint.times[::-1], initial=0.0)[::-1]
    u_last = -tail
    u = np.concatenate([adjoint.w + u_last[:, None], u_last[:, None]], axis=1)
    return u


def mfg_residual(spec: ProblemSpec, u: np.ndarray, flow: FlowTrajectory) -> float:
    """max over knots and states of |-du^i/dt + H_0^i((u^j - u^i)_j) - f^i(mu_t)|."""
    if not spec.closed_form:
        raise UnsupportedModelError("mfg residual needs the split quadratic preset")
    du = np.gradient(u, flow.times, axis=0, edge_order=2)
    Z = u[:, None, :] - u[:, :, None]
    H0 = control_hamiltonian(spec, Z)
    f = MfgCouplings(spec).running(flow.mu)
    return float(np.max(np.abs(-du + H0 - f)))
