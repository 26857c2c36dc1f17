"""The limiting mean field control problem: forward flow of the law, its
cost, a fine-grid reference value function and the induced optimal feedback."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from mfcontrol.hjb_solver import FeedbackPolicy, ValueField, _argmax_actions, solve_VN, time_grid
from mfcontrol.model import ProblemSpec, aggregate_G
from mfcontrol.simplex_grid import DEFAULT_MAX_POINTS

MASS_TOL = 1e-8


class IntegratorError(ArithmeticError):
    """Probability mass drifted during flow integration."""


@dataclass
class FlowTrajectory:
    """mu_t on a time grid with the rate matrices alpha(t) that generated it."""

    times: np.ndarray
    mu: np.ndarray
    alpha: np.ndarray

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def at(self, t) -> np.ndarray:
        """Linear interpolation of mu at time(s) t."""
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.times, self.mu[:, i]) for i in range(self.d)], axis=-1)

    def open_loop(self) -> "OpenLoopControl":
        return OpenLoopControl(self.times, self.alpha)

    def to_csv(self, path) -> None:
        d = self.d
        head = ["t"] + [f"mu_{i + 1}" for i in range(d)]
        head += [f"alpha_{i + 1}_{j + 1}" for i in range(d) for j in range(d) if i != j]
        off = ~np.eye(d, dtype=bool)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(head)
            for k, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(v)) for v in self.mu[k]]
                row += [repr(float(v)) for v in self.alpha[k][off]]
                writer.writerow(row)


class OpenLoopControl(FeedbackPolicy):
    """alpha(t) independent of m, piecewise constant from the left knot."""

    def __init__(self, times: np.ndarray, alpha: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.d = self.alpha.shape[-1]

    @classmethod
    def constant(cls, alpha, T: float) -> "OpenLoopControl":
        alpha = np.asarray(alpha, dtype=float)
        return cls(np.array([0.0, T]), np.stack([alpha, alpha]))

    def knot(self, t) -> np.ndarray:
        k = np.searchsorted(self.times, np.asarray(t, dtype=float) + 1e-12, side="right") - 1
        return np.clip(k, 0, len(self.times) - 1)

    def at(self, t) -> np.ndarray:
        return self.alpha[self.knot(t)]

    def __call__(self, t, i, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        i = np.broadcast_to(np.asarray(i, dtype=np.int64), m.shape[:-1])
        A = self.at(t)
        if np.ndim(t) == 0:
            return A[i]
        return A[np.arange(len(i)), i]


def _rate_matrix(spec: ProblemSpec, t: float, alpha: np.ndarray, mu: np.ndarray) -> np.ndarray:
    R = np.stack([np.asarray(spec.rate(t, i, alpha[i], mu), dtype=float) for i in range(spec.d)])
    np.fill_diagonal(R, 0.0)
    return R


def fokker_planck_rhs(spec: ProblemSpec, t: float, alpha: np.ndarray, mu: np.ndarray) -> np.ndarray:
    R = _rate_matrix(spec, t, alpha, mu)
    return mu @ R - mu * R.sum(axis=1)


def default_flow_steps(spec: ProblemSpec, minimum: int = 1000) -> int:
    return max(minimum, math.ceil(4.0 * spec.T * spec.rate_bound * spec.d))


def solve_fokker_planck(
    spec: ProblemSpec,
    policy: FeedbackPolicy,
    m0,
    dt: Optional[float] = None,
) -> FlowTrajectory:
    """RK4 integration of d mu^i/dt = sum_j (mu^j Q_{j,i} - mu^i Q_{i,j}).

    ``policy(t, i, m)`` supplies the actions; an OpenLoopControl ignores m.
    Mass is never rescaled: drift beyond 1e-8 raises IntegratorError.
    """
    m0 = np.asarray(m0, dtype=float)
    if m0.shape != (spec.d,) or np.any(m0 < -1e-12) or abs(m0.sum() - 1) > 1e-9:
        raise ValueError("m0 must lie in the simplex")
    n_steps = default_flow_steps(spec) if dt is None else max(1, math.ceil(spec.T / dt - 1e-9))
    times = time_grid(spec.T, n_steps)
    h = times[1] - times[0]
    if spec.rate_bound > 0 and h > 1.0 / (4 * spec.rate_bound * spec.d) + 1e-15:
        raise ValueError("dt exceeds 1/(4 M d)")
    states = np.arange(spec.d)

    def alpha_at(t, mu):
        return policy(t, states, np.broadcast_to(mu, (spec.d, spec.d)))

    def f(t, mu):
        return fokker_planck_rhs(spec, t, alpha_at(t, mu), mu)

    mu = np.empty((len(times), spec.d))
    alpha = np.empty((len(times), spec.d, spec.d))
    y = m0.copy()
    mu[0] = y
    for k in range(n_steps):
        t = times[k]
        alpha[k] = alpha_at(t, y)
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if abs(y.sum() - 1.0) > MASS_TOL:
            raise IntegratorError(f"mass drift {y.sum() - 1.0:.3e} at t={times[k + 1]:.6g}")
        mu[k + 1] = y
    alpha[-1] = alpha_at(times[-1], y)
    return FlowTrajectory(times, mu, alpha)


def flow_cost(spec: ProblemSpec, flow: FlowTrajectory) -> float:
    """Trapezoidal running cost plus terminal cost along a computed flow."""
    d = spec.d
    run = np.array([
        sum(mu[i] * float(spec.running_cost(t, i, a[i], mu)) for i in range(d))
        for t, mu, a in zip(flow.times, flow.mu, flow.alpha)
    ])
    return float(trapezoid(run, flow.times) + aggregate_G(spec, flow.mu[-1]))


def evaluate_cost_J(spec: ProblemSpec, control: FeedbackPolicy, m0, dt: Optional[float] = None) -> float:
    """J(alpha) = int sum_i mu^i f^i(t, alpha^i, mu) dt + sum_i mu^i_T g^i(mu_T)."""
    return flow_cost(spec, solve_fokker_planck(spec, control, m0, dt))


# -- reference value ----------------------------------------------------------

class ReferenceValue:
    """Fine-grid V^{N_ref} used as the surrogate of the limit value function.

    Off-grid points snap to the nearest grid point; times interpolate
    linearly between knots. ``scheme`` picks the gradient stencil:
    ``"forward"`` is D^{N_ref, i}, ``"central"`` averages the forward and
    backward moves where both exist.
    """

    def __init__(self, spec: ProblemSpec, field: ValueField, scheme: str = "forward"):
        if scheme not in ("forward", "central"):
            raise ValueError("scheme must be 'forward' or 'central'")
        self.spec = spec
        self.field = field
        self.grid = field.grid
        self.scheme = scheme

    @property
    def N_ref(self) -> int:
        return self.grid.N

    def __call__(self, t: float, m) -> np.ndarray | float:
        return self.field(t, m)

    def gradient_at_index(self, t, p) -> np.ndarray:
        """D^i_j V at grid indices p: array of shape p.shape + (d, d).

        ``t`` is a scalar or broadcasts with ``p``.
        """
        grid = self.grid
        p = np.asarray(p, dtype=np.int64)
        tb = np.broadcast_to(np.asarray(t, dtype=float), p.shape)[..., None, None]
        here = self.field.values_at(tb, p[..., None, None])
        fwd = grid.N * (self.field.values_at(tb, grid.safe_neighbors[p]) - here)
        if self.scheme == "forward":
            return fwd
        back_nb = np.swapaxes(grid.neighbors[p], -1, -2)
        safe_back = np.where(back_nb >= 0, back_nb, p[..., None, None])
        bwd = grid.N * (here - self.field.values_at(tb, safe_back))
        has_f = grid.neighbors[p] >= 0
        has_b = back_nb >= 0
        return np.where(has_f & has_b, 0.5 * (fwd + bwd),
                        np.where(has_f, fwd, np.where(has_b, bwd, 0.0)))

    def gradient(self, t: float, m) -> np.ndarray:
        return self.gradient_at_index(t, self.grid.nearest_index(m))

    def interpolated_gradient(self, t: float, m) -> np.ndarray:
        """Grid gradients blended over the Kuhn simplex containing m.

        Piecewise-linear in the chart, so it avoids the O(1/N) jumps of
        nearest-point snapping. Falls back to snapping when a vertex of the
        containing cell leaves the lattice (within (d-1)/N of the last face).
        """
        m = np.asarray(m, dtype=float)
        N, d = self.grid.N, self.spec.d
        y = m[:-1] * N
        base = np.floor(y)
        frac = y - base
        order = np.argsort(-frac, kind="stable")
        verts = [base.copy()]
        for j in order:
            v = verts[-1].copy()
            v[j] += 1
            verts.append(v)
        fs = frac[order]
        weights = np.concatenate([[1.0 - fs[0]], fs[:-1] - fs[1:], fs[-1:]])
        counts = np.array([np.append(v, N - v.sum()) for v in verts]).astype(np.int64)
        if np.any(counts < 0):
            return self.gradient(t, m)
        G = self.gradient_at_index(t, self.grid.index(counts))
        return np.tensordot(weights, G, axes=1)

    def chart_gradient(self, t: float, m, interpolate: bool = False) -> np.ndarray:
        """D_x V-hat: derivatives along e_j - e_d for j < d."""
        g = self.interpolated_gradient(t, m) if interpolate else self.gradient(t, m)
        return g[..., -1, :-1]


def reference_value(
    spec: ProblemSpec,
    N_ref: int,
    dt=None,
    scheme: str = "forward",
    max_points: int = DEFAULT_MAX_POINTS,
) -> ReferenceValue:
    return ReferenceValue(spec, solve_VN(spec, N_ref, dt=dt, max_points=max_points), scheme)


class ReferenceFeedback(FeedbackPolicy):
    """alpha_*(t, i, m) = a*(t, i, m, D^i V(t, m)) from a reference gradient."""

    def __init__(self, ref: ReferenceValue):
        self.ref = ref
        self.spec = ref.spec
        self.d = ref.spec.d

    def __call__(self, t, i, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        lead = m.shape[:-1]
        flat = m.reshape(-1, self.d)
        i = np.broadcast_to(np.asarray(i, dtype=np.int64), lead).reshape(-1)
        p = np.asarray(self.ref.grid.nearest_index(flat))
        t_rows = np.broadcast_to(np.asarray(t, dtype=float), lead).reshape(-1)
        Z = self.ref.gradient_at_index(t_rows, p)[np.arange(len(p)), i]
        t0 = float(t_rows[0]) if t_rows.size else 0.0
        return _argmax_actions(self.spec, t0, i, flat, Z).reshape(lead + (self.d,))


def optimal_trajectory(spec: ProblemSpec, ref: ReferenceValue, m0, dt: Optional[float] = None):
    """Optimal flow from m0 under the reference feedback alpha_*."""
    if spec.flag not in ("B", "C"):
        raise ValueError("optimal_trajectory needs a flag-B problem (unique argmax)")
    policy = ReferenceFeedback(ref)
    flow = solve_fokker_planck(spec, policy, m0, dt)
    return flow, policy


def interior_lower_bound(spec: ProblemSpec, m0) -> np.ndarray:
    """mu^i_0 exp(-T M (d-1)): guaranteed floor of every flow from m0."""
    return np.asarray(m0, dtype=float) * math.exp(-spec.T * spec.rate_bound * (spec.d - 1))
