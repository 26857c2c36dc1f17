"""Backward integration of the N-agent HJB ODE on S_d^N, the full-state
oracle on {0..d-1}^N, feedback extraction and Lipschitz measurements."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from mfcontrol.model import (
    ProblemSpec,
    aggregate_G,
    hamiltonian_field,
    pre_hamiltonian_field,
    quadratic_hamiltonian,
    search_hamiltonian,
)
from mfcontrol.simplex_grid import DEFAULT_MAX_POINTS, SimplexGrid

CACHE_MAGIC = b"MFCVF"
CACHE_VERSION = 1
FULL_STATE_CAP = 100_000


class DivergenceError(FloatingPointError):
    """Non-finite value met during time integration."""


def auto_steps(T: float, N: int, M: float, d: int) -> int:
    """Number of uniform steps for dt = T / ceil(4 T N M d)."""
    return max(1, math.ceil(4.0 * T * N * M * d))


def time_grid(T: float, n_steps: int) -> np.ndarray:
    return np.linspace(0.0, T, n_steps + 1)


def _resolve_steps(spec: ProblemSpec, N: int, dt) -> int:
    if dt is None or dt == "auto":
        return auto_steps(spec.T, N, spec.rate_bound, spec.d)
    if dt <= 0:
        raise ValueError("dt must be positive")
    return max(1, math.ceil(spec.T / dt - 1e-9))


def rk4_backward(rhs: Callable, terminal: np.ndarray, times: np.ndarray, check=None):
    """Integrate dy/dt = rhs(t, y) from times[-1] down to times[0].

    Returns the array of states at every knot (same order as ``times``).
    """
    out = np.empty((len(times),) + terminal.shape)
    out[-1] = terminal
    y = terminal
    for k in range(len(times) - 1, 0, -1):
        t = times[k]
        h = times[k - 1] - t
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if check is not None:
            check(times[k - 1], y)
        out[k - 1] = y
    return out


@dataclass
class ValueField:
    """V^N on a uniform time grid over the points of a SimplexGrid."""

    grid: SimplexGrid
    times: np.ndarray
    values: np.ndarray
    spec: Optional[ProblemSpec] = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def knot(self, t) -> np.ndarray:
        """Left knot index for time(s) t (the last knot maps to itself)."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t + 1e-12 * max(1.0, self.times[-1]), side="right") - 1
        return np.clip(k, 0, len(self.times) - 1)

    def at_time(self, t: float) -> np.ndarray:
        """Values at time t, linearly interpolated between knots."""
        k = int(self.knot(t))
        if k >= len(self.times) - 1:
            return self.values[-1]
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.values[k] + w * self.values[k + 1]

    def values_at(self, t, idx) -> np.ndarray:
        """Values at grid indices ``idx`` and times ``t`` (broadcasting),
        linear in time between knots."""
        t = np.asarray(t, dtype=float)
        k = self.knot(t)
        k1 = np.minimum(k + 1, len(self.times) - 1)
        span = self.times[k1] - self.times[k]
        w = np.where(k1 > k, (t - self.times[k]) / np.where(k1 > k, span, 1.0), 0.0)
        return (1 - w) * self.values[k, idx] + w * self.values[k1, idx]

    def __call__(self, t: float, m) -> np.ndarray | float:
        idx = self.grid.nearest_index(m)
        return self.at_time(t)[idx]

    def to_csv(self, path) -> None:
        d = self.grid.d
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "index"] + [f"k_{i + 1}" for i in range(d)] + ["value"])
            for k, t in enumerate(self.times):
                for p, row in enumerate(self.grid.counts):
                    writer.writerow([repr(float(t)), p, *row.tolist(), repr(float(self.values[k, p]))])

    def save(self, path, meta: Optional[dict] = None) -> None:
        """Binary cache: magic, version byte, JSON header length + header, npz payload."""
        header = {"d": self.grid.d, "N": self.grid.N, "T": float(self.times[-1])}
        if self.spec is not None:
            header["spec"] = self.spec.describe()
        header.update(meta or {})
        blob = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        np.savez(buf, times=self.times, values=self.values)
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(bytes([CACHE_VERSION]))
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path, spec: Optional[ProblemSpec] = None) -> "ValueField":
        with open(path, "rb") as fh:
            if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
                raise ValueError(f"{path} is not a value-field cache")
            version = fh.read(1)[0]
            if version != CACHE_VERSION:
                raise ValueError(f"unsupported cache version {version}")
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size))
            data = np.load(io.BytesIO(fh.read()))
            grid = SimplexGrid(header["d"], header["N"])
            return cls(grid, data["times"], data["values"], spec)


def solve_VN(
    spec: ProblemSpec,
    N: int,
    dt=None,
    thin: int = 1,
    max_points: int = DEFAULT_MAX_POINTS,
) -> ValueField:
    """Solve dV/dt = sum_i m_i H^i(t, m, D^{N,i} V) backward from V(T) = G.

    Classical RK4 with uniform steps; ``dt=None`` picks
    T / ceil(4 T N M d). ``thin`` keeps every ``thin``-th knot (0 and T are
    always kept).
    """
    grid = SimplexGrid(spec.d, N, max_points=max_points)
    n_steps = _resolve_steps(spec, N, dt)
    times = time_grid(spec.T, n_steps)
    m = grid.coords

    def rhs(t, V):
        H, _ = hamiltonian_field(spec, t, m, grid.discrete_gradient(V))
        return np.sum(m * H, axis=1)

    def check(t, V):
        if not np.all(np.isfinite(V)):
            p = int(np.flatnonzero(~np.isfinite(V))[0])
            raise DivergenceError(f"non-finite value at t={t:.6g}, m={grid.coords[p].tolist()}")

    terminal = np.asarray(aggregate_G(spec, m), dtype=float)
    values = rk4_backward(rhs, terminal, times, check)
    if thin > 1:
        keep = np.unique(np.r_[np.arange(0, len(times), thin), len(times) - 1])
        times, values = times[keep], values[keep]
    return ValueField(grid, times, values, spec)


# -- full-state oracle --------------------------------------------------------

@dataclass
class FullStateField:
    """v^N over every profile x in {0..d-1}^N (mixed radix, x_0 least significant)."""

    d: int
    N: int
    profiles: np.ndarray
    times: np.ndarray
    values: np.ndarray

    def index(self, x) -> int:
        x = np.asarray(x, dtype=np.int64)
        return int(np.sum(x * self.d ** np.arange(self.N)))


def solve_full_state(spec: ProblemSpec, N: int, dt=None, cap: int = FULL_STATE_CAP) -> FullStateField:
    """Solve the ODE system indexed by the d^N player profiles.

    ``dv/dt = (1/N) sum_k H^{x_k}(t, mu_x, N Delta^k v)``, terminal value
    ``(1/N) sum_k g^{x_k}(mu_x)``, on the same time grid as solve_VN.
    """
    d = spec.d
    S = d**N
    if S > cap:
        raise ValueError(f"full state space has {S} profiles, cap is {cap}")
    radix = d ** np.arange(N)
    profiles = (np.arange(S)[:, None] // radix) % d
    mu = np.stack([(profiles == i).sum(axis=1) for i in range(d)], axis=1) / N
    shift = (np.arange(d)[None, None, :] - profiles[:, :, None]) * radix[None, :, None]
    nbr = np.arange(S)[:, None, None] + shift

    n_steps = _resolve_steps(spec, N, dt)
    times = time_grid(spec.T, n_steps)
    mu_b = np.broadcast_to(mu[:, None, :], (S, N, d))

    def rhs(t, v):
        Z = N * (v[nbr] - v[:, None, None])
        if spec.closed_form:
            H, _ = quadratic_hamiltonian(spec, profiles, mu_b, Z)
        else:
            H = np.zeros((S, N))
            for i in range(d):
                h, _ = search_hamiltonian(spec, t, i, mu_b, Z)
                H = np.where(profiles == i, h, H)
        return H.mean(axis=1)

    terminal = np.zeros(S)
    for i in range(d):
        terminal += (profiles == i).sum(axis=1) * spec.terminal_cost(i, mu)
    terminal /= N
    values = rk4_backward(rhs, terminal, times)
    return FullStateField(d, N, profiles, times, values)


# -- feedback -----------------------------------------------------------------

class FeedbackPolicy:
    """A map (t, i, m) -> action vector in A.

    ``__call__`` takes a scalar time, integer state array ``i`` and simplex
    coordinates ``m`` with matching leading axes, and returns actions with a
    trailing axis of length d.
    """

    d: int

    def __call__(self, t, i, m) -> np.ndarray:
        raise NotImplementedError

    def matrix(self, t: float, m) -> np.ndarray:
        """Full (d, d) rate matrix alpha^{i,j}(t, m) at one point."""
        m = np.asarray(m, dtype=float)
        states = np.arange(self.d)
        return self(t, states, np.broadcast_to(m, (self.d, self.d)))


class GridFeedback(FeedbackPolicy):
    """alpha_N(t, i, m) = a*(t, i, m, D^{N,i} V^N(t_k, m)) at the left knot t_k."""

    def __init__(self, spec: ProblemSpec, field: ValueField):
        self.spec = spec
        self.field = field
        self.d = spec.d

    def by_index(self, t, i, p) -> np.ndarray:
        """Actions at grid point indices ``p`` (any shape), states ``i`` and
        times ``t`` broadcasting with ``p``."""
        grid = self.field.grid
        V = self.field.values
        p = np.asarray(p, dtype=np.int64)
        i = np.broadcast_to(np.asarray(i, dtype=np.int64), p.shape)
        k = np.broadcast_to(self.field.knot(t), p.shape)
        nb = grid.safe_neighbors[p, i]
        Z = grid.N * (V[k[..., None], nb] - V[k, p][..., None])
        t0 = float(self.field.times[k.flat[0]]) if k.size else 0.0
        return _argmax_actions(self.spec, t0, i, grid.coords[p], Z)

    def __call__(self, t, i, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        lead = m.shape[:-1]
        p = np.asarray(self.field.grid.nearest_index(m.reshape(-1, self.d)))
        i = np.broadcast_to(np.asarray(i, dtype=np.int64), lead).reshape(-1)
        return self.by_index(t, i, p).reshape(lead + (self.d,))


def _argmax_actions(spec: ProblemSpec, t: float, i, m, Z) -> np.ndarray:
    if spec.closed_form:
        _, a = quadratic_hamiltonian(spec, i, m, Z)
        return a
    out = np.empty(np.shape(Z))
    for s in range(spec.d):
        sel = i == s
        if np.any(sel):
            _, a = search_hamiltonian(spec, t, s, m[sel], Z[sel])
            out[sel] = a
    return out


def extract_feedback(spec: ProblemSpec, field: ValueField) -> GridFeedback:
    return GridFeedback(spec, field)


def measure_lipschitz(field: ValueField) -> tuple[float, float]:
    """(space, time) Lipschitz constants over neighbor pairs and consecutive knots."""
    grid = field.grid
    V = field.values
    step = math.sqrt(2.0) / grid.N
    space = 0.0
    for k in range(len(field.times)):
        diffs = np.abs(V[k][grid.safe_neighbors] - V[k][:, None, None])
        space = max(space, float(diffs.max()) / step)
    time = 0.0
    if len(field.times) > 1:
        dts = np.diff(field.times)[:, None]
        time = float(np.max(np.abs(np.diff(V, axis=0)) / dts))
    return space, time


def solve_JN(spec: ProblemSpec, control: FeedbackPolicy, N: int, dt=None, max_points: int = DEFAULT_MAX_POINTS) -> ValueField:
    """Cost of a fixed control for the N-agent problem from every grid point.

    Same backward ODE as :func:`solve_VN` with the max replaced by the
    pre-Hamiltonian at the control's actions, so the result is linear in
    the control and needs no optimization. ``control(t, i, m)`` is evaluated
    at the grid coordinates; an open-loop control ignores m.
    """
    grid = SimplexGrid(spec.d, N, max_points=max_points)
    n_steps = _resolve_steps(spec, N, dt)
    times = time_grid(spec.T, n_steps)
    m = grid.coords
    P, d = m.shape
    states = np.broadcast_to(np.arange(d), (P, d))
    m_rows = np.broadcast_to(m[:, None, :], (P, d, d))

    def rhs(t, J):
        A = np.asarray(control(t, states, m_rows), dtype=float)
        return np.sum(m * pre_hamiltonian_field(spec, t, m, A, grid.discrete_gradient(J)), axis=1)

    terminal = np.asarray(aggregate_G(spec, m), dtype=float)
    return ValueField(grid, times, rk4_backward(rhs, terminal, times), spec)
