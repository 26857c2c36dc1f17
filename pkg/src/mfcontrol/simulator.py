"""Exact Monte Carlo simulation of the controlled empirical-measure chain and
of coupled particle systems, by thinning against constant majorant rates.

Randomness comes from a counter-based generator: every uniform is a hash of
(seed, path, particle, counter, lane), so results do not depend on how paths
are scheduled across workers, and the three coupled particle systems can
share their per-particle streams exactly.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mfcontrol.hjb_solver import FeedbackPolicy, GridFeedback
from mfcontrol.limit_mfcp import FlowTrajectory
from mfcontrol.model import ProblemSpec
from mfcontrol.simplex_grid import SimplexPoint

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# lanes of the counter-based stream
LANE_CLOCK, LANE_PAIR, LANE_ACCEPT, LANE_INIT = 0, 1, 2, 3
EMPIRICAL_STREAM = 2**32 - 1


class MajorantError(RuntimeError):
    """A realized jump rate exceeded the thinning majorant."""


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed, path, particle, counter, lane) -> np.ndarray:
    """Uniforms in (0, 1) keyed by (seed, path, particle, counter, lane)."""
    with np.errstate(over="ignore"):
        h = _splitmix(np.asarray(seed, dtype=np.uint64) + _GOLDEN)
        for part in (path, particle, counter, lane):
            h = _splitmix(h ^ (np.asarray(part, dtype=np.uint64) + _GOLDEN))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass
class SimConfig:
    N: int
    paths: int
    seed: int = 0
    T: Optional[float] = None
    stride: int = 1
    threads: int = 1

    def horizon(self, spec: ProblemSpec) -> float:
        return spec.T if self.T is None else float(self.T)

    @staticmethod
    def majorant(spec: ProblemSpec, N: int) -> float:
        """Lambda = N M d (d-1), the bound on the total jump rate of mu^N."""
        return N * spec.rate_bound * spec.d * (spec.d - 1)


@dataclass
class TrajectoryEnsemble:
    """Event logs of one simulated system.

    ``initial[path]`` holds initial counts (empirical runs) or initial
    particle states (particle runs). ``events[path]`` is an array with rows
    ``(t, particle, i, j)``; particle is -1 for empirical-chain runs.
    """

    d: int
    N: int
    T: float
    initial: list
    events: list
    tag: str = "empirical"
    coupling: Optional[str] = None
    extras: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return len(self.events)

    def initial_counts(self, path: int) -> np.ndarray:
        init = np.asarray(self.initial[path])
        if self.tag == "empirical":
            return init.astype(np.int64)
        return np.bincount(init, minlength=self.d).astype(np.int64)

    def count_path(self, path: int):
        """Event times and the counts right after each event (row 0 is t=0)."""
        ev = self.events[path]
        counts = np.repeat(self.initial_counts(path)[None, :], len(ev) + 1, axis=0)
        if len(ev):
            step = np.zeros((len(ev), self.d), dtype=np.int64)
            rows = np.arange(len(ev))
            np.add.at(step, (rows, ev[:, 2].astype(np.int64)), -1)
            np.add.at(step, (rows, ev[:, 3].astype(np.int64)), 1)
            counts[1:] += np.cumsum(step, axis=0)
        return np.r_[0.0, ev[:, 0]] if len(ev) else np.zeros(1), counts

    def measure_at(self, path: int, times) -> np.ndarray:
        """mu^N (right-continuous) at the given times."""
        ev_t, counts = self.count_path(path)
        k = np.searchsorted(ev_t, np.asarray(times, dtype=float), side="right") - 1
        return counts[np.clip(k, 0, None)] / self.N

    def knot_measures(self, times) -> np.ndarray:
        return np.stack([self.measure_at(p, times) for p in range(self.paths)])

    def event_rows(self):
        """(path, t, particle, i, j) rows over all paths, for CSV export."""
        for p, ev in enumerate(self.events):
            for t, k, i, j in ev:
                yield p, float(t), int(k), int(i), int(j)


def _policy_rates(spec: ProblemSpec, policy: FeedbackPolicy, t, i, m, idx=None) -> np.ndarray:
    """Q_{i, .}(t, alpha(t, i, m), m) for rows of (t, i, m)."""
    if idx is not None and isinstance(policy, GridFeedback):
        a = policy.by_index(t, i, idx)
    else:
        a = policy(t, i, m)
    out = np.empty_like(a)
    for s in np.unique(i):
        sel = i == s
        out[sel] = spec.rate(t[sel] if np.ndim(t) else t, int(s), a[sel], m[sel])
    return out


def simulate_empirical(
    spec: ProblemSpec,
    policy: FeedbackPolicy,
    sim: SimConfig,
    m0,
    initial: str = "fixed",
) -> TrajectoryEnsemble:
    """Simulate the controlled chain mu^N on S_d^N for ``sim.paths`` paths.

    Candidate events arrive at rate Lambda = N M d (d-1); the ordered pair
    (i, j) is uniform and is accepted with probability
    N m_i Q_{i,j}(t, alpha(t, i, m), m) / (N M). All paths advance together.

    ``initial="fixed"`` starts every path at the grid point ``m0``;
    ``initial="iid"`` draws N i.i.d. initial states from the law ``m0``.
    """
    d, N = spec.d, sim.N
    T = sim.horizon(spec)
    paths = np.arange(sim.paths, dtype=np.int64)
    if initial == "fixed":
        if isinstance(m0, SimplexPoint):
            k0 = np.asarray(m0.counts, dtype=np.int64)
        else:
            k0 = np.rint(np.asarray(m0, dtype=float) * N).astype(np.int64)
            if not np.allclose(k0 / N, m0, atol=1e-12) or k0.sum() != N:
                raise ValueError("m0 must lie on the N-grid")
        counts = np.repeat(k0[None, :], sim.paths, axis=0)
    elif initial == "iid":
        counts = np.stack([iid_counts(np.asarray(m0, float), N, sim.seed, int(p)) for p in paths])
    else:
        raise ValueError("initial must be 'fixed' or 'iid'")
    init = [c.copy() for c in counts]

    lam = SimConfig.majorant(spec, N)
    pairs = np.array([(i, j) for i in range(d) for j in range(d) if i != j], dtype=np.int64)
    per_pair = lam / len(pairs) if len(pairs) else 0.0
    t = np.zeros(sim.paths)
    counter = np.zeros(sim.paths, dtype=np.int64)
    active = np.full(sim.paths, lam > 0)
    logs: list[list] = [[] for _ in range(sim.paths)]
    stream = np.uint64(EMPIRICAL_STREAM)

    while np.any(active):
        a = np.flatnonzero(active)
        u = counter_uniform(sim.seed, a, stream, counter[a], LANE_CLOCK)
        t[a] += -np.log(u) / lam
        done = t[a] > T
        active[a[done]] = False
        a = a[~done]
        if a.size == 0:
            break
        pair = pairs[np.minimum(
            (counter_uniform(sim.seed, a, stream, counter[a], LANE_PAIR) * len(pairs)).astype(np.int64),
            len(pairs) - 1)]
        i, j = pair[:, 0], pair[:, 1]
        m = counts[a] / N
        q = _policy_rates(spec, policy, t[a], i, m)[np.arange(a.size), j]
        ratio = counts[a, i] * q / per_pair
        if np.any(ratio > 1 + 1e-12):
            raise MajorantError(f"acceptance ratio {ratio.max():.6g} exceeds 1")
        accept = counter_uniform(sim.seed, a, stream, counter[a], LANE_ACCEPT) < ratio
        if np.any(counts[a[accept], i[accept]] == 0):
            raise MajorantError("jump out of an empty state")
        counter[a] += 1
        for p, ti, ii, jj in zip(a[accept], t[a][accept], i[accept], j[accept]):
            logs[p].append((ti, -1, ii, jj))
        acc = a[accept]
        np.add.at(counts, (acc, i[accept]), -1)
        np.add.at(counts, (acc, j[accept]), 1)

    events = [np.asarray(ev, dtype=float).reshape(-1, 4) for ev in logs]
    return TrajectoryEnsemble(d, N, T, init, events, tag="empirical")


def iid_states(m, N: int, seed: int, path: int) -> np.ndarray:
    """N i.i.d. states with law m, from the shared per-particle init lane."""
    u = counter_uniform(seed, path, np.arange(N), 0, LANE_INIT)
    cdf = np.cumsum(np.asarray(m, dtype=float))
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1)


def iid_counts(m, N: int, seed: int, path: int) -> np.ndarray:
    return np.bincount(iid_states(m, N, seed, path), minlength=len(m)).astype(np.int64)


# -- coupled particle systems ---------------------------------------------------

def _particle_candidates(spec: ProblemSpec, N: int, T: float, seed: int, path: int):
    """Candidate clocks of every particle: rate M (d-1) each, merged in time.

    Returns arrays (time, particle, offset r in 1..d-1, uniform) sorted by time.
    """
    d = spec.d
    rate = spec.rate_bound * (d - 1)
    if rate <= 0:
        return np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    mean = rate * T
    block = int(mean + 8 * math.sqrt(mean) + 16)
    particles = np.arange(N)
    while True:
        n = np.arange(block)
        u = counter_uniform(seed, path, particles[:, None], n[None, :], LANE_CLOCK)
        times = np.cumsum(-np.log(u) / rate, axis=1)
        if np.all(times[:, -1] > T):
            break
        block *= 2
    keep = times <= T
    kk, nn = np.nonzero(keep)
    t = times[kk, nn]
    r = 1 + np.minimum((counter_uniform(seed, path, kk, nn, LANE_PAIR) * (d - 1)).astype(np.int64), d - 2)
    acc = counter_uniform(seed, path, kk, nn, LANE_ACCEPT)
    order = np.argsort(t, kind="stable")
    return t[order], kk[order], r[order], acc[order]


def _couple_path(spec, policy_N, policy_limit, flow, N, T, seed, path, m0):
    d = spec.d
    M = spec.rate_bound
    x0 = iid_states(m0, N, seed, path)
    states = {"X": x0.copy(), "Y": x0.copy(), "Xt": x0.copy()}
    counts = {k: np.bincount(v, minlength=d).astype(np.int64) for k, v in states.items()}
    logs = {k: [] for k in states}
    sup_gap = np.zeros(N)
    mismatch_time = np.zeros(N)
    last_t = 0.0
    grid = policy_N.field.grid if isinstance(policy_N, GridFeedback) else None
    t_c, k_c, r_c, u_c = _particle_candidates(spec, N, T, seed, path)

    for t, k, r, u in zip(t_c, k_c, r_c, u_c):
        mismatch_time += (t - last_t) * (states["X"] != states["Xt"])
        last_t = t
        for name in ("X", "Y", "Xt"):
            i = int(states[name][k])
            j = (i + int(r)) % d
            if name == "X":
                m = counts["X"] / N
                if grid is not None:
                    a = policy_N.by_index(t, np.array([i]), np.array([grid.index(counts["X"])]))[0]
                else:
                    a = policy_N(t, np.array([i]), m[None, :])[0]
            elif name == "Y":
                m = counts["Y"] / N
                a = policy_limit(t, np.array([i]), m[None, :])[0]
            else:
                m = flow.at(t)
                a = policy_limit(t, np.array([i]), m[None, :])[0]
            q = float(np.asarray(spec.rate(t, i, a, m))[j])
            if q > M * (1 + 1e-12):
                raise MajorantError(f"rate {q} exceeds majorant {M}")
            if M > 0 and u < q / M:
                states[name][k] = j
                counts[name][i] -= 1
                counts[name][j] += 1
                logs[name].append((t, k, i, j))
        sup_gap = np.maximum(sup_gap, np.abs(states["X"] - states["Xt"]))
    mismatch_time += (T - last_t) * (states["X"] != states["Xt"])
    events = {k: np.asarray(v, dtype=float).reshape(-1, 4) for k, v in logs.items()}
    return x0, events, sup_gap, mismatch_time / T


def simulate_coupled_particles(
    spec: ProblemSpec,
    policy_N: FeedbackPolicy,
    policy_limit: FeedbackPolicy,
    flow: FlowTrajectory,
    sim: SimConfig,
    m0=None,
) -> dict:
    """Simulate X, Y and X-tilde with synchronously coupled randomness.

    X follows ``policy_N`` with its own empirical measure, Y follows
    ``policy_limit`` with its own empirical measure, X-tilde follows
    ``policy_limit`` evaluated along the deterministic ``flow``. Each particle
    has one candidate clock of rate M (d-1) shared by the three systems, with
    a shared target offset and acceptance uniform. Initial states are i.i.d.
    with law ``m0`` (default: the flow's initial point), identical across
    systems.

    Returns a dict with TrajectoryEnsembles under "X", "Y", "Xt" and per-path
    arrays "particle_sup" (mean over particles of sup_t |X^k - Xt^k|) and
    "mismatch_fraction" (mean fraction of time X^k != Xt^k).
    """
    T = sim.horizon(spec)
    m0 = flow.mu[0] if m0 is None else np.asarray(m0, dtype=float)

    def run(path):
        return _couple_path(spec, policy_N, policy_limit, flow, sim.N, T, sim.seed, path, m0)

    if sim.threads > 1:
        with ThreadPoolExecutor(max_workers=sim.threads) as pool:
            results = list(pool.map(run, range(sim.paths)))
    else:
        results = [run(p) for p in range(sim.paths)]

    out = {}
    for name in ("X", "Y", "Xt"):
        out[name] = TrajectoryEnsemble(
            spec.d, sim.N, T,
            initial=[r[0] for r in results],
            events=[r[1][name] for r in results],
            tag="particles",
            coupling=name,
        )
    out["particle_sup"] = np.array([r[2].mean() for r in results])
    out["mismatch_fraction"] = np.array([r[3].mean() for r in results])
    return out


# -- statistics -----------------------------------------------------------------

def _mean_stderr(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float(values.mean()) if values.size else 0.0, 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def path_sup_distances(ensemble: TrajectoryEnsemble, flow: FlowTrajectory) -> np.ndarray:
    """Per path: sup over event times (both one-sided limits) and flow knots
    of |mu^N_t - mu_t|, with mu linearly interpolated."""
    out = np.empty(ensemble.paths)
    for p in range(ensemble.paths):
        ev_t, counts = ensemble.count_path(p)
        mu_n = counts / ensemble.N
        knots = flow.times[flow.times <= ensemble.T + 1e-12]
        k = np.searchsorted(ev_t, knots, side="right") - 1
        best = np.max(np.linalg.norm(mu_n[k] - flow.at(knots), axis=1))
        if len(ev_t) > 1:
            at = flow.at(ev_t[1:])
            before = np.linalg.norm(mu_n[:-1] - at, axis=1)
            after = np.linalg.norm(mu_n[1:] - at, axis=1)
            best = max(best, float(before.max()), float(after.max()))
        out[p] = best
    return out


def estimate_sup_distance(ensemble: TrajectoryEnsemble, flow: FlowTrajectory) -> tuple[float, float]:
    """(mean, stderr) over paths of sup_{t <= T} |mu^N_t - mu_t|."""
    return _mean_stderr(path_sup_distances(ensemble, flow))


@dataclass
class MultinomialCheck:
    mean: float
    stderr: float
    bound: float
    passed: bool


def multinomial_check(m, N: int, samples: int = 10_000, seed: int = 0) -> MultinomialCheck:
    """Monte Carlo E|mu^N - m| for i.i.d. draws against sqrt(d)/(2 sqrt(N))."""
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    m = np.asarray(m, dtype=float)
    rng = np.random.Generator(np.random.Philox(seed))
    draws = rng.multinomial(N, m / m.sum(), size=samples) / N
    dist = np.linalg.norm(draws - m, axis=1)
    mean, se = _mean_stderr(dist)
    bound = math.sqrt(len(m)) / (2 * math.sqrt(N))
    return MultinomialCheck(mean, se, bound, mean <= bound + 3 * se)
