"""Control problems on d states: transition rates, costs, action models, and
the (pre-)Hamiltonians built from them.

Everything here is vectorized over the trailing simplex axis: ``m`` may be a
single point of shape ``(d,)`` or a batch ``(..., d)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

FLAGS = ("A", "B", "C")


@dataclass(frozen=True)
class RateBox:
    """Actions a in [0, M]^d; ``lattice`` points per coordinate when the
    maximization has to be done by search."""

    M: float
    lattice: int = 101

    def __post_init__(self):
        if not self.M >= 0:
            raise ValueError(f"rate bound M must be >= 0, got {self.M}")
        if self.lattice < 2:
            raise ValueError("lattice needs at least 2 points per coordinate")


@dataclass(frozen=True)
class FiniteSet:
    actions: tuple

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("FiniteSet needs at least one action")


# -- cost families ------------------------------------------------------------

def _per_state(value, d: int, width: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if width is None:
        return np.broadcast_to(arr, (d,)).copy()
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (d, width))
    if arr.shape != (d, width):
        raise ValueError(f"expected shape ({d}, {width}), got {arr.shape}")
    return np.array(arr, dtype=float)


@dataclass(frozen=True, eq=False)
class CostTerm:
    """One state-indexed mean-field cost term c^i(m).

    kinds
    -----
    constant   b_i
    affine     <c_i, m>
    quadratic  kappa_i |m - center_i|^2
    trig       beta_i sin(gamma <c_i, m>)
    """

    kind: str
    params: dict

    @classmethod
    def build(cls, kind: str, d: int, **params) -> "CostTerm":
        if kind == "constant":
            p = {"b": _per_state(params["b"], d)}
        elif kind == "affine":
            p = {"c": _per_state(params["c"], d, d)}
        elif kind == "quadratic":
            p = {
                "kappa": _per_state(params["kappa"], d),
                "center": _per_state(params["center"], d, d),
            }
        elif kind == "trig":
            p = {
                "beta": _per_state(params["beta"], d),
                "gamma": float(params["gamma"]),
                "c": _per_state(params["c"], d, d),
            }
        else:
            raise ValueError(f"unknown cost kind {kind!r}")
        return cls(kind, p)

    def value(self, i: int, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        p = self.params
        if self.kind == "constant":
            return np.full(m.shape[:-1], p["b"][i])
        if self.kind == "affine":
            return m @ p["c"][i]
        if self.kind == "quadratic":
            diff = m - p["center"][i]
            return p["kappa"][i] * np.sum(diff * diff, axis=-1)
        return p["beta"][i] * np.sin(p["gamma"] * (m @ p["c"][i]))

    def grad(self, i: int, m: np.ndarray) -> np.ndarray:
        """Gradient with respect to m in R^d."""
        m = np.asarray(m, dtype=float)
        p = self.params
        if self.kind == "constant":
            return np.zeros_like(m)
        if self.kind == "affine":
            return np.broadcast_to(p["c"][i], m.shape).copy()
        if self.kind == "quadratic":
            return 2.0 * p["kappa"][i] * (m - p["center"][i])
        arg = p["gamma"] * (m @ p["c"][i])
        return (p["beta"][i] * p["gamma"] * np.cos(arg))[..., None] * p["c"][i]

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for k, v in self.params.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass(frozen=True, eq=False)
class CostModel:
    """Sum of cost terms; the empty model is identically zero."""

    terms: tuple = ()

    def value(self, i: int, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        out = np.zeros(m.shape[:-1])
        for term in self.terms:
            out = out + term.value(i, m)
        return out

    def grad(self, i: int, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        out = np.zeros_like(m)
        for term in self.terms:
            out = out + term.grad(i, m)
        return out

    def aggregate(self, m) -> np.ndarray:
        """sum_i m_i c^i(m)."""
        m = np.asarray(m, dtype=float)
        return sum(m[..., i] * self.value(i, m) for i in range(m.shape[-1]))

    def aggregate_grad(self, m) -> np.ndarray:
        """Gradient in R^d of sum_i m_i c^i(m)."""
        m = np.asarray(m, dtype=float)
        d = m.shape[-1]
        out = np.stack([self.value(i, m) for i in range(d)], axis=-1)
        for i in range(d):
            out = out + m[..., i, None] * self.grad(i, m)
        return out

    def to_list(self) -> list:
        return [t.to_dict() for t in self.terms]

    @classmethod
    def from_list(cls, d: int, items: Sequence[dict]) -> "CostModel":
        terms = []
        for item in items:
            item = dict(item)
            kind = item.pop("kind")
            terms.append(CostTerm.build(kind, d, **item))
        return cls(tuple(terms))


# -- problem ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A finite-state control problem.

    ``rate(t, i, a, m)`` returns the row Q_{i, .} (shape ``(..., d)``),
    ``running_cost(t, i, a, m)`` returns f^i and ``terminal_cost(i, m)``
    returns g^i. For the quadratic preset ``running_base`` holds f_0 and
    ``terminal_model`` holds g as cost models, which enables the closed-form
    Hamiltonian and analytic gradients.
    """

    d: int
    T: float
    actions: RateBox | FiniteSet
    rate: Callable
    running_cost: Callable
    terminal_cost: Callable
    flag: str = "A"
    preset: Optional[str] = None
    coefficients: dict = field(default_factory=dict)
    rate_bound: float = 0.0
    convexity: Optional[float] = None
    adjacency: Optional[np.ndarray] = None
    running_base: Optional[CostModel] = None
    terminal_model: Optional[CostModel] = None
    validate_samples: int = 64

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("need at least two states")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.flag not in FLAGS:
            raise ValueError(f"flag must be one of {FLAGS}")
        if self.flag in ("B", "C") and not isinstance(self.actions, RateBox):
            raise ValueError("flags B and C need a RateBox action model")
        self._validate()

    @property
    def closed_form(self) -> bool:
        return self.preset == "quadratic" and isinstance(self.actions, RateBox)

    @property
    def mask(self) -> np.ndarray:
        if self.adjacency is None:
            return 1.0 - np.eye(self.d)
        return np.asarray(self.adjacency, dtype=float) * (1.0 - np.eye(self.d))

    def _validate(self):
        rng = np.random.default_rng(0)
        d = self.d
        for _ in range(self.validate_samples):
            t = rng.uniform(0, self.T)
            i = int(rng.integers(d))
            m = rng.dirichlet(np.ones(d))
            a = self.sample_action(rng)
            q = np.asarray(self.rate(t, i, a, m), dtype=float)
            if np.any(q < 0):
                raise ValueError(f"negative transition rate at t={t}, i={i}")
            off = np.arange(d) != i
            if np.any(q[off] > self.rate_bound + 1e-12):
                raise ValueError("transition rate exceeds the recorded rate bound")
            if self.flag in ("B", "C"):
                expected = self.mask[i] * a
                if not np.allclose(q[off], expected[off], atol=1e-12):
                    raise ValueError("flag B requires Q_{i,j}(t, a, m) = a_j")

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        if isinstance(self.actions, RateBox):
            return rng.uniform(0, self.actions.M, size=self.d)
        k = int(rng.integers(len(self.actions.actions)))
        return np.asarray(self.actions.actions[k], dtype=float)

    def candidate_actions(self, i: int, lattice: Optional[int] = None) -> np.ndarray:
        """Search set for state i, in lexicographic order.

        For a RateBox only the off-diagonal coordinates are searched; the
        diagonal one never enters the rates.
        """
        if isinstance(self.actions, FiniteSet):
            return np.asarray(self.actions.actions, dtype=float)
        n = lattice or self.actions.lattice
        axis = np.linspace(0.0, self.actions.M, n)
        grids = [axis if j != i else np.zeros(1) for j in range(self.d)]
        return np.array(list(itertools.product(*grids)), dtype=float)

    def describe(self) -> dict:
        return {
            "preset": self.preset,
            "d": self.d,
            "T": self.T,
            "flag": self.flag,
            "rate_bound": self.rate_bound,
            "convexity": self.convexity,
            "coefficients": self.coefficients,
        }


def quadratic_preset(
    d: int,
    T: float = 1.0,
    M: float = 1.0,
    running: Sequence[dict] = (),
    terminal: Sequence[dict] = (),
    adjacency=None,
    flag: str = "B",
) -> ProblemSpec:
    """f^i(a, m) = 1/2 sum_{j != i} a_j^2 + f_0^i(m), Q_{i,j} = mask_{ij} a_j.

    ``running`` and ``terminal`` are lists of cost-term dicts such as
    ``{"kind": "quadratic", "kappa": 1.0, "center": [0.5, 0.5]}``.
    """
    base = CostModel.from_list(d, running)
    term = CostModel.from_list(d, terminal)
    mask = np.ones((d, d)) if adjacency is None else np.asarray(adjacency, dtype=float)
    mask = mask * (1.0 - np.eye(d))
    off = 1.0 - np.eye(d)

    def rate(t, i, a, m):
        a = np.asarray(a, dtype=float)
        m = np.asarray(m, dtype=float)
        return np.broadcast_to(mask[i] * a, np.broadcast_shapes(a.shape, m.shape)).copy()

    def running_cost(t, i, a, m):
        a = np.asarray(a, dtype=float)
        return 0.5 * np.sum(off[i] * a * a, axis=-1) + base.value(i, m)

    def terminal_cost(i, m):
        return term.value(i, m)

    rate_bound = float(M * mask.max()) if d > 1 else 0.0
    coefficients = {
        "M": M,
        "running": base.to_list(),
        "terminal": term.to_list(),
        "adjacency": None if adjacency is None else np.asarray(adjacency).tolist(),
    }
    return ProblemSpec(
        d=d,
        T=T,
        actions=RateBox(M),
        rate=rate,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        flag=flag,
        preset="quadratic",
        coefficients=coefficients,
        rate_bound=rate_bound,
        convexity=0.5,
        adjacency=None if adjacency is None else np.asarray(adjacency, dtype=float),
        running_base=base,
        terminal_model=term,
    )


# -- Hamiltonians -------------------------------------------------------------

@dataclass(frozen=True)
class HamiltonianResult:
    value: float
    action: np.ndarray
    exact: bool


def _check_z(i: int, z, tol: float = 1e-9) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z[..., i]) > tol):
        raise ValueError(f"z_{i} must vanish in the state-{i} Hamiltonian")
    return z


def _check_m(m, tol: float = 1e-9) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if np.any(m < -tol) or np.any(np.abs(m.sum(axis=-1) - 1.0) > tol):
        raise ValueError("m must lie in the simplex")
    return m


def pre_hamiltonian(spec: ProblemSpec, t: float, i: int, a, m, z) -> np.ndarray | float:
    """-<Q_{i,.}(t, a, m), z> - f^i(t, a, m)."""
    z = _check_z(i, z)
    m = _check_m(m)
    a = np.asarray(a, dtype=float)
    q = spec.rate(t, i, a, m)
    out = -np.sum(q * z, axis=-1) - spec.running_cost(t, i, a, m)
    return float(out) if np.ndim(out) == 0 else out


def clamp_rate(r, M: float) -> np.ndarray:
    return np.clip(r, 0.0, M)


def quadratic_hamiltonian(spec: ProblemSpec, i, m, z):
    """Closed form for the quadratic preset, vectorized.

    ``i`` may be an int or an integer array broadcasting with the leading axes
    of ``m`` and ``z``. Returns (H, a*).
    """
    M = spec.actions.M
    z = np.asarray(z, dtype=float)
    m = np.asarray(m, dtype=float)
    mask = spec.mask[i]
    a = clamp_rate(-z, M) * mask
    h = np.sum(mask * (-a * z - 0.5 * a * a), axis=-1)
    if np.ndim(i) == 0:
        f0 = spec.running_base.value(int(i), m)
    else:
        f0 = np.choose(i, [spec.running_base.value(k, m) for k in range(spec.d)])
    return h - f0, a


def search_hamiltonian(spec: ProblemSpec, t: float, i: int, m, z, lattice: Optional[int] = None):
    """Maximize the pre-Hamiltonian over the candidate set; first maximizer
    wins, so ties resolve to the lexicographically smallest action.

    ``m`` and ``z`` may be batched with matching leading axes.
    """
    m = np.asarray(m, dtype=float)
    z = np.asarray(z, dtype=float)
    cands = spec.candidate_actions(i, lattice)
    best = np.full(m.shape[:-1], -np.inf)
    arg = np.zeros(m.shape[:-1], dtype=np.int64)
    for k, a in enumerate(cands):
        val = -np.sum(spec.rate(t, i, a, m) * z, axis=-1) - spec.running_cost(t, i, a, m)
        better = val > best
        best = np.where(better, val, best)
        arg = np.where(better, k, arg)
    return best, cands[arg]


def hamiltonian(
    spec: ProblemSpec,
    t: float,
    i: int,
    m,
    z,
    method: str = "auto",
    lattice: Optional[int] = None,
) -> HamiltonianResult:
    """max_a of the pre-Hamiltonian with its maximizer."""
    z = _check_z(i, z)
    m = _check_m(m)
    if method == "auto":
        method = "closed" if spec.closed_form else "search"
    if method == "closed":
        if not spec.closed_form:
            raise ValueError("closed form only available for the quadratic preset")
        h, a = quadratic_hamiltonian(spec, i, m, z)
        return HamiltonianResult(float(h), a, True)
    h, a = search_hamiltonian(spec, t, i, m, z, lattice)
    return HamiltonianResult(float(h), np.asarray(a), False)


def hamiltonian_field(spec: ProblemSpec, t: float, m: np.ndarray, Z: np.ndarray):
    """H^i(t, m_p, Z[p, i]) for every grid point p and state i.

    ``m`` has shape (P, d) and ``Z`` shape (P, d, d) with ``Z[:, i, i] == 0``.
    Returns ``(H, A)`` with shapes (P, d) and (P, d, d).
    """
    P, d = m.shape
    if spec.closed_form:
        states = np.arange(d)[None, :]
        h, a = quadratic_hamiltonian(spec, states, m[:, None, :], Z)
        return h, a
    H = np.empty((P, d))
    A = np.empty((P, d, d))
    for i in range(d):
        H[:, i], A[:, i] = search_hamiltonian(spec, t, i, m, Z[:, i])
    return H, A


def pre_hamiltonian_field(spec: ProblemSpec, t: float, m: np.ndarray, A: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Pre-Hamiltonian for given actions A[p, i] at every (p, i)."""
    P, d = m.shape
    out = np.empty((P, d))
    for i in range(d):
        a = A[:, i]
        out[:, i] = -np.sum(spec.rate(t, i, a, m) * Z[:, i], axis=-1) - spec.running_cost(t, i, a, m)
    return out


def aggregate_F(spec: ProblemSpec, t: float, a_profile, m) -> np.ndarray | float:
    """F(t, a^1..a^d, m) = sum_i m_i f^i(t, a^i, m)."""
    m = np.asarray(m, dtype=float)
    a_profile = np.asarray(a_profile, dtype=float)
    out = sum(m[..., i] * spec.running_cost(t, i, a_profile[..., i, :], m) for i in range(spec.d))
    return float(out) if np.ndim(out) == 0 else out


def aggregate_G(spec: ProblemSpec, m) -> np.ndarray | float:
    """G(m) = sum_i m_i g^i(m)."""
    m = np.asarray(m, dtype=float)
    out = sum(m[..., i] * spec.terminal_cost(i, m) for i in range(spec.d))
    return float(out) if np.ndim(out) == 0 else out
