"""Discretized simplex S_d^N: enumeration, indexing, neighbor moves and
discrete derivatives.

States are 0-based throughout (``0 .. d-1``). Grid points are stored as
integer count vectors ``k`` with ``sum(k) == N``; the simplex coordinates are
``k / N``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_MAX_POINTS = 5_000_000


class GridSizeError(ValueError):
    """Raised when a grid would exceed the configured point cap."""


@dataclass(frozen=True)
class SimplexPoint:
    """A point of S_d^N held as integer counts."""

    counts: tuple[int, ...]
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if any(k < 0 for k in self.counts):
            raise ValueError(f"negative count in {self.counts}")
        if sum(self.counts) != self.N:
            raise ValueError(f"counts {self.counts} do not sum to N={self.N}")

    @property
    def d(self) -> int:
        return len(self.counts)

    @property
    def coords(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / self.N

    @property
    def fractions(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(k, self.N) for k in self.counts)


@dataclass(frozen=True)
class ChartPoint:
    """Simplex point in the local chart: the first d-1 coordinates."""

    x: tuple

    @property
    def last(self):
        return 1 - sum(self.x)


def _binomial_table(n_max: int, r_max: int) -> np.ndarray:
    table = np.zeros((n_max + 1, r_max + 1), dtype=np.int64)
    for n in range(n_max + 1):
        for r in range(min(n, r_max) + 1):
            table[n, r] = math.comb(n, r)
    return table


class SimplexGrid:
    """All points of S_d^N in descending lexicographic order on counts.

    Attributes
    ----------
    counts : ndarray of shape (n_points, d), int64
    neighbors : ndarray of shape (n_points, d, d), int64
        ``neighbors[p, i, j]`` is the index of ``counts[p] + e_j - e_i`` or -1
        when ``i == j`` or ``counts[p, i] == 0``.
    """

    def __init__(self, d: int, N: int, max_points: int = DEFAULT_MAX_POINTS):
        if d < 2:
            raise ValueError(f"d must be >= 2, got {d}")
        if N < 1:
            raise ValueError(f"N must be >= 1, got {N}")
        required = math.comb(N + d - 1, d - 1)
        if required > max_points:
            raise GridSizeError(
                f"grid S_{d}^{N} needs {required} points, cap is {max_points}"
            )
        self.d = d
        self.N = N
        self._binom = _binomial_table(N + d, d)
        self.counts = self._enumerate()
        self.neighbors = self._neighbor_table()
        self.counts.setflags(write=False)
        self.neighbors.setflags(write=False)
        self._safe = None

    def __len__(self) -> int:
        return self.counts.shape[0]

    def __repr__(self) -> str:
        return f"SimplexGrid(d={self.d}, N={self.N}, n_points={len(self)})"

    @property
    def n_points(self) -> int:
        return len(self)

    @property
    def coords(self) -> np.ndarray:
        return self.counts / self.N

    def _enumerate(self) -> np.ndarray:
        d, N = self.d, self.N
        prefix = np.zeros((1, 0), dtype=np.int64)
        remaining = np.array([N], dtype=np.int64)
        for _ in range(d - 1):
            sizes = remaining + 1
            parent = np.repeat(np.arange(len(remaining)), sizes)
            starts = np.cumsum(sizes) - sizes
            offset = np.arange(parent.size) - starts[parent]
            value = remaining[parent] - offset
            prefix = np.column_stack([prefix[parent], value])
            remaining = remaining[parent] - value
        return np.column_stack([prefix, remaining]).astype(np.int64)

    def index(self, counts) -> np.ndarray | int:
        """Flat index of one count vector or an array of them (last axis d).

        Inputs are assumed valid (non-negative, summing to N).
        """
        k = np.asarray(counts, dtype=np.int64)
        scalar = k.ndim == 1
        k = np.atleast_2d(k)
        rem = np.full(k.shape[:-1], self.N, dtype=np.int64)
        idx = np.zeros(k.shape[:-1], dtype=np.int64)
        for p in range(self.d - 1):
            s = self.d - p
            n = rem - k[..., p] - 1 + s - 1
            idx += np.where(n >= 0, self._binom[np.maximum(n, 0), s - 1], 0)
            rem = rem - k[..., p]
        return int(idx[0]) if scalar else idx

    def point(self, index: int) -> SimplexPoint:
        return SimplexPoint(tuple(int(k) for k in self.counts[index]), self.N)

    def _neighbor_table(self) -> np.ndarray:
        P, d = len(self.counts), self.d
        table = np.full((P, d, d), -1, dtype=np.int64)
        for i in range(d):
            has = self.counts[:, i] >= 1
            for j in range(d):
                if i == j:
                    continue
                moved = self.counts[has].copy()
                moved[:, i] -= 1
                moved[:, j] += 1
                table[has, i, j] = self.index(moved)
        return table

    @property
    def safe_neighbors(self) -> np.ndarray:
        """Neighbor table with absent entries (and the diagonal) pointing at
        the point itself, so differences there vanish."""
        if self._safe is None:
            own = np.arange(len(self))[:, None, None]
            safe = np.where(self.neighbors >= 0, self.neighbors, own)
            safe.setflags(write=False)
            self._safe = safe
        return self._safe

    def discrete_gradient(self, values: np.ndarray) -> np.ndarray:
        """All N-discretized derivatives at once: out[p, i, j] = D^{N,i}_j v.

        ``values`` may carry leading batch axes before the point axis.
        """
        values = np.asarray(values, dtype=float)
        return self.N * (values[..., self.safe_neighbors] - values[..., :, None, None])

    def embed_indices(self, coarse: "SimplexGrid") -> np.ndarray:
        """Indices in this grid of the points of a coarser grid whose
        resolution divides ours."""
        if coarse.d != self.d or self.N % coarse.N:
            raise ValueError(
                f"S_{coarse.d}^{coarse.N} does not embed in S_{self.d}^{self.N}"
            )
        return self.index(coarse.counts * (self.N // coarse.N))

    def nearest_index(self, m) -> np.ndarray | int:
        """Index of a grid point nearest to simplex coordinates ``m``.

        Largest-remainder rounding of ``N * m``; for points on the grid this is
        exact.
        """
        m = np.asarray(m, dtype=float)
        scalar = m.ndim == 1
        m = np.atleast_2d(m)
        scaled = np.clip(m, 0.0, None) * self.N
        base = np.floor(scaled + 1e-9).astype(np.int64)
        short = self.N - base.sum(axis=-1)
        frac = scaled - base
        order = np.argsort(-frac, axis=-1, kind="stable")
        rank = np.argsort(order, axis=-1)
        base = base + (rank < short[:, None])
        # over-full rows only arise from inputs off the simplex
        if np.any(short < 0):
            raise ValueError("coordinates do not lie on the simplex")
        out = self.index(base)
        return int(out[0]) if scalar else out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index"] + [f"k_{i + 1}" for i in range(self.d)])
            for p, row in enumerate(self.counts):
                writer.writerow([p, *row.tolist()])


def enumerate_grid(d: int, N: int, max_points: int = DEFAULT_MAX_POINTS) -> SimplexGrid:
    return SimplexGrid(d, N, max_points=max_points)


def neighbor(m: SimplexPoint, i: int, j: int) -> Optional[SimplexPoint]:
    """``m + (e_j - e_i)/N`` or None when state ``i`` is empty."""
    if i == j:
        raise ValueError("neighbor move needs i != j")
    d = m.d
    if not (0 <= i < d and 0 <= j < d):
        raise ValueError(f"states must lie in 0..{d - 1}")
    if m.counts[i] == 0:
        return None
    k = list(m.counts)
    k[i] -= 1
    k[j] += 1
    return SimplexPoint(tuple(k), m.N)


def empirical_measure(x: Sequence[int], d: int) -> SimplexPoint:
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("x must be a non-empty 1-d sequence of states")
    if x.min() < 0 or x.max() >= d:
        raise ValueError(f"states must lie in 0..{d - 1}")
    counts = np.bincount(x, minlength=d)
    return SimplexPoint(tuple(int(c) for c in counts), int(x.size))


def to_chart(m) -> ChartPoint:
    if isinstance(m, SimplexPoint):
        return ChartPoint(m.fractions[:-1])
    return ChartPoint(tuple(m)[:-1])


def from_chart(x, tol: float = 1e-12) -> tuple:
    """Rebuild full simplex coordinates from chart coordinates."""
    if isinstance(x, ChartPoint):
        x = x.x
    x = tuple(x)
    total = sum(x)
    if any(v < -tol for v in x) or total > 1 + tol:
        raise ValueError(f"chart point {x} lies outside the simplex")
    return x + (1 - total,)


def discrete_derivative(grid: SimplexGrid, values: np.ndarray, m, i: int) -> np.ndarray:
    """D^{N,i} v at one grid point, with zero entries where no neighbor exists."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != len(grid):
        raise ValueError("field does not cover the grid")
    p = grid.index(m.counts) if isinstance(m, SimplexPoint) else int(m)
    nb = grid.neighbors[p, i]
    out = np.zeros(grid.d)
    ok = nb >= 0
    out[ok] = grid.N * (values[nb[ok]] - values[p])
    return out


def iter_points(grid: SimplexGrid) -> Iterable[SimplexPoint]:
    for p in range(len(grid)):
        yield grid.point(p)
