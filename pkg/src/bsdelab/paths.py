"""Brownian lattices, adapted processes, pathwise integrals and stopping-time partitions.

Everything here lives on one shared time grid.  Arrays are laid out path-major:
a scalar process is ``(paths, steps + 1)`` and a vector process is
``(paths, steps + 1, k)``.  Integrals use left-endpoint evaluation so that the
discrete stochastic integral is a martingale transform of the increments.

Random numbers come from :class:`numpy.random.PCG64` seeded with a 64-bit
integer; Gaussian increments are drawn with NumPy's ziggurat sampler
(``Generator.standard_normal``) and scaled by ``sqrt(dt)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

__all__ = [
    "TimeGrid",
    "BrownianLattice",
    "AdaptedProcess",
    "CumulativeBudget",
    "PartitionSpec",
    "generate_lattice",
    "pathwise_lebesgue_integral",
    "pathwise_ito_integral",
    "build_partition",
    "required_subintervals",
    "dump_lattice_csv",
]

# relative tolerance used when comparing a running budget against a threshold
_THRESHOLD_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time points ``0 = t_0 < ... < t_n = T``."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("a time grid needs at least two points")
        if times[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if not np.all(np.diff(times) > 0):
            raise ValueError("time grid must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        if not horizon > 0 or not math.isfinite(horizon):
            raise ValueError(f"horizon must be positive and finite, got {horizon}")
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        times = np.arange(steps + 1, dtype=float) * (horizon / steps)
        times[-1] = horizon
        return cls(times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def last(self) -> int:
        return self.steps

    @cached_property
    def dt(self) -> np.ndarray:
        """Per-interval spacing, length ``steps``."""
        return np.diff(self.times)

    def same_as(self, other: "TimeGrid") -> bool:
        return self is other or (
            self.times.shape == other.times.shape and np.array_equal(self.times, other.times)
        )


@dataclass(frozen=True, eq=False)
class BrownianLattice:
    """Simulated d-dimensional Brownian increments on a shared grid.

    ``increments[p, i, k]`` is the increment of component ``k`` on path ``p``
    over ``[t_i, t_{i+1}]``.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: int

    def __post_init__(self):
        inc = self.increments
        if inc.ndim != 3 or inc.shape[1] != self.grid.steps:
            raise ValueError("increments must have shape (paths, steps, d)")
        inc.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @cached_property
    def W(self) -> np.ndarray:
        """Brownian values at every grid point, shape ``(paths, steps + 1, d)``."""
        w = np.zeros((self.n_paths, self.grid.steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=w[:, 1:, :])
        w.setflags(write=False)
        return w

    @property
    def terminal(self) -> np.ndarray:
        """``B_T`` per path, shape ``(paths, d)``."""
        return self.W[:, -1, :]

    def reseeded(self, seed: int) -> "BrownianLattice":
        return generate_lattice(self.grid, self.d, self.n_paths, seed)


def generate_lattice(grid: TimeGrid, d: int, paths: int, seed: int) -> BrownianLattice:
    """Draw a reproducible Brownian lattice.

    Parameters
    ----------
    grid : TimeGrid
    d : int
        Brownian dimension.
    paths : int
        Number of independent trajectories.
    seed : int
        Seed for ``PCG64``; identical seeds give bit-identical increments.
    """
    if paths < 1:
        raise ValueError(f"paths must be >= 1, got {paths}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if grid.steps < 1:
        raise ValueError("grid needs at least one step")
    rng = np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    z = rng.standard_normal((paths, grid.steps, d))
    z *= np.sqrt(grid.dt)[None, :, None]
    return BrownianLattice(grid=grid, increments=z, seed=int(seed))


@dataclass(eq=False)
class AdaptedProcess:
    """Per-path values of a process on every grid point.

    ``values`` has shape ``(paths, steps + 1)`` for scalar processes or
    ``(paths, steps + 1, k)`` for vector-valued ones.  Adaptedness is a
    contract on the producer: the value at index ``i`` may only use increments
    with step index ``< i``.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (2, 3) or self.values.shape[1] != self.grid.steps + 1:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid with {self.grid.steps + 1} points"
            )

    @classmethod
    def constant(cls, lattice: BrownianLattice, c: float, k: Optional[int] = None) -> "AdaptedProcess":
        shape = (lattice.n_paths, lattice.grid.steps + 1) + (() if k is None else (k,))
        return cls(lattice.grid, np.full(shape, float(c)))

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def components(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    def check_on(self, lattice: BrownianLattice) -> None:
        if not self.grid.same_as(lattice.grid) or self.n_paths != lattice.n_paths:
            raise ValueError("process is not defined on this lattice")


def _check_range(grid: TimeGrid, start: int, stop: int) -> None:
    if not (0 <= start <= stop <= grid.last):
        raise IndexError(f"index range [{start}, {stop}] outside grid 0..{grid.last}")


def pathwise_lebesgue_integral(p: AdaptedProcess, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    """Left Riemann sum of a scalar process over ``[t_start, t_stop]`` per path."""
    stop = p.grid.last if stop is None else stop
    _check_range(p.grid, start, stop)
    vals = p.values if p.values.ndim == 2 else p.values[..., 0]
    return vals[:, start:stop] @ p.grid.dt[start:stop] if stop > start else np.zeros(p.n_paths)


def pathwise_ito_integral(
    z: AdaptedProcess, lattice: BrownianLattice, start: int = 0, stop: Optional[int] = None
) -> np.ndarray:
    """Per-path sum of ``z_{t_i} . dB_i`` for ``start <= i < stop``."""
    stop = lattice.grid.last if stop is None else stop
    _check_range(lattice.grid, start, stop)
    vals = z.values[..., None] if z.values.ndim == 2 else z.values
    if vals.shape[2] != lattice.d:
        raise ValueError(f"integrand has {vals.shape[2]} components, lattice has d={lattice.d}")
    if vals.shape[:2] != (lattice.n_paths, lattice.grid.steps + 1):
        raise ValueError("integrand is not defined on this lattice")
    return np.einsum("pik,pik->p", vals[:, start:stop, :], lattice.increments[:, start:stop, :])


@dataclass(eq=False)
class CumulativeBudget:
    """Running integral of ``u + v**2`` per path, with its declared bound ``M``."""

    u: AdaptedProcess
    v: AdaptedProcess
    M: float
    running: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError(f"budget bound M must be positive, got {self.M}")
        if not self.u.grid.same_as(self.v.grid) or self.u.n_paths != self.v.n_paths:
            raise ValueError("u and v must share grid and path count")
        if np.any(self.u.values < 0) or np.any(self.v.values < 0):
            raise ValueError("coefficient processes must be nonnegative")
        rate = self.u.values + self.v.values ** 2
        run = np.zeros_like(rate)
        np.cumsum(rate[:, :-1] * self.grid.dt[None, :], axis=1, out=run[:, 1:])
        self.running = run

    @property
    def grid(self) -> TimeGrid:
        return self.u.grid

    @property
    def final(self) -> np.ndarray:
        return self.running[:, -1]

    def step_slack(self) -> np.ndarray:
        """Largest single-step budget increment per path."""
        rate = self.u.values[:, :-1] + self.v.values[:, :-1] ** 2
        return (rate * self.grid.dt[None, :]).max(axis=1)

    def within_bound(self) -> bool:
        """Final value <= M plus one grid step of slack, on every path."""
        return bool(np.all(self.final <= self.M * (1 + _THRESHOLD_RTOL) + self.step_slack()))


@dataclass(frozen=True, eq=False)
class PartitionSpec:
    """Per-path stopping indices ``0 = T_0 <= T_1 <= ... <= T_N = last``.

    ``indices`` has shape ``(paths, N + 1)``.
    """

    indices: np.ndarray
    grid: TimeGrid

    @property
    def N(self) -> int:
        return self.indices.shape[1] - 1

    def times(self) -> np.ndarray:
        return self.grid.times[self.indices]

    def bounds(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Start and stop index per path of subinterval ``i`` (1-based)."""
        if not 1 <= i <= self.N:
            raise IndexError(f"subinterval {i} outside 1..{self.N}")
        return self.indices[:, i - 1], self.indices[:, i]

    def interval_budgets(self, budget: CumulativeBudget) -> np.ndarray:
        """Budget accumulated on each subinterval, shape ``(paths, N)``."""
        at = np.take_along_axis(budget.running, self.indices, axis=1)
        return np.diff(at, axis=1)


def build_partition(budget: CumulativeBudget, N: int) -> PartitionSpec:
    """Slice each path into ``N`` random intervals carrying budget about ``M/N`` each.

    ``T_i`` is the first grid index at which the running budget reaches
    ``i*M/N``, capped at the final index; ``T_N`` is always the final index.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    run = budget.running
    last = budget.grid.last
    thresholds = np.arange(1, N + 1) * (budget.M / N) - _THRESHOLD_RTOL * budget.M
    # running is nondecreasing per path, so counting points below a threshold
    # gives the first index at or above it
    below = np.stack([(run < thr).sum(axis=1) for thr in thresholds], axis=1)
    idx = np.empty((run.shape[0], N + 1), dtype=np.int64)
    idx[:, 0] = 0
    idx[:, 1:] = np.minimum(below, last)
    idx[:, -1] = last
    return PartitionSpec(indices=idx, grid=budget.grid)


def required_subintervals(p: float, M: float, c_p: float) -> int:
    """Smallest ``N`` with ``M/N <= min((4 c_p)^(-1/p), (4 c_p)^(-2/p))``."""
    if not (p > 1 and M > 0 and c_p > 0):
        raise ValueError(f"need p > 1, M > 0, c_p > 0; got p={p}, M={M}, c_p={c_p}")
    base = 4.0 * c_p
    threshold = min(base ** (-1.0 / p), base ** (-2.0 / p))
    N = max(1, math.ceil(M / threshold - 1e-9))
    # guard against the tolerance above rounding the wrong way
    while M / N > threshold * (1 + 1e-12):
        N += 1
    return N


def dump_lattice_csv(lattice: BrownianLattice, path) -> None:
    """Write a lattice as path-major CSV: one row per (path, grid index).

    Columns: ``path, index, time, dB_1..dB_d, B_1..B_d``.  The increment
    columns on a row hold the increment over the step *starting* at that
    index (empty on the final index).
    """
    d = lattice.d
    header = ["path", "index", "time"] + [f"dB_{k + 1}" for k in range(d)] + [f"B_{k + 1}" for k in range(d)]
    times = lattice.grid.times
    with open(path, "w", newline="") as fh:
        fh.write(f"# brownian lattice seed={lattice.seed} paths={lattice.n_paths} steps={lattice.grid.steps} d={d}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for p in range(lattice.n_paths):
            for i in range(lattice.grid.steps + 1):
                inc = lattice.increments[p, i] if i < lattice.grid.steps else [None] * d
                row = [p, i, repr(float(times[i]))]
                row += ["" if x is None else repr(float(x)) for x in inc]
                row += [repr(float(x)) for x in lattice.W[p, i]]
                w.writerow(row)
