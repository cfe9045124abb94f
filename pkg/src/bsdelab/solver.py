"""Regression-based Picard solver on a stopping-time partition.

On each random subinterval ``[T_{i-1}, T_i]`` the Picard map freezes the
driver at the previous iterate, ``g_s = g(s, y_s, z_s)``, and then steps
backward through the grid::

    Y_j = E[Y_{j+1} + g_j dt_j | F_j]
    Z_j = E[(Y_{j+1} - E[Y_{j+1} | F_j]) dB_j | F_j] / dt_j

Conditional expectations are least-squares projections on polynomials of the
current Brownian state (plus optional problem-supplied regressors).  Centring
``Y_{j+1}`` before multiplying by ``dB_j`` leaves the ``Z`` estimate unchanged
in exact arithmetic but removes most of its Monte Carlo variance.

Subintervals are solved backward from ``T_N = T``; each path contributes only
to the subinterval it is in at time ``t_j``, and the value at ``T_i`` is the
terminal value for the next subinterval down.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np
from numpy.polynomial import hermite_e

from .generators import Problem
from .norms import _pmean
from .paths import (
    AdaptedProcess,
    BrownianLattice,
    CumulativeBudget,
    PartitionSpec,
    build_partition,
    required_subintervals,
)

__all__ = [
    "RegressionBasis",
    "FittedModel",
    "SolverConfig",
    "SubintervalTrace",
    "SolveDiagnostics",
    "SolutionPair",
    "NonConvergenceError",
    "regression_state",
    "fit_regression",
    "conditional_expectation",
    "picard_step",
    "solve_subinterval",
    "solve",
    "transfer_solution",
    "default_c_p",
]


class NonConvergenceError(RuntimeError):
    """Picard iteration did not reach the tolerance; carries the distance trace."""

    def __init__(self, message: str, trace: "SubintervalTrace", diagnostics: Optional["SolveDiagnostics"] = None):
        super().__init__(message)
        self.trace = trace
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class RegressionBasis:
    """Total-degree polynomial basis in the standardised regression state.

    Uses probabilists' Hermite polynomials per coordinate, which keeps the
    normal equations well conditioned for Gaussian-like states.  Without
    ``cross_terms`` only pure powers of single coordinates are used.
    """

    degree: int = 3
    cross_terms: bool = True

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")

    def exponents(self, k: int) -> np.ndarray:
        """Exponent tuples of the basis in ``k`` variables, constant first."""
        out = []
        for total in range(self.degree + 1):
            for e in itertools.product(range(total + 1), repeat=k):
                if sum(e) != total:
                    continue
                if not self.cross_terms and sum(1 for x in e if x) > 1:
                    continue
                out.append(e)
        return np.array(out, dtype=np.int64).reshape(len(out), k)

    def size(self, k: int) -> int:
        return self.exponents(k).shape[0]


def _features(std_state: np.ndarray, exps: np.ndarray, degree: int) -> np.ndarray:
    n, k = std_state.shape
    X = np.ones((n, exps.shape[0]))
    for c in range(k):
        V = hermite_e.hermevander(std_state[:, c], degree)
        X *= V[:, exps[:, c]]
    return X


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A fitted regression ``state -> value`` that can be evaluated on new states."""

    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    exponents: np.ndarray
    degree: int
    coef: np.ndarray  # (m,) or (m, r)
    rows: int

    def predict(self, state: np.ndarray) -> np.ndarray:
        s = (state[:, self.kept] - self.mean[self.kept]) / self.scale[self.kept]
        return _features(s, self.exponents, self.degree) @ self.coef


class _Projector:
    """Least-squares projection onto the basis at one time step, reused across iterations."""

    def __init__(self, state: np.ndarray, basis: RegressionBasis, ridge: float, cond_limit: float):
        n, k = state.shape
        mean = state.mean(axis=0)
        scale = state.std(axis=0)
        kept = np.flatnonzero(scale > 1e-12 * (1.0 + np.abs(mean)))
        scale = np.where(scale > 0, scale, 1.0)
        exps = basis.exponents(kept.size)
        self.mean, self.scale, self.kept, self.exps, self.degree = mean, scale, kept, exps, basis.degree
        self.rows = n
        X = _features((state[:, kept] - mean[kept]) / scale[kept], exps, basis.degree)
        gram = X.T @ X
        self.ridged = False
        try:
            cond = float(np.linalg.cond(gram))
        except np.linalg.LinAlgError:
            cond = math.inf
        if not math.isfinite(cond) or cond > cond_limit:
            gram = gram + ridge * max(np.trace(gram) / gram.shape[0], 1e-300) * np.eye(gram.shape[0])
            self.ridged = True
            cond = float(np.linalg.cond(gram))
        self.cond = cond
        self.X = X
        self.gram = gram

    def coef(self, rhs: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.gram, self.X.T @ rhs)

    def model(self, coef: np.ndarray) -> FittedModel:
        return FittedModel(self.mean, self.scale, self.kept, self.exps, self.degree, coef, self.rows)


def regression_state(lattice: BrownianLattice, j: int, aux: Optional[np.ndarray] = None, rows=None) -> np.ndarray:
    """Regressors at grid index ``j``: ``B_{t_j}`` and any auxiliary state."""
    sel = slice(None) if rows is None else rows
    st = lattice.W[sel, j, :]
    if aux is not None:
        st = np.concatenate([st, aux[sel, j, :]], axis=1)
    return st


def fit_regression(
    state: np.ndarray, values: np.ndarray, basis: RegressionBasis, ridge: float = 1e-8, cond_limit: float = 1e10
) -> FittedModel:
    """Least-squares fit of ``values`` on the basis evaluated at ``state``."""
    proj = _Projector(np.asarray(state, dtype=float), basis, ridge, cond_limit)
    return proj.model(proj.coef(np.asarray(values, dtype=float)))


def conditional_expectation(
    values: np.ndarray,
    at: int,
    lattice: BrownianLattice,
    basis: RegressionBasis = RegressionBasis(),
    aux: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Regression estimate of ``E[values | F_{t_at}]`` on every path.

    At ``at = 0`` the state is constant, so this is the sample mean.
    """
    if not 0 <= at <= lattice.grid.last:
        raise IndexError(f"time index {at} outside grid")
    state = regression_state(lattice, at, aux)
    proj = _Projector(state, basis, 1e-8, 1e10)
    return proj.X @ proj.coef(np.asarray(values, dtype=float))


def default_c_p(p: float) -> float:
    return 4.0 ** (p - 1.0)


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``tol`` is relative: iteration stops once the successive distance is at
    most ``tol * (||Y||_S + ||Z||_M) + atol`` on the subinterval.
    ``partitions`` is ``"auto"`` (smallest count from the budget rule with
    constant ``c_p``, default ``4^(p-1)``) or a positive integer.
    """

    basis: RegressionBasis = RegressionBasis()
    tol: float = 1e-10
    atol: float = 1e-13
    max_iter: int = 60
    partitions: Union[int, str] = "auto"
    c_p: Optional[float] = None
    initial_guess: str = "terminal"
    ratio_limit: float = 0.9
    ridge: float = 1e-8
    cond_limit: float = 1e10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.partitions != "auto" and (int(self.partitions) != self.partitions or int(self.partitions) < 1):
            raise ValueError(f"partitions must be 'auto' or a positive integer, got {self.partitions!r}")
        if self.initial_guess not in ("terminal", "zero"):
            raise ValueError("initial_guess must be 'terminal' or 'zero'")
        if self.c_p is not None and not self.c_p > 0:
            raise ValueError("c_p must be positive")


@dataclass
class SubintervalTrace:
    index: int
    first_index: int
    last_index: int
    active_points: int
    distances: list = field(default_factory=list)
    converged: bool = False
    flags: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def ratios(self) -> list:
        d = self.distances
        return [d[k + 1] / d[k] if d[k] > 0 else (0.0 if d[k + 1] == 0 else math.inf) for k in range(len(d) - 1)]

    def tail_ratios(self) -> list:
        """Ratios ``d_{k+1}/d_k`` for ``k >= 2``."""
        return self.ratios[1:]


@dataclass
class SolveDiagnostics:
    N: int
    N_required: int
    c_p: float
    traces: list
    flags: list = field(default_factory=list)
    suggestion: Optional[str] = None
    residual_mean: float = math.nan
    residual_mean_abs: float = math.nan
    residual_by_step: Optional[np.ndarray] = None
    ridged_fits: int = 0
    max_condition: float = 0.0

    @property
    def max_tail_ratio(self) -> float:
        r = [x for t in self.traces for x in t.tail_ratios()]
        return max(r) if r else 0.0

    def iteration_rows(self) -> list:
        rows = []
        for t in self.traces:
            ratios = t.ratios
            for k, dist in enumerate(t.distances):
                rows.append(
                    {
                        "subinterval": t.index,
                        "iteration": k + 1,
                        "distance": dist,
                        "ratio": ratios[k - 1] if k >= 1 else "",
                    }
                )
        return rows


@dataclass(eq=False)
class SolutionPair:
    """Discrete solution ``(Y, Z)`` with the driver values along it."""

    Y: AdaptedProcess
    Z: AdaptedProcess
    driver: AdaptedProcess
    diagnostics: SolveDiagnostics
    partition: PartitionSpec
    models: Dict = field(default_factory=dict, repr=False)
    name: str = ""

    @property
    def grid(self):
        return self.Y.grid

    @property
    def n_paths(self) -> int:
        return self.Y.n_paths


# ---------------------------------------------------------------------------
# Picard machinery


class _Interval:
    """Active region and cached projections for one subinterval."""

    def __init__(self, lattice, problem, config, start, stop, index):
        self.lattice, self.problem, self.config, self.index = lattice, problem, config, index
        self.start, self.stop = start, stop
        self.lo = int(start.min()) if start.size else 0
        self.hi = int(stop.max()) if stop.size else 0
        j = np.arange(lattice.grid.steps + 1)
        self.active = (start[:, None] <= j[None, :]) & (j[None, :] < stop[:, None])
        self.rows = {t: np.flatnonzero(self.active[:, t]) for t in range(self.lo, self.hi)}
        self.rows = {t: r for t, r in self.rows.items() if r.size}
        self.points = np.nonzero(self.active)
        self._proj: Dict[int, _Projector] = {}

    @property
    def empty(self) -> bool:
        return not self.rows

    def projector(self, t: int) -> _Projector:
        if t not in self._proj:
            rows = self.rows[t]
            state = regression_state(self.lattice, t, self.problem.aux_state, rows)
            self._proj[t] = _Projector(state, self.config.basis, self.config.ridge, self.config.cond_limit)
        return self._proj[t]

    def driver(self, Y, Z) -> np.ndarray:
        G = np.zeros_like(Y)
        p, t = self.points
        if p.size:
            G[p, t] = self.problem.generator(p, t, Y[p, t], Z[p, t])
        return G

    def apply(self, Y_prev, Z_prev, Y_base):
        """One application of the Picard map.  ``Y_base`` carries the terminal values."""
        G = self.driver(Y_prev, Z_prev)
        Y = Y_base.copy()
        Z = np.zeros_like(Z_prev)
        dt = self.lattice.grid.dt
        dB = self.lattice.increments
        coefs = {}
        for t in range(self.hi - 1, self.lo - 1, -1):
            rows = self.rows.get(t)
            if rows is None:
                continue
            proj = self.projector(t)
            nxt = Y[rows, t + 1]
            c = proj.coef(np.stack([nxt, G[rows, t] * dt[t]], axis=1))
            fit = proj.X @ c
            Y[rows, t] = fit[:, 0] + fit[:, 1]
            coefs[t] = c[:, 0] + c[:, 1]
            centred = nxt - fit[:, 0]
            zc = proj.coef(centred[:, None] * dB[rows, t, :])
            Z[rows, t, :] = (proj.X @ zc) / dt[t]
        return Y, Z, coefs

    def _norms(self, Y, Z, p) -> float:
        lo, hi = self.lo, self.hi
        act = self.active[:, lo:hi]
        sup = np.where(act, np.abs(Y[:, lo:hi]), 0.0).max(axis=1)
        sq = np.where(act, np.einsum("pik,pik->pi", Z[:, lo:hi], Z[:, lo:hi]), 0.0) @ self.lattice.grid.dt[lo:hi]
        return _pmean(sup, p) + _pmean(np.sqrt(sq), p)

    def distance(self, Y1, Z1, Y0, Z0, p) -> float:
        return self._norms(Y1 - Y0, Z1 - Z0, p)

    def size(self, Y, Z, p) -> float:
        return self._norms(Y, Z, p)


def _initial_guess(region: _Interval, Y_base: np.ndarray, Z_shape, how) -> tuple:
    Y = Y_base.copy()
    Z = np.zeros(Z_shape)
    p, t = region.points
    if isinstance(how, SolutionPair):
        Y[p, t] = how.Y.values[p, t]
        Z[p, t] = how.Z.values[p, t]
    elif how == "zero":
        Y[p, t] = 0.0
    elif how == "terminal":
        Y[p, t] = Y_base[p, region.stop[p]]
    else:
        raise ValueError(f"unknown initial guess {how!r}")
    return Y, Z


def solve_subinterval(region: _Interval, Y_base, Z_shape, config: SolverConfig, initial=None):
    """Iterate the Picard map on one subinterval until the successive distance is small."""
    p_ord = region.problem.p
    Y0, Z0 = _initial_guess(region, Y_base, Z_shape, config.initial_guess if initial is None else initial)
    trace = SubintervalTrace(
        index=region.index,
        first_index=region.lo,
        last_index=region.hi,
        active_points=int(region.points[0].size),
    )
    coefs = {}
    for _ in range(config.max_iter):
        Y1, Z1, coefs = region.apply(Y0, Z0, Y_base)
        d = region.distance(Y1, Z1, Y0, Z0, p_ord)
        trace.distances.append(d)
        Y0, Z0 = Y1, Z1
        if d <= config.tol * region.size(Y1, Z1, p_ord) + config.atol:
            trace.converged = True
            break
    if any(r > config.ratio_limit for r in trace.tail_ratios()):
        trace.flags.append("ratio_exceeded")
    if not trace.converged:
        raise NonConvergenceError(
            f"subinterval {region.index}: no convergence in {config.max_iter} iterations "
            f"(last distance {trace.distances[-1]:.3e})",
            trace,
        )
    return Y0, Z0, coefs, trace


def picard_step(
    prev: SolutionPair,
    problem: Problem,
    lattice: BrownianLattice,
    config: SolverConfig = SolverConfig(),
    start: int = 0,
    stop: Optional[int] = None,
    active: Optional[np.ndarray] = None,
) -> SolutionPair:
    """Apply the Picard map once on ``[start, stop]`` (or on the marked points of ``active``).

    Values of ``prev.Y`` at ``stop`` (or just after each path's active run)
    are the terminal values and are left unchanged.
    """
    stop = lattice.grid.last if stop is None else stop
    P = lattice.n_paths
    if active is None:
        s = np.full(P, start, dtype=np.int64)
        e = np.full(P, stop, dtype=np.int64)
    else:
        active = np.asarray(active, dtype=bool)
        has = active.any(axis=1)
        s = np.where(has, active.argmax(axis=1), lattice.grid.last)
        e = np.where(has, active.shape[1] - active[:, ::-1].argmax(axis=1), lattice.grid.last)
    region = _Interval(lattice, problem, config, s, e, 1)
    Y, Z, _ = region.apply(prev.Y.values, prev.Z.values, prev.Y.values)
    G = region.driver(prev.Y.values, prev.Z.values)
    return SolutionPair(
        Y=AdaptedProcess(lattice.grid, Y),
        Z=AdaptedProcess(lattice.grid, Z),
        driver=AdaptedProcess(lattice.grid, G),
        diagnostics=prev.diagnostics,
        partition=prev.partition,
        name=problem.name,
    )


def problem_budget(problem: Problem) -> CumulativeBudget:
    gen = problem.generator
    return CumulativeBudget(gen.u_or_zero(), gen.v_or_zero(), gen.M)


def solve(
    problem: Problem,
    lattice: BrownianLattice,
    config: SolverConfig = SolverConfig(),
    initial: Union[None, str, SolutionPair] = None,
) -> SolutionPair:
    """Solve ``problem`` on ``lattice`` by chained Picard iteration.

    Raises
    ------
    NonConvergenceError
        If any subinterval fails to converge; the error carries the trace.
    """
    gen = problem.generator
    if not gen.grid.same_as(lattice.grid) or gen.n_paths != lattice.n_paths or gen.d != lattice.d:
        raise ValueError("problem and lattice do not match")
    p = problem.p
    c_p = default_c_p(p) if config.c_p is None else config.c_p
    N_req = required_subintervals(p, gen.M, c_p)
    N = N_req if config.partitions == "auto" else int(config.partitions)
    partition = build_partition(problem_budget(problem), N)
    diag = SolveDiagnostics(N=N, N_required=N_req, c_p=c_p, traces=[])
    if N < N_req:
        diag.flags.append("partition_below_required")

    grid = lattice.grid
    P, last, d = lattice.n_paths, grid.last, lattice.d
    Y = np.zeros((P, last + 1))
    Y[:, last] = problem.xi
    Z = np.zeros((P, last + 1, d))
    models = {}
    for i in range(N, 0, -1):
        s, e = partition.bounds(i)
        region = _Interval(lattice, problem, config, s, e, i)
        if region.empty:
            continue
        try:
            Yi, Zi, coefs, trace = solve_subinterval(region, Y, Z.shape, config, initial)
        except NonConvergenceError as exc:
            diag.traces.append(exc.trace)
            exc.diagnostics = diag
            raise
        pts = region.points
        Y[pts] = Yi[pts]
        Z[pts] = Zi[pts]
        for t, c in coefs.items():
            proj = region.projector(t)
            models[(i, t)] = proj.model(c)
            diag.ridged_fits += int(proj.ridged)
            diag.max_condition = max(diag.max_condition, proj.cond)
        diag.traces.append(trace)
        if "ratio_exceeded" in trace.flags and "ratio_exceeded" not in diag.flags:
            diag.flags.append("ratio_exceeded")
    diag.traces.sort(key=lambda t: t.index)
    if diag.flags:
        diag.suggestion = f"increase the partition count above {N} (budget rule asks for {N_req})"

    G = np.zeros_like(Y)
    paths = np.repeat(np.arange(P), last)
    tidx = np.tile(np.arange(last), P)
    G[:, :last] = gen(paths, tidx, Y[:, :last].reshape(-1), Z[:, :last].reshape(-1, d)).reshape(P, last)
    resid = Y[:, :-1] - Y[:, 1:] - G[:, :-1] * grid.dt[None, :] + np.einsum("pik,pik->pi", Z[:, :-1], lattice.increments)
    diag.residual_by_step = resid.mean(axis=0)
    diag.residual_mean = float(resid.mean())
    diag.residual_mean_abs = float(np.abs(diag.residual_by_step).mean())
    return SolutionPair(
        Y=AdaptedProcess(grid, Y),
        Z=AdaptedProcess(grid, Z),
        driver=AdaptedProcess(grid, G),
        diagnostics=diag,
        partition=partition,
        models=models,
        name=problem.name,
    )


def transfer_solution(source: SolutionPair, problem: Problem, lattice: BrownianLattice) -> np.ndarray:
    """Evaluate ``source``'s fitted value functions on another lattice.

    ``problem`` must be the same problem instantiated on ``lattice``.  Points
    in a subinterval the source never fitted at that time use the source fit
    at the same time with the most rows.  Returns ``Y`` of shape
    ``(paths, points)`` with the target's terminal values at ``T``.
    """
    grid = lattice.grid
    if not grid.same_as(source.grid):
        raise ValueError("source and target grids differ")
    partition = build_partition(problem_budget(problem), source.diagnostics.N)
    by_time: Dict[int, FittedModel] = {}
    for (i, t), m in source.models.items():
        if t not in by_time or m.rows > by_time[t].rows:
            by_time[t] = m
    Y = np.zeros((lattice.n_paths, grid.last + 1))
    Y[:, -1] = problem.xi
    j = np.arange(grid.last + 1)
    for i in range(1, partition.N + 1):
        s, e = partition.bounds(i)
        active = (s[:, None] <= j[None, :]) & (j[None, :] < e[:, None])
        for t in np.flatnonzero(active.any(axis=0)):
            rows = np.flatnonzero(active[:, t])
            model = source.models.get((i, int(t)), by_time.get(int(t)))
            if model is None:
                raise ValueError(f"source has no fitted value function at time index {t}")
            Y[rows, t] = model.predict(regression_state(lattice, int(t), problem.aux_state, rows))
    return Y
