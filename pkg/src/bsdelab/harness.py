"""Statistical experiments for comparison, minimal solutions and uniqueness.

Almost-sure statements are tested as "violation fraction at most 1 %" with a
tolerance ``eps_cmp = 3 x noise floor``.  The noise floor of a solve is the
empirical ``S^p`` distance between its value functions and those fitted on an
independent lattice (same problem, shifted seed), both evaluated on the
original paths.  For a difference of two solves the floors are combined in
quadrature.

Problems enter as factories ``lattice -> Problem`` so that the same problem
can be instantiated on a reseeded lattice.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .envelope import InfConvolutionSpec, gn_generator
from .generators import (
    Assumption,
    Problem,
    audit_profile,
    draw_probes,
    envelope_generator,
    mirrored,
)
from .norms import sp_norm
from .paths import BrownianLattice
from .solver import NonConvergenceError, SolutionPair, SolverConfig, solve, transfer_solution

__all__ = [
    "PreconditionError",
    "parallel_map",
    "NoiseFloor",
    "measure_noise_floor",
    "violation_fraction",
    "ComparisonScenario",
    "ComparisonReport",
    "run_comparison",
    "MinimalSchemeResult",
    "run_minimal_scheme",
    "maximal_via_signflip",
    "mirror_problem",
    "run_minimal_comparison",
    "UniquenessReport",
    "run_uniqueness_probe",
]

ProblemFactory = Callable[[BrownianLattice], Problem]

VIOLATION_LIMIT = 0.01
EPS_FACTOR = 3.0


class PreconditionError(ValueError):
    """A declared hypothesis failed its empirical check; ``probe`` describes the witness."""

    def __init__(self, message: str, probe: Optional[dict] = None):
        super().__init__(message)
        self.probe = probe or {}


def parallel_map(fn, items, workers: int):
    """``[fn(x) for x in items]`` on up to ``workers`` threads; result order follows ``items``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class NoiseFloor:
    value: float
    seed: int
    shifted_seed: int
    p: float


def measure_noise_floor(
    factory: ProblemFactory,
    lattice: BrownianLattice,
    config: SolverConfig = SolverConfig(),
    solution: Optional[SolutionPair] = None,
    seed_shift: int = 1,
) -> NoiseFloor:
    """Out-of-sample ``S^p`` distance between two independently fitted solutions."""
    problem = factory(lattice)
    if solution is None:
        solution = solve(problem, lattice, config)
    other = lattice.reseeded(lattice.seed + seed_shift)
    sol_b = solve(factory(other), other, config)
    Yb = transfer_solution(sol_b, problem, lattice)
    return NoiseFloor(
        value=sp_norm(Yb - solution.Y.values, problem.p),
        seed=lattice.seed,
        shifted_seed=other.seed,
        p=problem.p,
    )


def violation_fraction(lower: np.ndarray, upper: np.ndarray, eps: float) -> float:
    """Fraction of (path, grid point) pairs with ``lower > upper + eps``."""
    return float(np.mean(lower > upper + eps))


def _pool(*floors: float) -> float:
    return math.sqrt(sum(f * f for f in floors))


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonScenario:
    """Two problems on one lattice expected to satisfy ``y <= y'``.

    ``mode`` is ``"pointwise"`` (driver ordering ``g <= g'`` probed at random
    points) or ``"along_solution"`` (``g(y', z') <= g'(y', z')`` on the solved
    primed trajectory).  ``regular_side`` names the problem whose generator
    must pass the monotonicity and z-continuity audits.
    """

    name: str
    lower: ProblemFactory
    upper: ProblemFactory
    mode: str = "pointwise"
    regular_side: str = "lower"
    probes: int = 1000
    probe_scale: float = 3.0
    probe_seed: int = 0
    driver_tol: float = 1e-9

    def __post_init__(self):
        if self.mode not in ("pointwise", "along_solution"):
            raise ValueError(f"mode must be 'pointwise' or 'along_solution', got {self.mode!r}")
        if self.regular_side not in ("lower", "upper"):
            raise ValueError("regular_side must be 'lower' or 'upper'")


@dataclass
class ComparisonReport:
    scenario: str
    violation_fraction: float
    max_violation: float
    eps_cmp: float
    noise_floor_lower: float
    noise_floor_upper: float
    passed: bool
    identical: bool = False
    lower: Optional[SolutionPair] = field(default=None, repr=False)
    upper: Optional[SolutionPair] = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "scenario": self.scenario,
            "violation_fraction": self.violation_fraction,
            "max_violation": self.max_violation,
            "eps_cmp": self.eps_cmp,
            "noise_floor_lower": self.noise_floor_lower,
            "noise_floor_upper": self.noise_floor_upper,
            "passed": self.passed,
        }


def _check_preconditions(sc: ComparisonScenario, lo: Problem, up: Problem, lattice) -> None:
    bad = np.flatnonzero(lo.xi > up.xi)
    if bad.size:
        k = int(bad[np.argmax(lo.xi[bad] - up.xi[bad])])
        raise PreconditionError(
            f"{sc.name}: terminal values not ordered on {bad.size} paths",
            {"path": k, "xi": float(lo.xi[k]), "xi_prime": float(up.xi[k])},
        )
    side = lo if sc.regular_side == "lower" else up
    needed = (Assumption.MONOTONE_Y, Assumption.UNIFORM_CONTINUITY_Z)
    if not side.generator.claims(*needed):
        raise PreconditionError(f"{sc.name}: {sc.regular_side} generator does not declare monotone-y and uniform-continuity-z")
    for rep in audit_profile(side.generator, lattice, sc.probes, p=side.p, seed=sc.probe_seed, assumptions=needed):
        if not rep.passed:
            raise PreconditionError(f"{sc.name}: audit {rep.name} failed (worst ratio {rep.worst_ratio:.3g})", rep.worst_probe)
    if sc.mode == "pointwise":
        pr = draw_probes(lattice, sc.probes, sc.probe_scale, sc.probe_seed)
        g = lo.generator(pr.paths, pr.tidx, pr.y1, pr.z1)
        gp = up.generator(pr.paths, pr.tidx, pr.y1, pr.z1)
        excess = g - gp
        k = int(np.argmax(excess))
        if excess[k] > sc.driver_tol:
            raise PreconditionError(
                f"{sc.name}: driver ordering fails at {int(np.sum(excess > sc.driver_tol))} probes",
                {"path": int(pr.paths[k]), "tidx": int(pr.tidx[k]), "y": float(pr.y1[k]),
                 "z": pr.z1[k].tolist(), "excess": float(excess[k])},
            )


def run_comparison(
    scenario: ComparisonScenario,
    lattice: BrownianLattice,
    config: SolverConfig = SolverConfig(),
    workers: int = 1,
    seed_shift: int = 1,
) -> ComparisonReport:
    """Solve both problems and count points where ``y > y' + eps_cmp``.

    Raises
    ------
    PreconditionError
        If the terminal ordering, the declared regularity or the driver
        ordering fails its empirical check.
    """
    lo, up = scenario.lower(lattice), scenario.upper(lattice)
    if not lo.grid.same_as(up.grid):
        raise ValueError("comparison problems must share the lattice")
    _check_preconditions(scenario, lo, up, lattice)
    identical = scenario.lower is scenario.upper
    if identical:
        sol_lo = solve(lo, lattice, config)
        sol_up = solve(up, lattice, config)
        nf_lo = nf_up = 0.0
    else:
        sol_lo, sol_up = parallel_map(lambda pr: solve(pr, lattice, config), [lo, up], workers)
    if scenario.mode == "along_solution":
        gen_lo, gen_up = lo.generator, up.generator
        P, last = lattice.n_paths, lattice.grid.last
        paths = np.repeat(np.arange(P), last)
        tidx = np.tile(np.arange(last), P)
        y = sol_up.Y.values[:, :last].reshape(-1)
        z = sol_up.Z.values[:, :last].reshape(-1, lattice.d)
        excess = gen_lo(paths, tidx, y, z) - gen_up(paths, tidx, y, z)
        k = int(np.argmax(excess))
        if excess[k] > scenario.driver_tol:
            raise PreconditionError(
                f"{scenario.name}: driver ordering along the primed solution fails",
                {"path": int(paths[k]), "tidx": int(tidx[k]), "excess": float(excess[k])},
            )
    if not identical:
        nf_lo, nf_up = (
            f.value
            for f in parallel_map(
                lambda a: measure_noise_floor(a[0], lattice, config, a[1], seed_shift),
                [(scenario.lower, sol_lo), (scenario.upper, sol_up)],
                workers,
            )
        )
    eps = EPS_FACTOR * _pool(nf_lo, nf_up)
    y, yp = sol_lo.Y.values, sol_up.Y.values
    frac = violation_fraction(y, yp, eps)
    return ComparisonReport(
        scenario=scenario.name,
        violation_fraction=frac,
        max_violation=float(np.max(y - yp)),
        eps_cmp=eps,
        noise_floor_lower=nf_lo,
        noise_floor_upper=nf_up,
        passed=frac <= VIOLATION_LIMIT,
        identical=identical,
        lower=sol_lo,
        upper=sol_up,
    )


# ---------------------------------------------------------------------------
# minimal / maximal solutions


@dataclass
class MinimalSchemeResult:
    ns: list
    solutions: dict  # n -> SolutionPair
    envelope: Optional[SolutionPair]
    distances: list  # ||y^{n_{k+1}} - y^{n_k}||_S for consecutive n
    monotone_fractions: list  # fraction of y^{n_k} > y^{n_{k+1}} + eps
    lower_sandwich: dict  # n -> fraction of y^{n_1} > y^n + eps
    upper_sandwich: dict  # n -> fraction of y^n > Y_env + eps
    eps_monotone: float
    eps_envelope: float
    noise_floor: float
    noise_floor_envelope: float
    failures: dict = field(default_factory=dict)  # n -> message
    sign: int = 1

    @property
    def monotone_ok(self) -> bool:
        return all(f <= VIOLATION_LIMIT for f in self.monotone_fractions)

    @property
    def sandwich_ok(self) -> bool:
        return all(f <= VIOLATION_LIMIT for f in self.lower_sandwich.values()) and all(
            f <= VIOLATION_LIMIT for f in self.upper_sandwich.values()
        )

    @property
    def distances_decreasing(self) -> bool:
        """Successive distances strictly decrease over the last half of the n-range."""
        d = self.distances
        tail = d[len(d) // 2:] if len(d) > 1 else d
        return all(b < a for a, b in zip(tail, tail[1:]))

    @property
    def passed(self) -> bool:
        return not self.failures and self.monotone_ok and self.sandwich_ok and self.distances_decreasing

    def trace_rows(self) -> list:
        rows = []
        for k, n in enumerate(self.ns):
            sol = self.solutions.get(n)
            rows.append(
                {
                    "n": n,
                    "y0_mean": float(sol.Y.values[:, 0].mean()) if sol else math.nan,
                    "distance_to_next": self.distances[k] if k < len(self.distances) else "",
                    "monotone_fraction": self.monotone_fractions[k] if k < len(self.monotone_fractions) else "",
                    "lower_sandwich": self.lower_sandwich.get(n, ""),
                    "upper_sandwich": self.upper_sandwich.get(n, ""),
                }
            )
        return rows


def _gn_factory(factory: ProblemFactory, n: int, search: dict) -> ProblemFactory:
    def build(lat):
        pr = factory(lat)
        return pr.with_generator(gn_generator(InfConvolutionSpec(pr.generator, n, **search)), name=f"{pr.name}_n{n}")

    return build


def _envelope_factory(factory: ProblemFactory) -> ProblemFactory:
    def build(lat):
        pr = factory(lat)
        return pr.with_generator(envelope_generator(pr.generator), name=f"envelope({pr.name})")

    return build


def run_minimal_scheme(
    factory: ProblemFactory,
    lattice: BrownianLattice,
    ns: Sequence[int] = tuple(range(1, 9)),
    config: SolverConfig = SolverConfig(),
    search: Optional[dict] = None,
    workers: int = 1,
    seed_shift: int = 1,
) -> MinimalSchemeResult:
    """Solve with the regularised drivers ``g_n`` and the linear-growth envelope.

    A failing inner solve is recorded against its ``n``; the remaining ones
    still run.
    """
    search = dict(search or {})
    problem = factory(lattice)
    if not problem.generator.claims(Assumption.LINEAR_GROWTH, Assumption.CONTINUOUS):
        raise PreconditionError(f"{problem.name}: generator must declare linear-growth and continuous")
    ns = sorted(set(int(n) for n in ns))
    jobs = [(n, _gn_factory(factory, n, search)) for n in ns] + [("envelope", _envelope_factory(factory))]

    def run(job):
        key, fac = job
        try:
            return key, fac, solve(fac(lattice), lattice, config), None
        except NonConvergenceError as exc:
            return key, fac, None, str(exc)

    results = parallel_map(run, jobs, workers)
    solutions, failures, factories = {}, {}, {}
    envelope = None
    for key, fac, sol, err in results:
        factories[key] = fac
        if key == "envelope":
            envelope = sol
            if err:
                failures["envelope"] = err
        elif sol is not None:
            solutions[key] = sol
        else:
            failures[key] = err

    done = [n for n in ns if n in solutions]
    floors = []
    if done:
        floors.append((factories[done[-1]], solutions[done[-1]]))
    if envelope is not None:
        floors.append((factories["envelope"], envelope))
    measured = parallel_map(lambda a: measure_noise_floor(a[0], lattice, config, a[1], seed_shift).value, floors, workers)
    nf = measured[0] if done else math.nan
    nf_env = measured[-1] if envelope is not None else math.nan
    eps_mono = EPS_FACTOR * _pool(nf, nf)
    eps_env = EPS_FACTOR * _pool(nf, nf_env if envelope is not None else 0.0)

    p = problem.p
    distances, mono = [], []
    for a, b in zip(done, done[1:]):
        ya, yb = solutions[a].Y.values, solutions[b].Y.values
        distances.append(sp_norm(yb - ya, p))
        mono.append(violation_fraction(ya, yb, eps_mono))
    lower, upper = {}, {}
    if done:
        y1 = solutions[done[0]].Y.values
        for n in done:
            yn = solutions[n].Y.values
            lower[n] = violation_fraction(y1, yn, eps_mono)
            if envelope is not None:
                upper[n] = violation_fraction(yn, envelope.Y.values, eps_env)
    return MinimalSchemeResult(
        ns=ns,
        solutions=solutions,
        envelope=envelope,
        distances=distances,
        monotone_fractions=mono,
        lower_sandwich=lower,
        upper_sandwich=upper,
        eps_monotone=eps_mono,
        eps_envelope=eps_env,
        noise_floor=nf,
        noise_floor_envelope=nf_env,
        failures=failures,
    )


def mirror_problem(problem: Problem) -> Problem:
    """``(xi, g) -> (-xi, (t, y, z) -> -g(t, -y, -z))``."""
    return problem.with_generator(mirrored(problem.generator), name=f"mirror({problem.name})", xi=-problem.xi)


def _negate(sol: Optional[SolutionPair]) -> Optional[SolutionPair]:
    if sol is None:
        return None
    return replace(
        sol,
        Y=replace(sol.Y, values=-sol.Y.values),
        Z=replace(sol.Z, values=-sol.Z.values),
        driver=replace(sol.driver, values=-sol.driver.values),
        models={},
    )


def maximal_via_signflip(
    factory: ProblemFactory,
    lattice: BrownianLattice,
    ns: Sequence[int] = tuple(range(1, 9)),
    config: SolverConfig = SolverConfig(),
    search: Optional[dict] = None,
    workers: int = 1,
) -> MinimalSchemeResult:
    """Maximal-solution scheme: run the minimal scheme on the mirrored problem and negate.

    Fractions and distances are those of the mirrored run, so monotonicity
    reads as "nonincreasing in n" for the returned solutions, and the
    returned envelope is a lower bound.
    """
    res = run_minimal_scheme(lambda lat: mirror_problem(factory(lat)), lattice, ns, config, search, workers)
    res.solutions = {n: _negate(s) for n, s in res.solutions.items()}
    res.envelope = _negate(res.envelope)
    res.sign = -1
    return res


@dataclass
class MinimalComparison:
    violation_fraction: float
    eps_cmp: float
    passed: bool
    lower: MinimalSchemeResult = field(repr=False)
    upper: MinimalSchemeResult = field(repr=False)


def run_minimal_comparison(
    lower: ProblemFactory,
    upper: ProblemFactory,
    lattice: BrownianLattice,
    ns: Sequence[int] = tuple(range(1, 9)),
    config: SolverConfig = SolverConfig(),
    probes: int = 1000,
    search: Optional[dict] = None,
    workers: int = 1,
) -> MinimalComparison:
    """Order of minimal solutions for ordered data, compared at the largest ``n``."""
    lo, up = lower(lattice), upper(lattice)
    if np.any(lo.xi > up.xi):
        raise PreconditionError("terminal values not ordered")
    pr = draw_probes(lattice, probes)
    excess = lo.generator(pr.paths, pr.tidx, pr.y1, pr.z1) - up.generator(pr.paths, pr.tidx, pr.y1, pr.z1)
    if excess.max() > 1e-9:
        raise PreconditionError("drivers not ordered on probes", {"excess": float(excess.max())})
    a = run_minimal_scheme(lower, lattice, ns, config, search, workers)
    b = run_minimal_scheme(upper, lattice, ns, config, search, workers)
    n = max(set(a.solutions) & set(b.solutions))
    eps = EPS_FACTOR * _pool(a.noise_floor, b.noise_floor)
    frac = violation_fraction(a.solutions[n].Y.values, b.solutions[n].Y.values, eps)
    return MinimalComparison(frac, eps, frac <= VIOLATION_LIMIT, a, b)


# ---------------------------------------------------------------------------
# uniqueness


@dataclass
class UniquenessReport:
    labels: list
    distances: dict  # (label_a, label_b) -> S^p distance
    noise_floor: float
    threshold: float
    passed: bool
    audits: list = field(default_factory=list, repr=False)

    def rows(self) -> list:
        return [
            {"run_a": a, "run_b": b, "distance": d, "threshold": self.threshold, "passed": d <= self.threshold}
            for (a, b), d in self.distances.items()
        ]


def run_uniqueness_probe(
    factory: ProblemFactory,
    lattice: BrownianLattice,
    config: SolverConfig = SolverConfig(),
    guesses: Sequence[str] = ("terminal", "zero"),
    partition_counts: Optional[Sequence[int]] = None,
    probes: int = 1000,
    workers: int = 1,
    seed_shift: int = 1,
) -> UniquenessReport:
    """Solve from different initial guesses and partition counts and compare.

    The generator is first audited for Lipschitz continuity in ``y`` and
    uniform continuity in ``z``; a failed audit raises
    :class:`PreconditionError` before anything is solved.
    """
    problem = factory(lattice)
    needed = (Assumption.LIPSCHITZ_Y_CONTINUOUS_Z,)
    audits = audit_profile(problem.generator, lattice, probes, p=problem.p, assumptions=needed)
    for rep in audits:
        if not rep.passed:
            raise PreconditionError(
                f"{problem.name}: audit {rep.name} failed (worst ratio {rep.worst_ratio:.3g})", rep.worst_probe
            )
    base = solve(problem, lattice, config)
    if partition_counts is None:
        partition_counts = (base.diagnostics.N, 2 * base.diagnostics.N)
    runs = [("base", base)]
    jobs = []
    for g in guesses:
        for N in partition_counts:
            label = f"{g}/N={N}"
            if g == config.initial_guess and N == base.diagnostics.N:
                continue
            jobs.append((label, replace(config, initial_guess=g, partitions=int(N))))
    runs += parallel_map(lambda job: (job[0], solve(problem, lattice, job[1])), jobs, workers)
    nf = measure_noise_floor(factory, lattice, config, base, seed_shift).value
    threshold = EPS_FACTOR * nf
    dist = {}
    for i in range(len(runs)):
        for j in range(i + 1, len(runs)):
            dist[(runs[i][0], runs[j][0])] = sp_norm(runs[i][1].Y.values - runs[j][1].Y.values, problem.p)
    return UniquenessReport(
        labels=[r[0] for r in runs],
        distances=dist,
        noise_floor=nf,
        threshold=threshold,
        passed=all(d <= threshold for d in dist.values()),
        audits=audits,
    )
