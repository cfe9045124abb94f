"""Generators g(omega, t, y, z) with random coefficient processes.

A :class:`GeneratorSpec` bundles a vectorised evaluator with the coefficient
processes ``u``, ``v``, ``f`` that its structural assumptions refer to, the
pathwise budget bound ``M`` and the set of assumptions it claims.  The
assumptions are named by what they say:

================================  ==============================================
``stochastic-lipschitz``          ``|g(y1,z1)-g(y2,z2)| <= u|y1-y2| + v|z1-z2|``
                                  with ``int (u + v^2) dt <= M`` pathwise
``integrable-driver``             ``E[(int |g(t,0,0)| dt)^p] < inf``
``monotone-y``                    ``sgn(y1-y2)(g(y1,z)-g(y2,z)) <= u|y1-y2|``,
                                  ``int u dt <= M``
``uniform-continuity-z``          ``|g(y,z1)-g(y,z2)| <= v phi(|z1-z2|)``,
                                  ``int v^2 dt <= M`` (and ``int v dt <= M`` if
                                  ``phi`` has a nonzero offset)
``linear-growth``                 ``|g(y,z)| <= f + u|y| + v|z|``
``continuous``                    ``g`` continuous in ``(y, z)``
``lipschitz-y-continuous-z``      ``|g(y1,z1)-g(y2,z2)| <= u|y1-y2| + v phi(|z1-z2|)``
================================  ==============================================

All "for almost every (omega, t)" statements are checked statistically by
probing random ``(path, time, y, z)`` points; audits never prove anything.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional

import numpy as np

from .expressions import compile_expression
from .paths import AdaptedProcess, BrownianLattice, TimeGrid, pathwise_lebesgue_integral

__all__ = [
    "Assumption",
    "ContinuityModulus",
    "MODULI",
    "GeneratorSpec",
    "Problem",
    "ProbeSet",
    "AuditReport",
    "from_formula",
    "draw_probes",
    "audit_budget",
    "audit_lipschitz",
    "audit_monotonicity",
    "audit_z_uniform_continuity",
    "audit_linear_growth",
    "audit_continuity",
    "audit_integrability",
    "audit_profile",
    "envelope_generator",
    "mirrored",
    "catalog",
    "build_problem",
    "terminal_from_expression",
    "generator_from_expressions",
    "UnknownCatalogEntry",
]

TOL_ANALYTIC = 1e-9
TOL_NUMERICAL = 1e-6
_BUDGET_RTOL = 1e-12


class Assumption(str, enum.Enum):
    STOCHASTIC_LIPSCHITZ = "stochastic-lipschitz"
    INTEGRABLE_DRIVER = "integrable-driver"
    MONOTONE_Y = "monotone-y"
    UNIFORM_CONTINUITY_Z = "uniform-continuity-z"
    LINEAR_GROWTH = "linear-growth"
    CONTINUOUS = "continuous"
    LIPSCHITZ_Y_CONTINUOUS_Z = "lipschitz-y-continuous-z"

    @classmethod
    def parse(cls, s) -> "Assumption":
        if isinstance(s, cls):
            return s
        try:
            return cls(str(s).strip().lower())
        except ValueError:
            raise ValueError(f"unknown assumption {s!r}; choose from {[a.value for a in cls]}") from None


A = Assumption
ALL_ASSUMPTIONS = frozenset(Assumption)


@dataclass(frozen=True, eq=False)
class ContinuityModulus:
    """Nondecreasing ``phi`` with ``phi(0) = 0`` and ``phi(x) <= a x + b``."""

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    a: float
    b: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("modulus slopes must be nonnegative")

    def __call__(self, x):
        return self.phi(np.asarray(x, dtype=float))

    @property
    def growth_constant(self) -> float:
        """A ``K`` with ``phi(x) <= K (x + 1)``."""
        return max(self.a, self.b)

    def check(self, xs: np.ndarray, tol: float = 1e-12) -> dict:
        xs = np.sort(np.abs(np.asarray(xs, dtype=float)))
        vals = self(xs)
        return {
            "phi0": float(self(np.zeros(1))[0]),
            "nondecreasing": bool(np.all(np.diff(vals) >= -tol)),
            "within_envelope": bool(np.all(vals <= self.a * xs + self.b + tol)),
            "nonnegative": bool(np.all(vals >= -tol)),
        }


MODULI: Dict[str, ContinuityModulus] = {
    "identity": ContinuityModulus("identity", lambda x: x, 1.0, 0.0),
    "sqrt_clamped": ContinuityModulus("sqrt_clamped", lambda x: np.sqrt(np.minimum(x, 1.0)), 1.0, 1.0),
    "sqrt": ContinuityModulus("sqrt", np.sqrt, 1.0, 1.0),
    "clamp": ContinuityModulus("clamp", lambda x: np.minimum(x, 1.0), 0.0, 1.0),
    "log1p": ContinuityModulus("log1p", np.log1p, 1.0, 0.0),
    "affine": ContinuityModulus("affine", lambda x: 2.0 * x, 2.0, 0.0),
}


Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """A generator plus the data its assumptions refer to.

    ``evaluate(paths, tidx, y, z)`` takes integer arrays ``paths`` and
    ``tidx`` of length ``n``, ``y`` of shape ``(n,)`` and ``z`` of shape
    ``(n, d)`` and returns ``(n,)`` values.  It must be a pure function of its
    inputs.
    """

    name: str
    evaluate: Evaluator
    grid: TimeGrid
    n_paths: int
    d: int
    M: float
    profile: frozenset
    u: Optional[AdaptedProcess] = None
    v: Optional[AdaptedProcess] = None
    f: Optional[AdaptedProcess] = None
    modulus: Optional[ContinuityModulus] = None
    depends_on_y: bool = True
    depends_on_z: bool = True
    numerical: bool = False

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError(f"M must be positive, got {self.M}")
        object.__setattr__(self, "profile", frozenset(Assumption.parse(a) for a in self.profile))
        for name in ("u", "v", "f"):
            proc = getattr(self, name)
            if proc is not None and (not proc.grid.same_as(self.grid) or proc.n_paths != self.n_paths):
                raise ValueError(f"coefficient {name} does not share the generator's grid and paths")

    def __call__(self, paths, tidx, y, z) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, self.d) if self.d > 1 else z[:, None]
        paths = np.broadcast_to(np.asarray(paths, dtype=np.int64), y.shape)
        tidx = np.broadcast_to(np.asarray(tidx, dtype=np.int64), y.shape)
        return np.asarray(self.evaluate(paths, tidx, y, z), dtype=float)

    @property
    def tol_audit(self) -> float:
        return TOL_NUMERICAL if self.numerical else TOL_ANALYTIC

    def _coef(self, name: str, paths, tidx) -> np.ndarray:
        proc = getattr(self, name)
        if proc is None:
            return np.zeros(np.shape(paths))
        return proc.values[paths, tidx]

    def coefficients(self, paths, tidx):
        """``(u, v, f)`` values at the given points (zeros where absent)."""
        return tuple(self._coef(k, paths, tidx) for k in ("u", "v", "f"))

    def u_or_zero(self) -> AdaptedProcess:
        return self.u if self.u is not None else AdaptedProcess(self.grid, np.zeros((self.n_paths, self.grid.steps + 1)))

    def v_or_zero(self) -> AdaptedProcess:
        return self.v if self.v is not None else AdaptedProcess(self.grid, np.zeros((self.n_paths, self.grid.steps + 1)))

    def claims(self, *assumptions) -> bool:
        return all(Assumption.parse(a) in self.profile for a in assumptions)


def from_formula(
    name: str,
    formula: Callable,
    lattice: BrownianLattice,
    *,
    u=None,
    v=None,
    f=None,
    M: float,
    profile,
    modulus: Optional[ContinuityModulus] = None,
    depends_on_y: bool = True,
    depends_on_z: bool = True,
) -> GeneratorSpec:
    """Build a spec from ``formula(t, y, z, u, v, f)`` acting on flat arrays.

    Coefficients may be given as :class:`AdaptedProcess`, raw arrays of shape
    ``(paths, steps + 1)``, scalars, or ``None``.
    """
    grid = lattice.grid

    def as_proc(c):
        if c is None:
            return None
        if isinstance(c, AdaptedProcess):
            return c
        arr = np.asarray(c, dtype=float)
        if arr.ndim == 0:
            return AdaptedProcess.constant(lattice, float(arr))
        return AdaptedProcess(grid, arr)

    u, v, f = as_proc(u), as_proc(v), as_proc(f)
    times = grid.times

    def lookup(proc):
        # constant coefficients skip the per-point gather
        if proc is None:
            return lambda paths, tidx: 0.0
        vals = proc.values
        if vals.size and np.all(vals == vals.flat[0]):
            c = float(vals.flat[0])
            return lambda paths, tidx: c
        return lambda paths, tidx: vals[paths, tidx]

    u_at, v_at, f_at = lookup(u), lookup(v), lookup(f)

    def evaluate(paths, tidx, y, z):
        return formula(times[tidx], y, z, u_at(paths, tidx), v_at(paths, tidx), f_at(paths, tidx))

    return GeneratorSpec(
        name=name,
        evaluate=evaluate,
        grid=grid,
        n_paths=lattice.n_paths,
        d=lattice.d,
        M=float(M),
        profile=frozenset(profile),
        u=u,
        v=v,
        f=f,
        modulus=modulus,
        depends_on_y=depends_on_y,
        depends_on_z=depends_on_z,
    )


def _znorm(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("nk,nk->n", z, z)) if z.ndim == 2 else np.abs(z)


@dataclass(eq=False)
class Problem:
    """A BSDE: generator, terminal value per path, horizon and integrability order.

    ``aux_state`` optionally adds adapted regressors ``(paths, steps + 1, k)``
    beyond the Brownian state; ``reference`` maps a lattice to a closed-form
    ``(Y, Z)`` when one is known.
    """

    name: str
    generator: GeneratorSpec
    xi: np.ndarray
    p: float = 2.0
    aux_state: Optional[np.ndarray] = None
    reference: Optional[Callable[[BrownianLattice], tuple]] = None
    notes: str = ""

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.shape != (self.generator.n_paths,):
            raise ValueError(f"terminal value needs one entry per path, got shape {self.xi.shape}")
        if not self.p > 1:
            raise ValueError(f"p must be > 1, got {self.p}")
        if self.aux_state is not None:
            aux = np.asarray(self.aux_state, dtype=float)
            if aux.ndim == 2:
                aux = aux[..., None]
            if aux.shape[:2] != (self.generator.n_paths, self.grid.steps + 1):
                raise ValueError("aux_state must have shape (paths, steps + 1[, k])")
            self.aux_state = aux

    @property
    def grid(self) -> TimeGrid:
        return self.generator.grid

    def xi_lp_norm(self) -> float:
        return float(np.mean(np.abs(self.xi) ** self.p) ** (1.0 / self.p))

    def with_generator(self, generator: GeneratorSpec, name: Optional[str] = None, xi=None) -> "Problem":
        return replace(
            self,
            generator=generator,
            name=name or self.name,
            xi=self.xi if xi is None else xi,
            reference=None,
        )

    def scaled(self, lam: float) -> "Problem":
        """Problem whose solution is ``lam`` times this one's: ``(lam xi, lam g(y/lam, z/lam))``."""
        if not lam > 0:
            raise ValueError("scale must be positive")
        base = self.generator

        def evaluate(paths, tidx, y, z):
            return lam * base.evaluate(paths, tidx, y / lam, z / lam)

        gen = replace(base, name=f"{base.name}*{lam:g}", evaluate=evaluate)
        return replace(self, generator=gen, xi=lam * self.xi, name=f"{self.name}*{lam:g}", reference=None)


# ---------------------------------------------------------------------------
# probing audits


@dataclass(frozen=True, eq=False)
class ProbeSet:
    paths: np.ndarray
    tidx: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    z1: np.ndarray
    z2: np.ndarray

    def __len__(self):
        return self.paths.size


def draw_probes(lattice_or_spec, count: int, scale: float = 3.0, seed: int = 0) -> ProbeSet:
    """Random probe tuples: paths and left-endpoint times uniform, ``y``/``z`` ~ N(0, scale^2)."""
    if count < 1:
        raise ValueError("probe count must be >= 1")
    n_paths = lattice_or_spec.n_paths
    steps = lattice_or_spec.grid.steps
    d = lattice_or_spec.d
    rng = np.random.Generator(np.random.PCG64(seed))
    return ProbeSet(
        paths=rng.integers(0, n_paths, count),
        tidx=rng.integers(0, steps, count),
        y1=scale * rng.standard_normal(count),
        y2=scale * rng.standard_normal(count),
        z1=scale * rng.standard_normal((count, d)),
        z2=scale * rng.standard_normal((count, d)),
    )


@dataclass
class AuditReport:
    name: str
    passed: bool
    worst_ratio: float
    probes: int = 0
    skipped: int = 0
    tol: float = 0.0
    worst_probe: Optional[dict] = None
    detail: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "assumption": self.detail.get("assumption", ""),
            "audit": self.name,
            "passed": self.passed,
            "worst_ratio": self.worst_ratio,
            "probes": self.probes,
            "skipped": self.skipped,
            "tol": self.tol,
        }


def _ratio_report(name, num, den, probes: ProbeSet, tol, extra_probe=None) -> AuditReport:
    """Worst ``num/den``; ``0/0`` probes are skipped, ``x/0`` with ``x > 0`` is infinite."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    tiny = 1e-300
    zero_den = den <= tiny
    violating_zero = zero_den & (num > tol)
    skipped = int(np.sum(zero_den & ~violating_zero))
    ratio = np.full(num.shape, -np.inf)
    ok = ~zero_den
    ratio[ok] = num[ok] / den[ok]
    ratio[violating_zero] = np.inf
    if np.all(np.isneginf(ratio)):
        worst, idx = 0.0, None
    else:
        idx = int(np.argmax(ratio))
        worst = float(ratio[idx])
    probe = None
    if idx is not None:
        probe = {
            "path": int(probes.paths[idx]),
            "tidx": int(probes.tidx[idx]),
            "y1": float(probes.y1[idx]),
            "y2": float(probes.y2[idx]),
            "z1": probes.z1[idx].tolist(),
            "z2": probes.z2[idx].tolist(),
        }
        if extra_probe is not None:
            probe.update(extra_probe(idx))
    return AuditReport(
        name=name,
        passed=bool(worst <= 1.0 + tol),
        worst_ratio=worst,
        probes=len(probes),
        skipped=skipped,
        tol=tol,
        worst_probe=probe,
    )


def audit_budget(spec: GeneratorSpec, lattice: BrownianLattice, which: str = "u+v2") -> AuditReport:
    """Pathwise budget ``int (u + v^2) dt`` against ``M`` (left Riemann sums).

    ``which`` selects the integrand: ``"u+v2"``, ``"u"``, ``"v2"`` or ``"v"``.
    Passes iff the largest path value is at most ``M`` plus one grid step of
    the integrand.
    """
    if not spec.grid.same_as(lattice.grid) or spec.n_paths != lattice.n_paths:
        raise ValueError("generator and lattice grids differ")
    u = spec.u_or_zero().values
    v = spec.v_or_zero().values
    rate = {"u+v2": u + v ** 2, "u": u, "v2": v ** 2, "v": v}[which]
    proc = AdaptedProcess(spec.grid, rate)
    totals = pathwise_lebesgue_integral(proc)
    slack = float((rate[:, :-1] * spec.grid.dt[None, :]).max()) if rate.size else 0.0
    worst = float(totals.max())
    qs = np.quantile(totals, [0.5, 0.9, 0.99])
    passed = worst <= spec.M * (1 + _BUDGET_RTOL) + slack
    return AuditReport(
        name=f"budget[{which}]",
        passed=bool(passed),
        worst_ratio=worst / spec.M,
        probes=lattice.n_paths,
        tol=slack,
        worst_probe={"path": int(np.argmax(totals)), "budget": worst},
        detail={
            "max": worst,
            "mean": float(totals.mean()),
            "q50": float(qs[0]),
            "q90": float(qs[1]),
            "q99": float(qs[2]),
            "M": spec.M,
            "strict_pass": bool(worst <= spec.M * (1 + _BUDGET_RTOL)),
        },
    )


def audit_lipschitz(
    spec: GeneratorSpec,
    lattice: BrownianLattice,
    probes: int = 1000,
    *,
    mode: str = "yz",
    scale: float = 3.0,
    seed: int = 0,
    tol: Optional[float] = None,
) -> AuditReport:
    """Worst ``|dg| / (u|dy| + v|dz|)`` over random probe pairs.

    ``mode="y"`` holds ``z`` fixed and checks ``|dg| <= u|dy|`` only.
    """
    tol = spec.tol_audit if tol is None else tol
    pr = draw_probes(spec, probes, scale, seed)
    u, v, _ = spec.coefficients(pr.paths, pr.tidx)
    if mode == "yz":
        g1 = spec(pr.paths, pr.tidx, pr.y1, pr.z1)
        g2 = spec(pr.paths, pr.tidx, pr.y2, pr.z2)
        den = u * np.abs(pr.y1 - pr.y2) + v * _znorm(pr.z1 - pr.z2)
    elif mode == "y":
        g1 = spec(pr.paths, pr.tidx, pr.y1, pr.z1)
        g2 = spec(pr.paths, pr.tidx, pr.y2, pr.z1)
        den = u * np.abs(pr.y1 - pr.y2)
    else:
        raise ValueError(f"mode must be 'yz' or 'y', got {mode!r}")
    return _ratio_report(f"lipschitz[{mode}]", np.abs(g1 - g2), den, pr, tol)


def audit_monotonicity(
    spec: GeneratorSpec, lattice: BrownianLattice, probes: int = 1000, *, scale: float = 3.0, seed: int = 0, tol=None
) -> AuditReport:
    """Worst ``sgn(dy) dg / (u|dy|)`` with ``z`` held fixed; ``sgn(0) = 0``."""
    tol = spec.tol_audit if tol is None else tol
    pr = draw_probes(spec, probes, scale, seed)
    u, _, _ = spec.coefficients(pr.paths, pr.tidx)
    g1 = spec(pr.paths, pr.tidx, pr.y1, pr.z1)
    g2 = spec(pr.paths, pr.tidx, pr.y2, pr.z1)
    num = np.sign(pr.y1 - pr.y2) * (g1 - g2)
    rep = _ratio_report("monotone-y", num, u * np.abs(pr.y1 - pr.y2), pr, tol)
    # a nonpositive signed change is never a violation, even where u = 0
    if not np.isfinite(rep.worst_ratio) or rep.worst_ratio < 0:
        rep.worst_ratio = max(rep.worst_ratio, 0.0) if np.isfinite(rep.worst_ratio) else rep.worst_ratio
        rep.passed = bool(rep.worst_ratio <= 1 + tol)
    return rep


def audit_z_uniform_continuity(
    spec: GeneratorSpec, lattice: BrownianLattice, probes: int = 1000, *, scale: float = 3.0, seed: int = 0, tol=None
) -> AuditReport:
    """Worst ``|g(y,z1) - g(y,z2)| / (v phi(|z1 - z2|))`` plus checks on ``phi`` itself."""
    if spec.modulus is None:
        raise ValueError(f"generator {spec.name!r} declares no continuity modulus")
    tol = spec.tol_audit if tol is None else tol
    pr = draw_probes(spec, probes, scale, seed)
    _, v, _ = spec.coefficients(pr.paths, pr.tidx)
    g1 = spec(pr.paths, pr.tidx, pr.y1, pr.z1)
    g2 = spec(pr.paths, pr.tidx, pr.y1, pr.z2)
    rep = _ratio_report("uniform-continuity-z", np.abs(g1 - g2), v * spec.modulus(_znorm(pr.z1 - pr.z2)), pr, tol)
    xs = np.concatenate([np.zeros(1), np.abs(scale * np.random.Generator(np.random.PCG64(seed + 1)).standard_normal(probes))])
    mod = spec.modulus.check(xs)
    rep.detail.update(mod)
    if abs(mod["phi0"]) > tol or not (mod["nondecreasing"] and mod["within_envelope"] and mod["nonnegative"]):
        rep.passed = False
    return rep


def audit_linear_growth(
    spec: GeneratorSpec, lattice: BrownianLattice, probes: int = 1000, *, scale: float = 3.0, seed: int = 0, tol=None
) -> AuditReport:
    """Worst ``|g(y,z)| / (f + u|y| + v|z|)``."""
    tol = spec.tol_audit if tol is None else tol
    pr = draw_probes(spec, probes, scale, seed)
    u, v, f = spec.coefficients(pr.paths, pr.tidx)
    g = spec(pr.paths, pr.tidx, pr.y1, pr.z1)
    return _ratio_report("linear-growth", np.abs(g), f + u * np.abs(pr.y1) + v * _znorm(pr.z1), pr, tol)


def audit_continuity(
    spec: GeneratorSpec,
    lattice: BrownianLattice,
    probes: int = 1000,
    *,
    scale: float = 3.0,
    seed: int = 0,
    delta: float = 1e-9,
    threshold: float = 1e-3,
) -> AuditReport:
    """Largest change of ``g`` under perturbations of size ``delta``; passes below ``threshold``.

    A sampled check can only catch gross discontinuities.
    """
    pr = draw_probes(spec, probes, scale, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 7))
    dy = delta * rng.standard_normal(len(pr))
    dz = delta * rng.standard_normal(pr.z1.shape)
    g1 = spec(pr.paths, pr.tidx, pr.y1, pr.z1)
    g2 = spec(pr.paths, pr.tidx, pr.y1 + dy, pr.z1 + dz)
    jump = np.abs(g1 - g2)
    worst = float(jump.max())
    return AuditReport(
        name="continuous",
        passed=bool(worst <= threshold),
        worst_ratio=worst / threshold,
        probes=len(pr),
        tol=threshold,
        detail={"delta": delta, "max_jump": worst},
    )


def audit_integrability(spec: GeneratorSpec, lattice: BrownianLattice, p: float = 2.0) -> AuditReport:
    """Empirical ``E[(int |g(t,0,0)| dt)^p]`` over all paths.

    At finite sample size this is always finite, so the audit only reports.
    """
    P, steps = lattice.n_paths, lattice.grid.steps
    paths = np.repeat(np.arange(P), steps)
    tidx = np.tile(np.arange(steps), P)
    g0 = np.abs(spec(paths, tidx, np.zeros(P * steps), np.zeros((P * steps, spec.d)))).reshape(P, steps)
    integral = g0 @ lattice.grid.dt
    moment = float(np.mean(integral ** p))
    return AuditReport(
        name="integrable-driver",
        passed=bool(math.isfinite(moment)),
        worst_ratio=0.0,
        probes=P,
        detail={"moment": moment, "p": p},
    )


def audit_profile(
    spec: GeneratorSpec,
    lattice: BrownianLattice,
    probes: int = 1000,
    *,
    p: float = 2.0,
    scale: float = 3.0,
    seed: int = 0,
    assumptions=None,
) -> list:
    """Run every audit implied by the declared (or given) assumptions."""
    claimed = spec.profile if assumptions is None else frozenset(Assumption.parse(a) for a in assumptions)
    kw = dict(scale=scale, seed=seed)
    out = []
    for a in sorted(claimed, key=lambda x: list(Assumption).index(x)):
        if a is A.STOCHASTIC_LIPSCHITZ:
            parts = [audit_budget(spec, lattice), audit_lipschitz(spec, lattice, probes, **kw)]
        elif a is A.INTEGRABLE_DRIVER:
            parts = [audit_integrability(spec, lattice, p)]
        elif a is A.MONOTONE_Y:
            parts = [audit_budget(spec, lattice, "u"), audit_monotonicity(spec, lattice, probes, **kw)]
        elif a is A.UNIFORM_CONTINUITY_Z:
            parts = [audit_budget(spec, lattice, "v2")]
            parts.append(
                audit_z_uniform_continuity(spec, lattice, probes, **kw)
                if spec.modulus is not None
                else AuditReport("uniform-continuity-z", False, math.inf, detail={"error": "no modulus declared"})
            )
            if spec.modulus is not None and spec.modulus.b != 0:
                parts.append(audit_budget(spec, lattice, "v"))
        elif a is A.LINEAR_GROWTH:
            parts = [audit_budget(spec, lattice), audit_linear_growth(spec, lattice, probes, **kw)]
        elif a is A.CONTINUOUS:
            parts = [audit_continuity(spec, lattice, probes, **kw)]
        elif a is A.LIPSCHITZ_Y_CONTINUOUS_Z:
            parts = [audit_budget(spec, lattice), audit_lipschitz(spec, lattice, probes, mode="y", **kw)]
            parts.append(
                audit_z_uniform_continuity(spec, lattice, probes, **kw)
                if spec.modulus is not None
                else AuditReport("uniform-continuity-z", False, math.inf, detail={"error": "no modulus declared"})
            )
        else:  # pragma: no cover
            raise AssertionError(a)
        for rep in parts:
            rep.detail.setdefault("assumption", a.value)
            out.append(rep)
    return out


# ---------------------------------------------------------------------------
# derived generators


def envelope_generator(spec: GeneratorSpec) -> GeneratorSpec:
    """The dominating generator ``h = f + u|y| + v|z|`` built from ``spec``'s coefficients."""
    missing = [k for k in ("f", "u", "v") if getattr(spec, k) is None]
    if missing:
        raise ValueError(f"generator {spec.name!r} lacks coefficient processes {missing}")
    uv, vv, fv = spec.u.values, spec.v.values, spec.f.values

    def evaluate(paths, tidx, y, z):
        return fv[paths, tidx] + uv[paths, tidx] * np.abs(y) + vv[paths, tidx] * _znorm(z)

    return GeneratorSpec(
        name=f"envelope({spec.name})",
        evaluate=evaluate,
        grid=spec.grid,
        n_paths=spec.n_paths,
        d=spec.d,
        M=spec.M,
        profile=frozenset({A.STOCHASTIC_LIPSCHITZ, A.INTEGRABLE_DRIVER}),
        u=spec.u,
        v=spec.v,
        f=spec.f,
        modulus=MODULI["identity"],
    )


def mirrored(spec: GeneratorSpec) -> GeneratorSpec:
    """``(t, y, z) -> -g(t, -y, -z)``; the assumption profile is unchanged."""
    base = spec.evaluate

    def evaluate(paths, tidx, y, z):
        return -base(paths, tidx, -y, -z)

    return replace(spec, name=f"mirror({spec.name})", evaluate=evaluate)


# ---------------------------------------------------------------------------
# catalog


def terminal_from_expression(expr: str, lattice: BrownianLattice) -> np.ndarray:
    """Terminal value from an expression in the terminal Brownian value.

    Names: ``B`` (first component), ``B1..Bd``, ``Bnorm``, ``T``.
    """
    BT = lattice.terminal
    env = {"B": BT[:, 0], "Bnorm": _znorm(BT), "T": lattice.grid.horizon}
    env.update({f"B{k + 1}": BT[:, k] for k in range(lattice.d)})
    fn = compile_expression(expr, env.keys())
    return np.broadcast_to(np.asarray(fn(env), dtype=float), (lattice.n_paths,)).copy()


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    build: Callable
    description: str
    defaults: dict
    xi_choices: tuple
    solve_with: Optional[str]  # "picard", "minimal" or None (audit-only)


class UnknownCatalogEntry(KeyError):
    pass


_CATALOG: Dict[str, CatalogEntry] = {}


def _register(name, description, defaults, xi_choices, solve_with="picard"):
    def deco(fn):
        _CATALOG[name] = CatalogEntry(name, fn, description, dict(defaults), tuple(xi_choices), solve_with)
        return fn

    return deco


def catalog() -> Dict[str, CatalogEntry]:
    """Named reference problems.  Build one with :func:`build_problem`."""
    return dict(_CATALOG)


def build_problem(name: str, lattice: BrownianLattice, *, xi: Optional[str] = None, p: float = 2.0, **params) -> Problem:
    """Instantiate catalog entry ``name`` on ``lattice``."""
    try:
        entry = _CATALOG[name]
    except KeyError:
        raise UnknownCatalogEntry(f"unknown catalog entry {name!r}; known: {sorted(_CATALOG)}") from None
    unknown = set(params) - set(entry.defaults)
    if unknown:
        raise ValueError(f"catalog entry {name!r} has no parameters {sorted(unknown)}")
    kw = {**entry.defaults, **params}
    xi_expr = entry.xi_choices[0] if xi is None else xi
    return entry.build(lattice, xi_expr=xi_expr, p=p, **kw)


def _flat_reference(lattice, y_fn, z_fn):
    def ref(lat: BrownianLattice):
        t = lat.grid.times[None, :]
        W = lat.W
        return y_fn(t, W), z_fn(t, W)

    return ref


@_register(
    "zero",
    "g = 0; the solution is the martingale Y_t = E[xi | F_t].",
    {},
    ("B", "0", "abs(B)"),
)
def _zero(lattice, xi_expr, p):
    gen = from_formula(
        "zero",
        lambda t, y, z, u, v, f: np.zeros_like(y),
        lattice,
        u=0.0,
        v=0.0,
        f=0.0,
        M=1.0,
        profile=ALL_ASSUMPTIONS,
        modulus=MODULI["identity"],
        depends_on_y=False,
        depends_on_z=False,
    )
    ref = None
    if xi_expr.replace(" ", "") == "B":
        ref = _flat_reference(lattice, lambda t, W: W[..., 0] + 0 * t, lambda t, W: np.ones_like(W))
    return Problem("zero", gen, terminal_from_expression(xi_expr, lattice), p, reference=ref)


@_register(
    "linear",
    "g = a*y with constant a; for xi = B_T the solution is Y_t = exp(a(T-t)) B_t, Z_t = exp(a(T-t)).",
    {"a": 0.5},
    ("B", "abs(B)"),
)
def _linear(lattice, xi_expr, p, a):
    T = lattice.grid.horizon
    gen = from_formula(
        "linear",
        lambda t, y, z, u, v, f: a * y,
        lattice,
        u=abs(a),
        v=0.0,
        f=0.0,
        M=max(abs(a) * T, 1e-12),
        profile=ALL_ASSUMPTIONS,
        modulus=MODULI["identity"],
        depends_on_z=False,
    )
    ref = None
    if xi_expr.replace(" ", "") == "B" and lattice.d == 1:
        ref = _flat_reference(
            lattice,
            lambda t, W: np.exp(a * (T - t)) * W[..., 0],
            lambda t, W: np.broadcast_to(np.exp(a * (T - t))[..., None], W.shape).copy(),
        )
    return Problem("linear", gen, terminal_from_expression(xi_expr, lattice), p, reference=ref)


@_register(
    "abs_z",
    "g = |z|; for xi = B_T (d = 1) the solution is Y_t = B_t + (T - t), Z = 1.",
    {},
    ("B", "abs(B)"),
)
def _abs_z(lattice, xi_expr, p):
    T = lattice.grid.horizon
    gen = from_formula(
        "abs_z",
        lambda t, y, z, u, v, f: _znorm(z),
        lattice,
        u=0.0,
        v=1.0,
        f=0.0,
        M=T,
        profile=ALL_ASSUMPTIONS,
        modulus=MODULI["identity"],
        depends_on_y=False,
    )
    ref = None
    if xi_expr.replace(" ", "") == "B" and lattice.d == 1:
        ref = _flat_reference(lattice, lambda t, W: W[..., 0] + (T - t), lambda t, W: np.ones_like(W))
    return Problem("abs_z", gen, terminal_from_expression(xi_expr, lattice), p, reference=ref)


@_register(
    "constant",
    "g = c; for xi = B_T the solution is Y_t = B_t + c (T - t), Z = 1.",
    {"c": 1.0},
    ("B", "0", "1"),
)
def _constant(lattice, xi_expr, p, c):
    T = lattice.grid.horizon
    gen = from_formula(
        "constant",
        lambda t, y, z, u, v, f: np.full_like(y, c),
        lattice,
        u=0.0,
        v=0.0,
        f=abs(c),
        M=1.0,
        profile=ALL_ASSUMPTIONS,
        modulus=MODULI["identity"],
        depends_on_y=False,
        depends_on_z=False,
    )
    ref = None
    if xi_expr.replace(" ", "") == "B" and lattice.d == 1:
        ref = _flat_reference(lattice, lambda t, W: W[..., 0] + c * (T - t), lambda t, W: np.ones_like(W))
    return Problem("constant", gen, terminal_from_expression(xi_expr, lattice), p, reference=ref)


def budget_window_coefficients(lattice: BrownianLattice, t0: float, M: float):
    """Coefficients that switch on at ``t0`` with height ``|B_t0|`` until half the budget is spent.

    ``u_t = |B_t0|`` while ``|B_t0| (t - t0) <= M/2`` and ``v_t = |B_t0|``
    while ``|B_t0|^2 (t - t0) <= M/2``, both zero before ``t0``.  On the grid a
    step starting at ``t_j >= t0`` is switched on iff the budget spent by its
    end stays within ``M/2``, so the left Riemann sums of ``u`` and ``v^2``
    never exceed ``M/2`` on any path.  Returns ``(u, v, aux, i0)``.
    """
    grid = lattice.grid
    i0 = int(np.argmin(np.abs(grid.times - t0)))
    i0 = min(max(i0, 1), grid.steps - 1) if grid.steps > 1 else 0
    t0g = grid.times[i0]
    height = np.abs(lattice.W[:, i0, 0])
    P, n1 = lattice.n_paths, grid.steps + 1
    end = np.empty(n1)
    end[:-1] = grid.times[1:]
    end[-1] = np.inf  # the final point opens no step
    after = np.arange(n1) >= i0
    elapsed = (end - t0g)[None, :]
    u_on = after[None, :] & (height[:, None] * elapsed <= M / 2)
    v_on = after[None, :] & (height[:, None] ** 2 * elapsed <= M / 2)
    u = np.where(u_on, height[:, None], 0.0)
    v = np.where(v_on, height[:, None], 0.0)
    aux = np.where(after[None, :], height[:, None], 0.0)
    return AdaptedProcess(grid, u), AdaptedProcess(grid, v), aux, i0


@_register(
    "budget_window",
    "g = u|y| + v|z| with u, v equal to |B_t0| on random windows after t0 sized so that "
    "int u dt <= M/2 and int v^2 dt <= M/2 on every path; the coefficients admit no "
    "deterministic integrable bound.",
    {"t0_frac": 0.25, "M": 1.0},
    ("B", "abs(B)"),
)
def _budget_window(lattice, xi_expr, p, t0_frac, M):
    u, v, aux, _ = budget_window_coefficients(lattice, t0_frac * lattice.grid.horizon, M)
    gen = from_formula(
        "budget_window",
        lambda t, y, z, u, v, f: u * np.abs(y) + v * _znorm(z),
        lattice,
        u=u,
        v=v,
        f=0.0,
        M=M,
        profile=ALL_ASSUMPTIONS,
        modulus=MODULI["identity"],
    )
    return Problem("budget_window", gen, terminal_from_expression(xi_expr, lattice), p, aux_state=aux)


@_register(
    "sqrt_y",
    "g = sqrt(min(|y|, 1)): continuous with linear growth (f = 1, u = 1, v = 0) but not Lipschitz "
    "at y = 0; with xi = 0 both 0 and (T-t)^2/4 (while <= 1) solve the equation.",
    {},
    ("B", "0", "abs(B)"),
    solve_with="minimal",
)
def _sqrt_y(lattice, xi_expr, p):
    T = lattice.grid.horizon
    gen = from_formula(
        "sqrt_y",
        lambda t, y, z, u, v, f: np.sqrt(np.minimum(np.abs(y), 1.0)),
        lattice,
        u=1.0,
        v=0.0,
        f=1.0,
        M=T,
        profile={A.LINEAR_GROWTH, A.CONTINUOUS, A.INTEGRABLE_DRIVER},
        depends_on_z=False,
    )
    return Problem("sqrt_y", gen, terminal_from_expression(xi_expr, lattice), p)


@_register(
    "sqrt_z",
    "g = u*y + v*sqrt(min(|z|, 1)) with u = 1/2, v = 1: Lipschitz in y, only uniformly "
    "continuous in z (modulus sqrt(min(x, 1)) <= x + 1).",
    {"a": 0.5},
    ("B", "abs(B)"),
)
def _sqrt_z(lattice, xi_expr, p, a):
    T = lattice.grid.horizon
    gen = from_formula(
        "sqrt_z",
        lambda t, y, z, u, v, f: u * y + v * np.sqrt(np.minimum(_znorm(z), 1.0)),
        lattice,
        u=abs(a),
        v=1.0,
        f=1.0,
        M=(abs(a) + 1.0) * T,
        profile={A.LIPSCHITZ_Y_CONTINUOUS_Z, A.INTEGRABLE_DRIVER, A.MONOTONE_Y, A.UNIFORM_CONTINUITY_Z,
                 A.LINEAR_GROWTH, A.CONTINUOUS},
        modulus=MODULI["sqrt_clamped"],
    )
    return Problem("sqrt_z", gen, terminal_from_expression(xi_expr, lattice), p)


@_register(
    "quadratic_z",
    "g = |z|^2 deliberately declared stochastic-Lipschitz with v = 1; the audits must reject it.",
    {},
    ("B",),
    solve_with=None,
)
def _quadratic_z(lattice, xi_expr, p):
    gen = from_formula(
        "quadratic_z",
        lambda t, y, z, u, v, f: v * _znorm(z) ** 2,
        lattice,
        u=0.0,
        v=1.0,
        f=0.0,
        M=lattice.grid.horizon,
        profile={A.STOCHASTIC_LIPSCHITZ, A.LIPSCHITZ_Y_CONTINUOUS_Z, A.UNIFORM_CONTINUITY_Z},
        modulus=MODULI["identity"],
        depends_on_y=False,
    )
    return Problem("quadratic_z", gen, terminal_from_expression(xi_expr, lattice), p)


def generator_from_expressions(
    lattice: BrownianLattice,
    expr: str,
    *,
    u="0",
    v="0",
    f="0",
    M: float,
    profile=(),
    modulus: Optional[str] = None,
    name: str = "custom",
) -> GeneratorSpec:
    """A generator from grammar expressions.

    ``expr`` may use ``y``, ``z`` (first component), ``z1..zd``, ``znorm``,
    ``u``, ``v``, ``f``, ``t``.  The coefficients ``u``, ``v``, ``f`` are
    expressions in ``t``, ``B`` (first component of ``B_t``), ``B1..Bd`` and
    ``Bnorm``; they must only look at the current time to stay adapted.
    """
    d = lattice.d
    g_names = ["y", "z", "znorm", "u", "v", "f", "t"] + [f"z{k + 1}" for k in range(d)]
    g_fn = compile_expression(expr, g_names)
    c_names = ["t", "B", "Bnorm"] + [f"B{k + 1}" for k in range(d)]
    W = lattice.W
    c_env = {"t": lattice.grid.times[None, :], "B": W[..., 0], "Bnorm": np.sqrt((W ** 2).sum(-1))}
    c_env.update({f"B{k + 1}": W[..., k] for k in range(d)})
    shape = (lattice.n_paths, lattice.grid.steps + 1)

    def coef(src, label):
        vals = np.broadcast_to(np.asarray(compile_expression(str(src), c_names)(c_env), dtype=float), shape).copy()
        if np.any(vals < 0):
            raise ValueError(f"coefficient {label} = {src!r} takes negative values")
        return AdaptedProcess(lattice.grid, vals)

    U, V, F = coef(u, "u"), coef(v, "v"), coef(f, "f")
    mentions_z = any(tok in expr for tok in ("z",))
    mentions_y = "y" in expr

    def formula(t, y, z, uu, vv, ff):
        env = {"y": y, "z": z[:, 0], "znorm": _znorm(z), "u": uu, "v": vv, "f": ff, "t": t}
        env.update({f"z{k + 1}": z[:, k] for k in range(d)})
        return np.broadcast_to(np.asarray(g_fn(env), dtype=float), y.shape).copy()

    mod = None
    if modulus is not None:
        if modulus not in MODULI:
            raise ValueError(f"unknown modulus {modulus!r}; known: {sorted(MODULI)}")
        mod = MODULI[modulus]
    return from_formula(
        name,
        formula,
        lattice,
        u=U,
        v=V,
        f=F,
        M=M,
        profile=frozenset(Assumption.parse(a) for a in profile),
        modulus=mod,
        depends_on_y=mentions_y,
        depends_on_z=mentions_z,
    )
