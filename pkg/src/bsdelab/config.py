"""Experiment configuration: a TOML file with one table per concern.

Schema (all tables optional except ``[lattice]`` and ``[problem]``)::

    [lattice]       horizon, steps, d, paths, seed
    [problem]       catalog = "<name>" | [problem.generator] table
                    xi = "<expression in B, B1.., Bnorm, T>", p, [problem.params]
    [problem.generator]
                    expr, u, v, f (expressions), M, profile = [...], modulus
    [solver]        degree, cross_terms, tol, atol, max_iter, partitions, c_p,
                    initial_guess, ratio_limit
    [audit]         probes, scale, probe_seed, stability
    [compare]       mode, regular_side, [compare.lower], [compare.upper]
                    (each a problem table like [problem])
    [minimal]       ns = [...] or n_max, maximal
    [search]        half_width, resolution, rounds
    [gn]            ns, y_min, y_max, points, path, time_index, z
    [unique]        guesses, partitions

Validation errors name the offending field as a dotted path.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .expressions import ExpressionError
from .generators import (
    Assumption,
    MODULI,
    Problem,
    build_problem,
    catalog,
    generator_from_expressions,
    terminal_from_expression,
)
from .paths import BrownianLattice, TimeGrid, generate_lattice
from .solver import RegressionBasis, SolverConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "config_hash"]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


def _get(table: dict, key: str, path: str, kind, default=None, check: Optional[Callable] = None, msg: str = ""):
    value = table.get(key, default)
    where = f"{path}.{key}" if path else key
    if value is None:
        if default is None and check is not None:
            raise ConfigError(where, "is required")
        return value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind in (int, float):
        raise ConfigError(where, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    if check is not None and not check(value):
        raise ConfigError(where, msg or f"invalid value {value!r}")
    return value


@dataclass(frozen=True)
class LatticeConfig:
    horizon: float = 1.0
    steps: int = 64
    d: int = 1
    paths: int = 10_000
    seed: int = 0

    def build(self, paths: Optional[int] = None, seed: Optional[int] = None) -> BrownianLattice:
        grid = TimeGrid.uniform(self.horizon, self.steps)
        return generate_lattice(grid, self.d, self.paths if paths is None else paths, self.seed if seed is None else seed)


@dataclass(frozen=True)
class ProblemConfig:
    """Either a catalog entry or an expression-defined generator."""

    path: str
    catalog: Optional[str] = None
    params: dict = field(default_factory=dict)
    generator: Optional[dict] = None
    xi: Optional[str] = None
    p: float = 2.0
    name: Optional[str] = None

    def factory(self) -> Callable[[BrownianLattice], Problem]:
        def build(lattice: BrownianLattice) -> Problem:
            try:
                if self.catalog is not None:
                    return build_problem(self.catalog, lattice, xi=self.xi, p=self.p, **self.params)
                gen = self.generator
                spec = generator_from_expressions(
                    lattice,
                    gen["expr"],
                    u=gen.get("u", "0"),
                    v=gen.get("v", "0"),
                    f=gen.get("f", "0"),
                    M=float(gen["M"]),
                    profile=gen.get("profile", ()),
                    modulus=gen.get("modulus"),
                    name=self.name or "custom",
                )
                xi = terminal_from_expression(self.xi or "0", lattice)
                return Problem(self.name or "custom", spec, xi, self.p)
            except ExpressionError as exc:
                raise ConfigError(self.path, str(exc)) from None
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(self.path, str(exc)) from None

        return build


def _problem(table: Any, path: str) -> ProblemConfig:
    if not isinstance(table, dict):
        raise ConfigError(path, "expected a table")
    p = _get(table, "p", path, float, 2.0, lambda x: x > 1 and math.isfinite(x), "must be > 1")
    xi = _get(table, "xi", path, str)
    name = _get(table, "name", path, str)
    cat = _get(table, "catalog", path, str)
    gen = table.get("generator")
    if (cat is None) == (gen is None):
        raise ConfigError(path, "give exactly one of 'catalog' or a 'generator' table")
    params = table.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"{path}.params", "expected a table")
    if cat is not None:
        entries = catalog()
        if cat not in entries:
            raise ConfigError(f"{path}.catalog", f"unknown catalog entry {cat!r}; known: {sorted(entries)}")
        unknown = set(params) - set(entries[cat].defaults)
        if unknown:
            raise ConfigError(f"{path}.params", f"unknown parameters {sorted(unknown)} for {cat!r}")
        return ProblemConfig(path, catalog=cat, params=dict(params), xi=xi, p=p, name=name)
    gpath = f"{path}.generator"
    if not isinstance(gen, dict):
        raise ConfigError(gpath, "expected a table")
    _get(gen, "expr", gpath, str, check=lambda s: bool(s.strip()), msg="must be a nonempty expression")
    _get(gen, "M", gpath, float, check=lambda x: x > 0 and math.isfinite(x), msg="must be positive")
    for key in ("u", "v", "f"):
        val = gen.get(key, "0")
        if not isinstance(val, (str, int, float)) or isinstance(val, bool):
            raise ConfigError(f"{gpath}.{key}", "expected an expression")
    profile = gen.get("profile", [])
    if not isinstance(profile, list):
        raise ConfigError(f"{gpath}.profile", "expected a list")
    for k, a in enumerate(profile):
        try:
            Assumption.parse(a)
        except ValueError as exc:
            raise ConfigError(f"{gpath}.profile[{k}]", str(exc)) from None
    mod = gen.get("modulus")
    if mod is not None and mod not in MODULI:
        raise ConfigError(f"{gpath}.modulus", f"unknown modulus {mod!r}; known: {sorted(MODULI)}")
    return ProblemConfig(path, generator=dict(gen), xi=xi, p=p, name=name)


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    lattice: LatticeConfig
    problem: ProblemConfig
    solver: SolverConfig
    audit: dict
    compare: dict
    minimal: dict
    search: dict
    gn: dict
    unique: dict
    lower: Optional[ProblemConfig] = None
    upper: Optional[ProblemConfig] = None

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _table(raw: dict, key: str) -> dict:
    t = raw.get(key, {})
    if not isinstance(t, dict):
        raise ConfigError(key, "expected a table")
    return t


def parse_config(raw: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate a parsed TOML document.  ``overrides`` patches lattice fields."""
    raw = json.loads(json.dumps(raw, default=str))
    if overrides:
        lat = raw.setdefault("lattice", {})
        for k, v in overrides.items():
            if v is not None:
                lat[k] = v
    lt = _table(raw, "lattice")
    if "lattice" not in raw:
        raise ConfigError("lattice", "section is required")
    lattice = LatticeConfig(
        horizon=_get(lt, "horizon", "lattice", float, 1.0, lambda x: 0 < x < math.inf, "must be positive and finite"),
        steps=_get(lt, "steps", "lattice", int, 64, lambda x: x >= 1, "must be >= 1"),
        d=_get(lt, "d", "lattice", int, 1, lambda x: x >= 1, "must be >= 1"),
        paths=_get(lt, "paths", "lattice", int, 10_000, lambda x: x >= 1, "must be >= 1"),
        seed=_get(lt, "seed", "lattice", int, 0, lambda x: 0 <= x < 2 ** 64, "must be a 64-bit unsigned integer"),
    )
    if "problem" not in raw:
        raise ConfigError("problem", "section is required")
    problem = _problem(raw["problem"], "problem")

    st = _table(raw, "solver")
    parts = st.get("partitions", "auto")
    if not (parts == "auto" or (isinstance(parts, int) and not isinstance(parts, bool) and parts >= 1)):
        raise ConfigError("solver.partitions", "must be 'auto' or a positive integer")
    c_p = st.get("c_p")
    if c_p is not None:
        c_p = _get(st, "c_p", "solver", float, None, lambda x: x > 0, "must be positive")
    solver = SolverConfig(
        basis=RegressionBasis(
            degree=_get(st, "degree", "solver", int, 3, lambda x: 0 <= x <= 12, "must be in 0..12"),
            cross_terms=_get(st, "cross_terms", "solver", bool, True),
        ),
        tol=_get(st, "tol", "solver", float, 1e-10, lambda x: x > 0, "must be positive"),
        atol=_get(st, "atol", "solver", float, 1e-13, lambda x: x >= 0, "must be >= 0"),
        max_iter=_get(st, "max_iter", "solver", int, 60, lambda x: x >= 1, "must be >= 1"),
        partitions=parts,
        c_p=c_p,
        initial_guess=_get(st, "initial_guess", "solver", str, "terminal", lambda x: x in ("terminal", "zero"),
                           "must be 'terminal' or 'zero'"),
        ratio_limit=_get(st, "ratio_limit", "solver", float, 0.9, lambda x: x > 0, "must be positive"),
    )

    at = _table(raw, "audit")
    audit = {
        "probes": _get(at, "probes", "audit", int, 1000, lambda x: x >= 1, "must be >= 1"),
        "scale": _get(at, "scale", "audit", float, 3.0, lambda x: x > 0, "must be positive"),
        "probe_seed": _get(at, "probe_seed", "audit", int, 0),
        "stability": _get(at, "stability", "audit", bool, True),
    }

    ct = _table(raw, "compare")
    compare = {
        "mode": _get(ct, "mode", "compare", str, "pointwise", lambda x: x in ("pointwise", "along_solution"),
                     "must be 'pointwise' or 'along_solution'"),
        "regular_side": _get(ct, "regular_side", "compare", str, "lower", lambda x: x in ("lower", "upper"),
                             "must be 'lower' or 'upper'"),
        "name": _get(ct, "name", "compare", str, "comparison"),
    }
    lower = _problem(ct["lower"], "compare.lower") if "lower" in ct else None
    upper = _problem(ct["upper"], "compare.upper") if "upper" in ct else None

    mt = _table(raw, "minimal")
    if "ns" in mt:
        ns = mt["ns"]
        if not isinstance(ns, list) or not ns or not all(isinstance(n, int) and n >= 1 for n in ns):
            raise ConfigError("minimal.ns", "must be a nonempty list of positive integers")
    else:
        n_max = _get(mt, "n_max", "minimal", int, 8, lambda x: x >= 1, "must be >= 1")
        ns = list(range(1, n_max + 1))
    minimal = {"ns": sorted(set(ns)), "maximal": _get(mt, "maximal", "minimal", bool, False)}

    sr = _table(raw, "search")
    search = {
        "half_width": _get(sr, "half_width", "search", float, 8.0, lambda x: x > 0, "must be positive"),
        "resolution": _get(sr, "resolution", "search", int, 33, lambda x: x >= 3, "must be >= 3"),
        "rounds": _get(sr, "rounds", "search", int, 2, lambda x: x >= 0, "must be >= 0"),
    }

    gt = _table(raw, "gn")
    gns = gt.get("ns", [1, 2, 4, 8])
    if not isinstance(gns, list) or not gns or not all(isinstance(n, int) and n >= 1 for n in gns):
        raise ConfigError("gn.ns", "must be a nonempty list of positive integers")
    gn = {
        "ns": gns,
        "y_min": _get(gt, "y_min", "gn", float, -2.0),
        "y_max": _get(gt, "y_max", "gn", float, 2.0),
        "points": _get(gt, "points", "gn", int, 81, lambda x: x >= 2, "must be >= 2"),
        "path": _get(gt, "path", "gn", int, 0, lambda x: x >= 0, "must be >= 0"),
        "time_index": _get(gt, "time_index", "gn", int, 0, lambda x: 0 <= x < lattice.steps, "must index a step"),
        "z": _get(gt, "z", "gn", float, 0.0),
    }
    if gn["y_max"] <= gn["y_min"]:
        raise ConfigError("gn.y_max", "must exceed gn.y_min")
    if gn["path"] >= lattice.paths:
        raise ConfigError("gn.path", "must be below lattice.paths")

    ut = _table(raw, "unique")
    guesses = ut.get("guesses", ["terminal", "zero"])
    if not isinstance(guesses, list) or not all(g in ("terminal", "zero") for g in guesses):
        raise ConfigError("unique.guesses", "must list 'terminal' and/or 'zero'")
    uparts = ut.get("partitions")
    if uparts is not None and (not isinstance(uparts, list) or not all(isinstance(n, int) and n >= 1 for n in uparts)):
        raise ConfigError("unique.partitions", "must be a list of positive integers")
    unique = {"guesses": guesses, "partitions": uparts}

    return ExperimentConfig(
        raw=raw,
        lattice=lattice,
        problem=problem,
        solver=solver,
        audit=audit,
        compare=compare,
        minimal=minimal,
        search=search,
        gn=gn,
        unique=unique,
        lower=lower,
        upper=upper,
    )


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("--config", f"invalid TOML: {exc}") from None
    return parse_config(raw, overrides)
