"""Command-line front end.

Every command reads a TOML configuration (see :mod:`bsdelab.config`), writes
CSV tables into ``--out`` and prints a verdict block.  CSV bodies depend only
on the configuration and seed; wall-clock data goes to ``metadata.json``.

Exit codes: 0 pass, 1 verdict fail, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, ProblemConfig, load_config
from .envelope import InfConvolutionSpec, eval_gn, gn_generator
from .generators import Problem, audit_profile, catalog
from .harness import (
    ComparisonScenario,
    PreconditionError,
    parallel_map,
    maximal_via_signflip,
    run_comparison,
    run_minimal_scheme,
    run_uniqueness_probe,
)
from .norms import audit_all_estimates
from .paths import BrownianLattice, build_partition, required_subintervals
from .solver import NonConvergenceError, SolutionPair, default_c_p, problem_budget, solve

__all__ = ["main", "RunReport", "COMMANDS"]

log = logging.getLogger("bsdelab")

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# output


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return str(x)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunReport:
    """Tables, verdicts and metadata of one command run."""

    command: str
    config_hash: str
    seed: int
    tables: dict = field(default_factory=dict)  # file stem -> list of row dicts
    verdicts: list = field(default_factory=list)  # (check, passed, detail)
    metadata: dict = field(default_factory=dict)

    def add(self, stem: str, rows: list) -> None:
        self.tables[stem] = rows

    def verdict(self, check: str, passed: bool, detail: str = "") -> None:
        self.verdicts.append((check, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.verdicts)

    def csv_text(self, rows: list) -> str:
        cols = ["schema_version", "config_hash", "seed"]
        for r in rows:
            cols += [k for k in r if k not in cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            full = {"schema_version": SCHEMA_VERSION, "config_hash": self.config_hash, "seed": self.seed, **r}
            w.writerow([_cell(full.get(c)) for c in cols])
        return buf.getvalue()

    def write(self, out: Path, raw_config: dict) -> None:
        out.mkdir(parents=True, exist_ok=True)
        self.tables["verdicts"] = [{"check": c, "passed": ok, "detail": d} for c, ok, d in self.verdicts]
        for stem, rows in self.tables.items():
            _atomic_write(out / f"{stem}.csv", self.csv_text(rows))
        _atomic_write(out / "config.json", json.dumps(raw_config, sort_keys=True, indent=2) + "\n")
        _atomic_write(out / "metadata.json", json.dumps(self.metadata, sort_keys=True, indent=2) + "\n")

    def verdict_block(self) -> str:
        lines = [f"== {self.command}: {'PASS' if self.passed else 'FAIL'} (seed {self.seed}, config {self.config_hash})"]
        for c, ok, d in self.verdicts:
            lines.append(f"  [{'pass' if ok else 'FAIL'}] {c}" + (f": {d}" if d else ""))
        return "\n".join(lines)


def _long(rows: list, x, series: str, values) -> None:
    for a, b in zip(x, values):
        rows.append({"x": float(a), "y": float(b), "series": series})


# ---------------------------------------------------------------------------
# helpers


def _solve_mode(pc: ProblemConfig) -> Optional[str]:
    if pc.catalog is not None:
        return catalog()[pc.catalog].solve_with
    return "picard"


def _require_picard(pc: ProblemConfig) -> None:
    mode = _solve_mode(pc)
    if mode == "minimal":
        raise ConfigError(f"{pc.path}.catalog", f"{pc.catalog!r} is not Lipschitz; use the 'minimal' command")
    if mode is None:
        raise ConfigError(f"{pc.path}.catalog", f"{pc.catalog!r} is audit-only and cannot be solved")


def _estimate_problem(cfg: ExperimentConfig, problem: Problem) -> Optional[Problem]:
    """Problem whose solution feeds the estimate audits (regularised if not Lipschitz)."""
    mode = _solve_mode(cfg.problem)
    if mode == "picard":
        return problem
    if mode == "minimal":
        spec = InfConvolutionSpec(problem.generator, max(cfg.minimal["ns"]), **cfg.search)
        return problem.with_generator(gn_generator(spec), name=f"{problem.name}_n{spec.n}")
    return None


def _summary_rows(sol: SolutionPair) -> list:
    Y, Z = sol.Y.values, sol.Z.values
    q = np.quantile(Y, [0.05, 0.5, 0.95], axis=0)
    rows = []
    for j, t in enumerate(sol.grid.times):
        r = {
            "index": j,
            "time": float(t),
            "y_mean": float(Y[:, j].mean()),
            "y_std": float(Y[:, j].std()),
            "y_q05": float(q[0, j]),
            "y_q50": float(q[1, j]),
            "y_q95": float(q[2, j]),
        }
        for k in range(Z.shape[2]):
            r[f"z{k + 1}_mean"] = float(Z[:, j, k].mean())
            r[f"z{k + 1}_std"] = float(Z[:, j, k].std())
        rows.append(r)
    return rows


def _diagnostic_rows(sol: SolutionPair) -> list:
    d = sol.diagnostics
    rows = [
        {"key": "N", "value": d.N},
        {"key": "N_required", "value": d.N_required},
        {"key": "c_p", "value": d.c_p},
        {"key": "max_tail_ratio", "value": d.max_tail_ratio},
        {"key": "residual_mean", "value": d.residual_mean},
        {"key": "residual_mean_abs", "value": d.residual_mean_abs},
        {"key": "ridged_fits", "value": d.ridged_fits},
        {"key": "max_condition", "value": d.max_condition},
        {"key": "flags", "value": ";".join(d.flags)},
    ]
    if d.suggestion:
        rows.append({"key": "suggestion", "value": d.suggestion})
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    _require_picard(cfg.problem)
    problem = cfg.problem.factory()(lattice)
    sol = solve(problem, lattice, cfg.solver)
    report.add("summary", _summary_rows(sol))
    report.add("iterations", sol.diagnostics.iteration_rows())
    report.add("diagnostics", _diagnostic_rows(sol))
    plot = []
    t = sol.grid.times
    _long(plot, t, "y_mean", sol.Y.values.mean(axis=0))
    _long(plot, t, "y_q05", np.quantile(sol.Y.values, 0.05, axis=0))
    _long(plot, t, "y_q95", np.quantile(sol.Y.values, 0.95, axis=0))
    _long(plot, t, "z1_mean", sol.Z.values[:, :, 0].mean(axis=0))
    if problem.reference is not None:
        Yr, Zr = problem.reference(lattice)
        _long(plot, t, "y_reference_mean", Yr.mean(axis=0))
        err = sol.Y.values - Yr
        rel = math.sqrt(np.mean(np.max(err ** 2, axis=1)) / np.mean(np.max(Yr ** 2, axis=1)))
        report.tables["diagnostics"].append({"key": "reference_rmse_y", "value": float(np.sqrt(np.mean(err ** 2)))})
        report.tables["diagnostics"].append({"key": "reference_relative_s2_error", "value": rel})
    report.add("plot_solution", plot)
    d = sol.diagnostics
    report.verdict("picard_converged", all(tr.converged for tr in d.traces), f"N={d.N}")
    report.verdict(
        "contraction_ratios",
        "ratio_exceeded" not in d.flags,
        f"max tail ratio {d.max_tail_ratio:.3g} (limit {cfg.solver.ratio_limit})",
    )
    if "partition_below_required" in d.flags:
        report.verdict("partition_count", False, d.suggestion or "")


def cmd_audit(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    factory = cfg.problem.factory()
    problem = factory(lattice)
    a = cfg.audit
    reps = audit_profile(problem.generator, lattice, a["probes"], p=problem.p, scale=a["scale"], seed=a["probe_seed"])
    rows = []
    for rep in reps:
        r = rep.row()
        r["worst_probe"] = json.dumps(rep.worst_probe, sort_keys=True) if rep.worst_probe else ""
        rows.append(r)
        report.verdict(f"{rep.detail.get('assumption', '')} / {rep.name}", rep.passed, f"worst ratio {rep.worst_ratio:.6g}")
    report.add("assumptions", rows)

    est = _estimate_problem(cfg, problem)
    if est is None:
        report.add("estimates", [])
        return
    lattices = [lattice]
    if a["stability"] and lattice.n_paths >= 4:
        lattices.insert(0, cfg.lattice.build(paths=lattice.n_paths // 2, seed=lattice.seed))

    def run(lat):
        pr = factory(lat) if lat is not lattice else problem
        pr = _estimate_problem(cfg, pr)
        return solve(pr, lat, cfg.solver)

    sols = parallel_map(run, lattices, workers)
    audits, baseline = [], None
    for sol in sols:
        cur = audit_all_estimates(sol.Y, sol.Z, sol.driver, problem.p, baseline=baseline)
        audits += cur
        baseline = cur
    report.add("estimates", [x.row() for x in audits])
    for x in baseline:
        if x.degenerate:
            report.verdict(f"estimate {x.inequality}", True, "degenerate right-hand side (flagged)")
        else:
            report.verdict(f"estimate {x.inequality}", math.isfinite(x.implied_constant),
                           f"implied constant {x.implied_constant:.6g}")


def _scenario(cfg: ExperimentConfig) -> ComparisonScenario:
    if cfg.lower is None:
        raise ConfigError("compare.lower", "table is required for the compare command")
    if cfg.upper is None:
        raise ConfigError("compare.upper", "table is required for the compare command")
    for pc in (cfg.lower, cfg.upper):
        _require_picard(pc)
    lower = cfg.lower.factory()
    same = cfg.raw["compare"]["lower"] == cfg.raw["compare"]["upper"]
    upper = lower if same else cfg.upper.factory()
    a = cfg.audit
    return ComparisonScenario(
        name=cfg.compare["name"],
        lower=lower,
        upper=upper,
        mode=cfg.compare["mode"],
        regular_side=cfg.compare["regular_side"],
        probes=a["probes"],
        probe_scale=a["scale"],
        probe_seed=a["probe_seed"],
    )


def cmd_compare(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    sc = _scenario(cfg)
    try:
        rep = run_comparison(sc, lattice, cfg.solver, workers=workers)
    except PreconditionError as exc:
        report.add("comparison", [{"scenario": sc.name, "status": "precondition_failed", "detail": str(exc),
                                   "probe": json.dumps(exc.probe, sort_keys=True) if exc.probe else ""}])
        report.verdict("preconditions", False, f"{exc} probe={exc.probe}")
        return
    report.add("comparison", [{**rep.row(), "status": "solved"}])
    plot = []
    t = lattice.grid.times
    _long(plot, t, "lower_mean", rep.lower.Y.values.mean(axis=0))
    _long(plot, t, "upper_mean", rep.upper.Y.values.mean(axis=0))
    _long(plot, t, "violation_fraction",
          np.mean(rep.lower.Y.values > rep.upper.Y.values + rep.eps_cmp, axis=0))
    report.add("plot_comparison", plot)
    report.verdict("ordering", rep.passed,
                   f"violation fraction {rep.violation_fraction:.6g} at eps {rep.eps_cmp:.6g}")


def cmd_minimal(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    factory = cfg.problem.factory()
    ns = cfg.minimal["ns"]
    try:
        if cfg.minimal["maximal"]:
            res = maximal_via_signflip(factory, lattice, ns, cfg.solver, cfg.search, workers)
        else:
            res = run_minimal_scheme(factory, lattice, ns, cfg.solver, cfg.search, workers)
    except PreconditionError as exc:
        report.add("minimal_trace", [])
        report.verdict("preconditions", False, str(exc))
        return
    report.add("minimal_trace", res.trace_rows())
    plot = []
    t = lattice.grid.times
    for n, sol in sorted(res.solutions.items()):
        _long(plot, t, f"n={n}", sol.Y.values.mean(axis=0))
    if res.envelope is not None:
        _long(plot, t, "envelope", res.envelope.Y.values.mean(axis=0))
    report.add("plot_minimal", plot)
    for n, msg in sorted(res.failures.items(), key=lambda kv: str(kv[0])):
        report.verdict(f"solve {n}", False, msg)
    report.verdict("monotone_in_n", res.monotone_ok, f"eps {res.eps_monotone:.6g}")
    report.verdict("sandwich", res.sandwich_ok, f"eps {res.eps_envelope:.6g}")
    report.verdict("distances_decreasing", res.distances_decreasing,
                   " ".join(f"{d:.4g}" for d in res.distances))


def cmd_unique(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    if _solve_mode(cfg.problem) == "minimal":
        _require_picard(cfg.problem)
    factory = cfg.problem.factory()
    try:
        rep = run_uniqueness_probe(factory, lattice, cfg.solver, guesses=cfg.unique["guesses"],
                                   partition_counts=cfg.unique["partitions"], probes=cfg.audit["probes"],
                                   workers=workers)
    except PreconditionError as exc:
        report.add("uniqueness", [])
        report.verdict("preconditions", False, f"{exc} probe={exc.probe}")
        return
    report.add("uniqueness", rep.rows())
    report.verdict("distances_below_threshold", rep.passed, f"threshold {rep.threshold:.6g}")


def cmd_partition(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    problem = cfg.problem.factory()(lattice)
    budget = problem_budget(problem)
    c_p = cfg.solver.c_p or default_c_p(problem.p)
    N = required_subintervals(problem.p, budget.M, c_p) if cfg.solver.partitions == "auto" else int(cfg.solver.partitions)
    part = build_partition(budget, N)
    per = part.interval_budgets(budget)
    times = lattice.grid.times
    rows = []
    for k in range(lattice.n_paths):
        for i in range(N):
            s, e = int(part.indices[k, i]), int(part.indices[k, i + 1])
            rows.append({"path": k, "subinterval": i + 1, "start_index": s, "stop_index": e,
                         "start_time": float(times[s]), "stop_time": float(times[e]), "budget": float(per[k, i])})
    report.add("partition", rows)
    slack = budget.step_slack()[:, None]
    ok = per <= budget.M / N + slack + 1e-12
    report.verdict("budget_per_subinterval", bool(ok.all()),
                   f"N={N}, {float(ok.mean()) * 100:.4g}% of (path, subinterval) within M/N + one step")


def cmd_gn(cfg: ExperimentConfig, lattice: BrownianLattice, report: RunReport, workers: int) -> None:
    problem = cfg.problem.factory()(lattice)
    g = cfg.gn
    ys = np.linspace(g["y_min"], g["y_max"], g["points"])
    z = np.full((ys.size, lattice.d), g["z"])
    paths = np.full(ys.size, g["path"])
    tidx = np.full(ys.size, g["time_index"])
    base = problem.generator(paths, tidx, ys, z)
    rows = []
    _long(rows, ys, "g", base)
    ns = sorted(set(g["ns"]))
    vals = parallel_map(lambda n: eval_gn(InfConvolutionSpec(problem.generator, n, **cfg.search), paths, tidx, ys, z),
                ns, workers)
    for n, v in zip(ns, vals):
        _long(rows, ys, f"g_n={n}", v)
    report.add("gn", rows)
    tol = 1e-9
    report.verdict("below_generator", all(np.all(v <= base + tol) for v in vals))
    report.verdict("nondecreasing_in_n", all(np.all(a <= b + tol) for a, b in zip(vals, vals[1:])))


COMMANDS = {
    "solve": cmd_solve,
    "audit": cmd_audit,
    "compare": cmd_compare,
    "minimal": cmd_minimal,
    "unique": cmd_unique,
    "partition": cmd_partition,
    "gn": cmd_gn,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsdelab", description="Monte Carlo experiments for BSDEs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML experiment file")
        sp.add_argument("--seed", type=int, help="override lattice.seed")
        sp.add_argument("--out", default="bsdelab-out", help="output directory")
        sp.add_argument("--paths", type=int, help="override lattice.paths")
        sp.add_argument("--steps", type=int, help="override lattice.steps")
        sp.add_argument("--workers", type=int, default=1, help="threads for independent solves")
        sp.add_argument("--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    started = time.perf_counter()
    stamp = datetime.now(timezone.utc).isoformat()
    try:
        if args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        cfg = load_config(args.config, {"seed": args.seed, "paths": args.paths, "steps": args.steps})
        log.info("config %s: lattice %s", cfg.hash, cfg.lattice)
        lattice = cfg.lattice.build()
        report = RunReport(args.command, cfg.hash, cfg.lattice.seed)
        COMMANDS[args.command](cfg, lattice, report, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    report.metadata = {
        "command": args.command,
        "started_utc": stamp,
        "wall_clock_seconds": time.perf_counter() - started,
        "seed": cfg.lattice.seed,
        "config_hash": cfg.hash,
        "workers": args.workers,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "passed": report.passed,
    }
    report.write(Path(args.out), cfg.raw)
    print(report.verdict_block())
    return EXIT_PASS if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
