import csv
import json

import pytest

from bsdelab.cli import main
from bsdelab.config import ConfigError, config_hash, parse_config

LATTICE = """
[lattice]
steps = 16
paths = {paths}
seed = 4
"""


def write(tmp_path, body, paths=1000, name="run.toml"):
    p = tmp_path / name
    p.write_text(LATTICE.format(paths=paths) + body)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, command, cfg, *extra, out="out"):
    target = tmp_path / out
    code = main([command, "--config", str(cfg), "--out", str(target), *extra])
    return code, target


def test_solve_zero_generator(tmp_path, capsys):
    cfg = write(tmp_path, '[problem]\ncatalog = "zero"\nxi = "B"\n')
    code, out = run(tmp_path, "solve", cfg)
    assert code == 0
    rows = read_csv(out / "summary.csv")
    assert len(rows) == 17
    assert all(abs(float(r["y_mean"])) < 0.1 for r in rows)
    assert {"schema_version", "config_hash", "seed"} <= set(rows[0])
    assert rows[0]["seed"] == "4" and rows[0]["schema_version"] == "1"
    assert (out / "iterations.csv").exists() and (out / "plot_solution.csv").exists()
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["seed"] == 4 and "wall_clock_seconds" in meta
    assert "PASS" in capsys.readouterr().out


def test_solve_linear_root_is_deterministic(tmp_path):
    cfg = write(tmp_path, '[problem]\ncatalog = "linear"\nxi = "B"\n', paths=4000)
    code, out = run(tmp_path, "solve", cfg)
    assert code == 0
    first = read_csv(out / "summary.csv")[0]
    assert abs(float(first["y_mean"])) < 0.05
    assert float(first["y_std"]) < 1e-10
    diag = {r["key"]: r["value"] for r in read_csv(out / "diagnostics.csv")}
    assert float(diag["reference_relative_s2_error"]) < 0.1


def test_plot_data_is_long_format(tmp_path):
    cfg = write(tmp_path, '[problem]\ncatalog = "constant"\nxi = "B"\n')
    code, out = run(tmp_path, "solve", cfg)
    rows = read_csv(out / "plot_solution.csv")
    assert set(rows[0]) == {"schema_version", "config_hash", "seed", "x", "y", "series"}
    assert {"y_mean", "z1_mean", "y_reference_mean"} <= {r["series"] for r in rows}


@pytest.mark.parametrize(
    "body,field",
    [
        ('[problem]\ncatalog = "zero"\np = 1\n', "problem.p"),
        ('[problem]\ncatalog = "nope"\n', "problem.catalog"),
        ('[problem]\ncatalog = "zero"\n[solver]\ndegree = -1\n', "solver.degree"),
        ('[problem]\ncatalog = "zero"\n[solver]\npartitions = "many"\n', "solver.partitions"),
        ('[problem]\n[problem.generator]\nexpr = "y +"\nM = 1.0\n', "problem"),
        ('[problem]\n[problem.generator]\nexpr = "y"\nM = 1.0\nprofile = ["H9"]\n', "problem.generator.profile[0]"),
        ('[problem]\ncatalog = "sqrt_y"\n', "problem.catalog"),
    ],
)
def test_config_errors_name_the_field(tmp_path, capsys, body, field):
    cfg = write(tmp_path, body)
    code, _ = run(tmp_path, "solve", cfg)
    assert code == 2
    assert f"{field}:" in capsys.readouterr().err


def test_horizon_must_be_positive(tmp_path, capsys):
    p = tmp_path / "h.toml"
    p.write_text('[lattice]\nhorizon = -1.0\n[problem]\ncatalog = "zero"\n')
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "lattice.horizon" in capsys.readouterr().err


def test_invalid_toml_and_missing_file(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[lattice\n")
    assert main(["solve", "--config", str(p)]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.toml")]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, '[problem]\ncatalog = "linear"\n[solver]\nmax_iter = 1\n')
    code, _ = run(tmp_path, "solve", cfg)
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err


def test_audit_budget_window_passes(tmp_path):
    cfg = write(tmp_path, '[problem]\ncatalog = "budget_window"\n[audit]\nprobes = 300\n')
    code, out = run(tmp_path, "audit", cfg)
    assert code == 0
    rows = read_csv(out / "assumptions.csv")
    claimed = {r["assumption"] for r in rows}
    assert {"stochastic-lipschitz", "integrable-driver"} <= claimed
    assert all(r["passed"] == "true" for r in rows)
    est = read_csv(out / "estimates.csv")
    assert len(est) == 6 and {r["paths"] for r in est} == {"500", "1000"}


def test_audit_quadratic_z_fails_with_probe(tmp_path):
    cfg = write(tmp_path, '[problem]\ncatalog = "quadratic_z"\n')
    code, out = run(tmp_path, "audit", cfg)
    assert code == 1
    rows = read_csv(out / "assumptions.csv")
    bad = [r for r in rows if r["passed"] == "false"]
    assert bad and all(json.loads(r["worst_probe"])["path"] >= 0 for r in bad)


def test_audit_zero_problem_is_degenerate(tmp_path):
    cfg = write(tmp_path, '[problem]\ncatalog = "zero"\nxi = "0"\n')
    code, out = run(tmp_path, "audit", cfg)
    assert code == 0
    est = read_csv(out / "estimates.csv")
    assert all(r["degenerate"] == "true" for r in est)
    verdicts = read_csv(out / "verdicts.csv")
    assert any("degenerate" in r["detail"] for r in verdicts)


def test_compare_trivial_scenario(tmp_path):
    body = """
[problem]
catalog = "zero"
[compare]
name = "constants"
[compare.lower]
catalog = "zero"
xi = "0"
[compare.upper]
catalog = "zero"
xi = "1"
"""
    code, out = run(tmp_path, "compare", write(tmp_path, body))
    assert code == 0
    row = read_csv(out / "comparison.csv")[0]
    assert row["passed"] == "true" and float(row["violation_fraction"]) == 0.0


def test_compare_precondition_failure(tmp_path):
    body = """
[problem]
catalog = "zero"
[compare.lower]
catalog = "zero"
xi = "1"
[compare.upper]
catalog = "zero"
xi = "0"
"""
    code, out = run(tmp_path, "compare", write(tmp_path, body))
    assert code == 1
    assert read_csv(out / "comparison.csv")[0]["status"] == "precondition_failed"


def test_compare_needs_both_sides(tmp_path, capsys):
    code, _ = run(tmp_path, "compare", write(tmp_path, '[problem]\ncatalog = "zero"\n'))
    assert code == 2
    assert "compare.lower" in capsys.readouterr().err


def test_minimal_trace_is_monotone(tmp_path):
    body = '[problem]\ncatalog = "sqrt_y"\nxi = "B"\n[minimal]\nns = [1, 2, 3]\n'
    code, out = run(tmp_path, "minimal", write(tmp_path, body, paths=600))
    assert code == 0
    rows = read_csv(out / "minimal_trace.csv")
    y0 = [float(r["y0_mean"]) for r in rows]
    assert y0 == sorted(y0)
    series = {r["series"] for r in read_csv(out / "plot_minimal.csv")}
    assert {"n=1", "n=3", "envelope"} <= series


def test_unique_distance_table(tmp_path):
    body = '[problem]\ncatalog = "sqrt_z"\nxi = "B"\n'
    code, out = run(tmp_path, "unique", write(tmp_path, body))
    assert code == 0
    rows = read_csv(out / "uniqueness.csv")
    assert len(rows) == 6 and all(r["passed"] == "true" for r in rows)
    code2, out2 = run(tmp_path, "unique", write(tmp_path, body), "--seed", "5", out="out2")
    assert code2 == 0
    assert read_csv(out2 / "uniqueness.csv")[0]["seed"] == "5"


def test_unique_rejects_quadratic_z(tmp_path):
    code, out = run(tmp_path, "unique", write(tmp_path, '[problem]\ncatalog = "quadratic_z"\n'))
    assert code == 1
    assert read_csv(out / "verdicts.csv")[0]["passed"] == "false"


def test_partition_dump(tmp_path):
    code, out = run(tmp_path, "partition", write(tmp_path, '[problem]\ncatalog = "linear"\n', paths=5))
    assert code == 0
    rows = read_csv(out / "partition.csv")
    assert len(rows) == 5 * 8
    # constant coefficient u = 1/2, M = 1/2: the i-th boundary sits at i/8 on every path
    assert all(float(r["stop_time"]) == int(r["subinterval"]) / 8 for r in rows)


def test_gn_table(tmp_path):
    body = '[problem]\ncatalog = "sqrt_y"\n[gn]\nns = [1, 4]\npoints = 5\ny_min = -1.0\ny_max = 1.0\n'
    code, out = run(tmp_path, "gn", write(tmp_path, body, paths=10))
    assert code == 0
    rows = read_csv(out / "gn.csv")
    assert {r["series"] for r in rows} == {"g", "g_n=1", "g_n=4"}
    g1 = {float(r["x"]): float(r["y"]) for r in rows if r["series"] == "g_n=1"}
    assert g1[0.5] == pytest.approx(0.5)


def test_overrides_change_hash(tmp_path):
    cfg = write(tmp_path, '[problem]\ncatalog = "zero"\n')
    _, a = run(tmp_path, "partition", cfg, out="a")
    _, b = run(tmp_path, "partition", cfg, "--paths", "7", out="b")
    ha = read_csv(a / "partition.csv")[0]["config_hash"]
    hb = read_csv(b / "partition.csv")[0]["config_hash"]
    assert ha != hb
    assert len(read_csv(b / "partition.csv")) == 7 * 16


def test_csv_bodies_are_byte_identical(tmp_path):
    body = """
[problem]
catalog = "abs_z"
[compare.lower]
catalog = "abs_z"
xi = "B"
[compare.upper]
catalog = "abs_z"
xi = "abs(B)"
"""
    cfg = write(tmp_path, body)
    _, a = run(tmp_path, "compare", cfg, "--workers", "1", out="a")
    _, b = run(tmp_path, "compare", cfg, "--workers", "2", out="b")
    _, c = run(tmp_path, "compare", cfg, "--workers", "1", out="c")
    names = sorted(p.name for p in a.glob("*.csv"))
    assert names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes() == (c / n).read_bytes()


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": {"c": 2}}) == config_hash({"b": {"c": 2}, "a": 1})
    assert len(config_hash({})) == 16


def test_parse_config_requires_sections():
    with pytest.raises(ConfigError) as info:
        parse_config({"problem": {"catalog": "zero"}})
    assert info.value.field_path == "lattice"
    with pytest.raises(ConfigError) as info:
        parse_config({"lattice": {}})
    assert info.value.field_path == "problem"
