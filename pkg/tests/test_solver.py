import math

import numpy as np
import pytest

from bsdelab.generators import build_problem, generator_from_expressions, Problem
from bsdelab.norms import sp_norm
from bsdelab.paths import TimeGrid, generate_lattice, required_subintervals
from bsdelab.solver import (
    NonConvergenceError,
    RegressionBasis,
    SolverConfig,
    conditional_expectation,
    fit_regression,
    picard_step,
    solve,
    transfer_solution,
)


@pytest.fixture(scope="module")
def lat():
    return generate_lattice(TimeGrid.uniform(1.0, 32), 1, 4000, 17)


def test_basis_size():
    assert RegressionBasis(3).size(1) == 4
    assert RegressionBasis(2).size(2) == 6
    assert RegressionBasis(2, cross_terms=False).size(2) == 5
    assert RegressionBasis(0).size(3) == 1


def test_regression_recovers_polynomial():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 2))
    y = 1 + 2 * x[:, 0] - x[:, 1] ** 2 + 0.5 * x[:, 0] * x[:, 1]
    model = fit_regression(x, y, RegressionBasis(2))
    new = rng.normal(size=(20, 2))
    want = 1 + 2 * new[:, 0] - new[:, 1] ** 2 + 0.5 * new[:, 0] * new[:, 1]
    assert np.allclose(model.predict(new), want, atol=1e-9)


def test_regression_ridge_on_collinear_state():
    x = np.random.default_rng(1).normal(size=(200, 1))
    state = np.hstack([x, 2 * x])
    model = fit_regression(state, x[:, 0] ** 2, RegressionBasis(2))
    assert np.all(np.isfinite(model.coef))
    assert np.allclose(model.predict(state), x[:, 0] ** 2, atol=1e-4)


def test_conditional_expectation(lat):
    BT2 = lat.terminal[:, 0] ** 2
    j = 16
    est = conditional_expectation(BT2, j, lat, RegressionBasis(2))
    Bt = lat.W[:, j, 0]
    assert np.sqrt(np.mean((est - (Bt ** 2 + 0.5)) ** 2)) < 0.05
    at0 = conditional_expectation(BT2, 0, lat)
    assert np.allclose(at0, BT2.mean())
    with pytest.raises(IndexError):
        conditional_expectation(BT2, 33, lat)


def test_zero_driver_is_martingale(lat):
    sol = solve(build_problem("zero", lat, xi="B"), lat)
    W = lat.W[:, :, 0]
    assert np.sqrt(np.mean((sol.Y.values - W) ** 2)) < 0.05
    assert np.sqrt(np.mean((sol.Z.values[:, :-1, 0] - 1) ** 2)) < 0.1
    assert np.array_equal(sol.Y.values[:, -1], lat.terminal[:, 0])
    assert abs(sol.diagnostics.residual_mean) < 1e-3


def test_constant_driver_closed_form(lat):
    pr = build_problem("constant", lat, xi="B", c=1.0)
    sol = solve(pr, lat)
    Yr, _ = pr.reference(lat)
    assert sp_norm(sol.Y.values - Yr) / sp_norm(Yr) < 0.05
    assert sol.Y.values[:, 0].mean() == pytest.approx(1.0, abs=0.03)


def test_auto_partition_follows_budget_rule(lat):
    pr = build_problem("abs_z", lat)
    sol = solve(pr, lat)
    d = sol.diagnostics
    assert d.N == d.N_required == required_subintervals(2.0, pr.generator.M, 4.0)
    assert len(d.traces) == d.N
    assert all(t.converged for t in d.traces)
    assert not d.flags and d.suggestion is None


def test_explicit_partition_below_required_is_flagged(lat):
    sol = solve(build_problem("abs_z", lat), lat, SolverConfig(partitions=2))
    assert sol.diagnostics.N == 2
    assert "partition_below_required" in sol.diagnostics.flags
    assert "16" in sol.diagnostics.suggestion


def test_nonconvergence_carries_trace(lat):
    with pytest.raises(NonConvergenceError) as info:
        solve(build_problem("linear", lat), lat, SolverConfig(max_iter=2))
    exc = info.value
    assert exc.trace.iterations == 2 and not exc.trace.converged
    assert exc.diagnostics is not None


def test_initial_guess_does_not_matter(lat):
    pr = build_problem("sqrt_z", lat)
    a = solve(pr, lat, SolverConfig(initial_guess="terminal"))
    b = solve(pr, lat, SolverConfig(initial_guess="zero"))
    assert sp_norm(a.Y.values - b.Y.values) < 1e-8


def test_iteration_rows(lat):
    sol = solve(build_problem("linear", lat), lat)
    rows = sol.diagnostics.iteration_rows()
    first = [r for r in rows if r["subinterval"] == 1]
    assert first[0]["iteration"] == 1 and first[0]["ratio"] == ""
    assert first[1]["ratio"] == pytest.approx(first[1]["distance"] / first[0]["distance"])


def test_picard_step_is_contraction_on_short_interval(lat):
    pr = build_problem("linear", lat)
    sol = solve(pr, lat)
    again = picard_step(sol, pr, lat, start=0, stop=lat.grid.last)
    assert sp_norm(again.Y.values - sol.Y.values) < 1e-6


def test_transfer_reproduces_on_same_lattice(lat):
    pr = build_problem("linear", lat)
    sol = solve(pr, lat)
    Y = transfer_solution(sol, pr, lat)
    assert np.allclose(Y, sol.Y.values, atol=1e-9)


def test_random_partition_solves(lat):
    pr = build_problem("budget_window", lat)
    sol = solve(pr, lat)
    assert all(t.converged for t in sol.diagnostics.traces)
    assert sol.diagnostics.max_tail_ratio <= 0.9
    # ordering: xi = B and driver u|y| + v|z| >= 0 gives Y >= E[B_T | F_t] up to noise
    assert np.mean(sol.Y.values[:, 0]) > -0.02


def test_multidimensional(lat):
    lat2 = generate_lattice(TimeGrid.uniform(1.0, 16), 2, 3000, 3)
    gen = generator_from_expressions(lat2, "u*y + v*znorm", u="0.2", v="0.3", M=0.3, profile=["stochastic-lipschitz"])
    xi = lat2.terminal.sum(axis=1)
    sol = solve(Problem("sum", gen, xi), lat2)
    assert sol.Z.values.shape == (3000, 17, 2)
    assert np.allclose(sol.Z.values[:, :-1].mean(axis=(0, 1)), sol.Z.values[:, :-1].mean(axis=(0, 1))[0], atol=0.05)


@pytest.mark.parametrize("kw", [{"tol": 0}, {"max_iter": 0}, {"partitions": 0}, {"partitions": 1.5},
                                {"initial_guess": "x"}, {"c_p": -1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_lattice_mismatch(lat):
    other = generate_lattice(TimeGrid.uniform(1.0, 32), 1, 100, 1)
    with pytest.raises(ValueError):
        solve(build_problem("zero", other), lat)
