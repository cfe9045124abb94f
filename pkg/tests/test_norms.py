import math

import numpy as np
import pytest

from bsdelab.norms import INEQUALITIES, audit_all_estimates, audit_estimate, mp_norm, norm_report, sp_norm
from bsdelab.paths import AdaptedProcess

from oracles import running_max_sq_mean


def test_sp_norm_of_brownian_motion(lattice_10k):
    W = lattice_10k.W[:, :, 0]
    assert sp_norm(W, 2.0) == pytest.approx(math.sqrt(running_max_sq_mean(W)), rel=1e-12)
    # Doob: E sup|B|^2 <= 4 E|B_T|^2
    assert sp_norm(W, 2.0) ** 2 <= 4 * np.mean(W[:, -1] ** 2)


def test_sp_norm_start_and_mask(lattice_small):
    W = lattice_small.W[:, :, 0]
    assert sp_norm(W, 2.0, start=64) == pytest.approx(math.sqrt(np.mean(W[:, -1] ** 2)))
    mask = np.zeros(W.shape, dtype=bool)
    mask[:, 3] = True
    assert sp_norm(W, 3.0, mask=mask) == pytest.approx(np.mean(np.abs(W[:, 3]) ** 3) ** (1 / 3))


def test_mp_norm_of_constant(lattice_small, grid64):
    one = AdaptedProcess.constant(lattice_small, 1.0)
    assert mp_norm(one, 2.0) == pytest.approx(1.0, rel=1e-12)
    assert mp_norm(one, 4.0, start=32) == pytest.approx(math.sqrt(0.5), rel=1e-12)
    two = np.ones((10, 65, 2))
    assert mp_norm(two, 2.0, grid=grid64) == pytest.approx(math.sqrt(2.0), rel=1e-12)


def test_mp_norm_left_sums(grid64):
    Z = np.tile(grid64.times, (3, 1))
    expected = math.sqrt(float(np.sum(grid64.times[:-1] ** 2 * grid64.dt)))
    assert mp_norm(Z, 2.0, grid=grid64) == pytest.approx(expected, rel=1e-12)


def test_norms_are_overflow_safe(grid64):
    Y = np.full((4, 65), 1e200)
    assert sp_norm(Y, 4.0) == pytest.approx(1e200, rel=1e-12)
    assert mp_norm(Y, 4.0, grid=grid64) == pytest.approx(1e200, rel=1e-12)


def test_norm_validation(grid64):
    Y = np.zeros((4, 65))
    with pytest.raises(ValueError):
        sp_norm(Y, 1.0)
    with pytest.raises(ValueError):
        sp_norm(Y, 2.0, start=65)
    with pytest.raises(ValueError):
        mp_norm(Y, 2.0, start=64, grid=grid64)
    with pytest.raises(ValueError):
        mp_norm(Y, 2.0)


def test_norm_report(lattice_small):
    one = AdaptedProcess.constant(lattice_small, 1.0)
    rep = norm_report(one, one, 2.0)
    assert rep.sp_norm == pytest.approx(1.0) and rep.mp_norm == pytest.approx(1.0)
    assert rep.paths == 2000 and rep.steps == 64


def _hand_estimates(Y, Z, g, dt, p):
    yT = np.abs(Y[:, -1])
    sup = np.max(np.abs(Y), axis=1)
    qv = (Z[:, :-1] ** 2) @ dt
    ay, ag = np.abs(Y[:, :-1]), np.abs(g[:, :-1])
    out = {}
    out["sup_bound"] = (np.mean(sup ** p), np.mean(yT ** p) + np.mean((ay ** (p - 1) * ag) @ dt))
    out["quadratic_variation_bound"] = (
        np.mean(qv ** (p / 2)),
        np.mean(yT ** p) + np.mean(((ay * ag) @ dt) ** (p / 2)) + np.mean(sup ** p),
    )
    out["combined_bound"] = (np.mean(sup ** p) + np.mean(qv ** (p / 2)), np.mean(yT ** p) + np.mean((ag @ dt) ** p))
    return out


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_estimates_match_hand_computation(lattice_small, p):
    W = lattice_small.W[:, :, 0]
    Y, Z, g = W + 1.0, np.ones_like(W) * 0.7, np.sin(W)
    hand = _hand_estimates(Y, Z, g, lattice_small.grid.dt, p)
    for rep in audit_all_estimates(Y, Z, g, p, grid=lattice_small.grid):
        lhs, rhs = hand[rep.inequality]
        assert rep.lhs == pytest.approx(lhs, rel=1e-12)
        assert rep.rhs_base == pytest.approx(rhs, rel=1e-12)
        assert rep.implied_constant == pytest.approx(lhs / rhs, rel=1e-12)


def test_degenerate_estimates_are_flagged(grid64):
    zero = np.zeros((10, 65))
    reps = audit_all_estimates(zero, zero, zero, 2.0, grid=grid64)
    assert [r.inequality for r in reps] == list(INEQUALITIES)
    assert all(r.degenerate and math.isnan(r.implied_constant) for r in reps)


def test_estimates_scale_exactly(lattice_small):
    W = lattice_small.W[:, :, 0]
    Y, Z, g = W ** 2, np.cos(W), W
    for name in INEQUALITIES:
        a = audit_estimate(name, Y, Z, g, 2.5, grid=lattice_small.grid)
        b = audit_estimate(name, 7 * Y, 7 * Z, 7 * g, 2.5, grid=lattice_small.grid)
        assert b.implied_constant == pytest.approx(a.implied_constant, rel=1e-12)


def test_relative_change_against_baseline(grid64):
    rng = np.random.default_rng(1)
    Y = rng.normal(size=(50, 65))
    base = audit_estimate("combined_bound", Y, Y, Y, 2.0, grid=grid64)
    again = audit_estimate("combined_bound", 2 * Y, Y, Y, 2.0, grid=grid64, baseline=base)
    assert again.relative_change == pytest.approx(abs(again.implied_constant / base.implied_constant - 1))
    assert again.row()["relative_change"] == again.relative_change


def test_unknown_inequality(grid64):
    with pytest.raises(ValueError):
        audit_estimate("nope", np.zeros((2, 65)), np.zeros((2, 65)), np.zeros((2, 65)), grid=grid64)
