"""Empirical S^p and M^p norms and a priori estimate audits.

``S^p``: ``(E[max_i |Y_{t_i}|^p])^(1/p)``; the supremum over continuous time is
replaced by the maximum over grid points.
``M^p``: ``(E[(sum_i |Z_{t_i}|^2 dt_i)^(p/2)])^(1/p)`` with left sums.

The estimate audits compare the two sides of three a priori bounds for a
solution of ``Y_t = Y_T + int_t^T g_s ds - int_t^T Z_s dB_s``:

``sup_bound``
    ``E sup|Y|^p  <=  C E[|Y_T|^p + int |Y|^(p-1) |g| ds]``
``quadratic_variation_bound``
    ``E (int |Z|^2 ds)^(p/2)  <=  C {E[|Y_T|^p + (int |Y||g| ds)^(p/2)] + E sup|Y|^p}``
``combined_bound``
    ``E sup|Y|^p + E (int |Z|^2 ds)^(p/2)  <=  C E[|Y_T|^p + (int |g| ds)^p]``

No constant is known numerically, so the audit reports the implied constant
``lhs / rhs_base`` and how stable it is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .paths import AdaptedProcess, TimeGrid

__all__ = [
    "sp_norm",
    "mp_norm",
    "NormReport",
    "norm_report",
    "EstimateAudit",
    "INEQUALITIES",
    "audit_estimate",
    "audit_all_estimates",
]

INEQUALITIES = ("sup_bound", "quadratic_variation_bound", "combined_bound")

ArrayLike = Union[AdaptedProcess, np.ndarray]


def _values(x: ArrayLike) -> np.ndarray:
    return x.values if isinstance(x, AdaptedProcess) else np.asarray(x, dtype=float)


def _check_p(p: float) -> None:
    if not p > 1:
        raise ValueError(f"p must be > 1, got {p}")


def _pmean(x: np.ndarray, p: float) -> float:
    """``(mean x^p)^(1/p)`` for nonnegative ``x``, rescaled against overflow."""
    top = float(x.max()) if x.size else 0.0
    if top == 0.0:
        return 0.0
    return top * float(np.mean((x / top) ** p)) ** (1.0 / p)


def pathwise_sup(values: np.ndarray, start: int = 0, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-path ``max_{i >= start} |Y_i|`` (restricted to ``mask`` when given)."""
    vals = np.abs(values[:, start:])
    if mask is not None:
        vals = np.where(mask[:, start:], vals, 0.0)
    return vals.max(axis=1)


def pathwise_quadratic(values: np.ndarray, grid: TimeGrid, start: int = 0, mask: Optional[np.ndarray] = None):
    """Per-path ``sum_{i >= start} |Z_i|^2 dt_i`` over steps (left sums)."""
    z = values if values.ndim == 3 else values[..., None]
    sq = np.einsum("pik,pik->pi", z[:, start:-1], z[:, start:-1])
    if mask is not None:
        sq = np.where(mask[:, start:-1], sq, 0.0)
    return sq @ grid.dt[start:]


def sp_norm(Y: ArrayLike, p: float = 2.0, start: int = 0, mask: Optional[np.ndarray] = None) -> float:
    """Empirical ``S^p`` norm on ``[t_start, T]``.

    Parameters
    ----------
    Y : AdaptedProcess or ndarray of shape (paths, points)
    p : float
        Integrability order, ``> 1``.
    start : int
        First grid index of the range.
    mask : ndarray of bool, optional
        Restrict the supremum to marked points.
    """
    _check_p(p)
    vals = _values(Y)
    if not 0 <= start < vals.shape[1]:
        raise ValueError(f"empty range: start={start} with {vals.shape[1]} grid points")
    return _pmean(pathwise_sup(vals, start, mask), p)


def mp_norm(
    Z: ArrayLike, p: float = 2.0, start: int = 0, grid: Optional[TimeGrid] = None, mask: Optional[np.ndarray] = None
) -> float:
    """Empirical ``M^p`` norm on ``[t_start, T]`` (scalar or vector ``Z``)."""
    _check_p(p)
    if isinstance(Z, AdaptedProcess):
        grid = Z.grid
    if grid is None:
        raise ValueError("a time grid is needed for raw arrays")
    vals = _values(Z)
    if not 0 <= start < grid.last:
        raise ValueError(f"empty range: start={start} with {grid.steps} steps")
    top = float(np.max(np.abs(vals))) if vals.size else 0.0
    if top == 0.0 or not math.isfinite(top):
        top = 1.0
    q = pathwise_quadratic(vals / top, grid, start, mask)
    return top * _pmean(np.sqrt(q), p)


@dataclass(frozen=True)
class NormReport:
    p: float
    sp_norm: float
    mp_norm: float
    paths: int
    steps: int
    horizon: float


def norm_report(Y: AdaptedProcess, Z: AdaptedProcess, p: float = 2.0, start: int = 0) -> NormReport:
    return NormReport(
        p=p,
        sp_norm=sp_norm(Y, p, start),
        mp_norm=mp_norm(Z, p, start),
        paths=Y.n_paths,
        steps=Y.grid.steps,
        horizon=Y.grid.horizon,
    )


@dataclass
class EstimateAudit:
    inequality: str
    p: float
    paths: int
    lhs: float
    rhs_base: float
    implied_constant: float  # nan when degenerate
    degenerate: bool
    start: int = 0
    relative_change: Optional[float] = None

    def row(self) -> dict:
        return {
            "inequality": self.inequality,
            "p": self.p,
            "paths": self.paths,
            "lhs": self.lhs,
            "rhs_base": self.rhs_base,
            "implied_constant": self.implied_constant,
            "degenerate": self.degenerate,
            "relative_change": "" if self.relative_change is None else self.relative_change,
        }


def audit_estimate(
    inequality: str,
    Y: ArrayLike,
    Z: ArrayLike,
    g: ArrayLike,
    p: float = 2.0,
    start: int = 0,
    grid: Optional[TimeGrid] = None,
    baseline: Optional[EstimateAudit] = None,
    degenerate_tol: float = 1e-300,
) -> EstimateAudit:
    """Both sides of one a priori bound, evaluated by Monte Carlo.

    ``g`` holds the driver values ``g_s`` along the solution, shape
    ``(paths, points)``; its final column is ignored.  If ``baseline`` is
    given (e.g. the same audit at half the path count) the relative change
    of the implied constant against it is recorded.
    """
    if inequality not in INEQUALITIES:
        raise ValueError(f"unknown inequality {inequality!r}; choose from {INEQUALITIES}")
    _check_p(p)
    for proc in (Y, Z, g):
        if isinstance(proc, AdaptedProcess):
            grid = proc.grid
    if grid is None:
        raise ValueError("a time grid is needed for raw arrays")
    y, z, gv = _values(Y), _values(Z), _values(g)
    if not 0 <= start < grid.last:
        raise ValueError(f"empty range: start={start}")
    dt = grid.dt[start:]
    yT = np.abs(y[:, -1])
    ay = np.abs(y[:, start:-1])
    ag = np.abs(gv[:, start:-1])
    sup_p = np.mean(pathwise_sup(y, start) ** p)
    qv = np.mean(pathwise_quadratic(z, grid, start) ** (p / 2))
    term_T = np.mean(yT ** p)
    if inequality == "sup_bound":
        lhs = sup_p
        rhs = term_T + np.mean((ay ** (p - 1) * ag) @ dt)
    elif inequality == "quadratic_variation_bound":
        lhs = qv
        rhs = term_T + np.mean(((ay * ag) @ dt) ** (p / 2)) + sup_p
    else:
        lhs = sup_p + qv
        rhs = term_T + np.mean((ag @ dt) ** p)
    lhs, rhs = float(lhs), float(rhs)
    degenerate = not rhs > degenerate_tol
    implied = math.nan if degenerate else lhs / rhs
    rel = None
    if baseline is not None and not degenerate and not baseline.degenerate and baseline.implied_constant > 0:
        rel = abs(implied - baseline.implied_constant) / baseline.implied_constant
    return EstimateAudit(
        inequality=inequality,
        p=p,
        paths=y.shape[0],
        lhs=lhs,
        rhs_base=rhs,
        implied_constant=implied,
        degenerate=degenerate,
        start=start,
        relative_change=rel,
    )


def audit_all_estimates(Y, Z, g, p: float = 2.0, start: int = 0, grid=None, baseline=None) -> list:
    """The three audits in a fixed order; ``baseline`` is a matching list or ``None``."""
    base = baseline or [None] * len(INEQUALITIES)
    return [audit_estimate(name, Y, Z, g, p, start, grid, b) for name, b in zip(INEQUALITIES, base)]
