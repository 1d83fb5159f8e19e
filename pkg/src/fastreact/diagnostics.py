"""Conserved quantities, energy decay, a priori bounds, and sweep fits.

Quadrature conventions: midpoint in space (matching the finite-volume grid)
and trapezoid in time over the stored snapshots.  The same weights are used
by the defect histograms, so totals agree across modules by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.stats import t as student_t

from .model import BranchStructure, ReactionFunction
from .solver import FieldState, Grid1D, Trajectory, neumann_laplacian, trapezoid_weights


class FitError(ValueError):
    """Too few points to fit a convergence slope."""


def total_mass(state: FieldState, grid: Optional[Grid1D] = None) -> float:
    """Midpoint quadrature of u + v (or of w for a scalar state)."""
    g = grid if grid is not None else state.grid
    if state.w is not None and state.u is None:
        return float(np.sum(state.w) * g.h)
    return float(np.sum(state.u + state.v) * g.h)


def mass_trace(traj: Trajectory) -> np.ndarray:
    return np.array([total_mass(s) for s in traj.states])


def relative_mass_drift(traj: Trajectory) -> float:
    masses = mass_trace(traj)
    scale = max(abs(masses[0]), 1e-300)
    return float(np.max(np.abs(masses - masses[0])) / scale)


def _potential(rf: ReactionFunction, u: np.ndarray) -> np.ndarray:
    """Primitive of the rate law, vanishing at 0."""
    if rf.antiderivative is not None:
        return np.asarray(rf.antiderivative(u), dtype=float)
    flat = np.unique(np.asarray(u, dtype=float).ravel())
    table = {x: quad(lambda s: float(rf.f(np.asarray(s))), 0.0, x,
                     epsabs=1e-10, epsrel=1e-10)[0] for x in flat}
    return np.vectorize(table.__getitem__)(u)


@dataclass
class EnergyTrace:
    """Discrete free energy per snapshot and its worst uphill move."""

    times: np.ndarray
    energy: np.ndarray
    max_increase: float

    @property
    def initial(self) -> float:
        return float(self.energy[0])


def energy_trace(traj: Trajectory, rf: ReactionFunction) -> EnergyTrace:
    """E(t) = integral of Potential(u) + v^2/2; nonincreasing for this flow."""
    h = traj.grid.h
    vals = np.array([float(np.sum(_potential(rf, s.u) + 0.5 * s.v ** 2) * h)
                     for s in traj.states])
    inc = np.diff(vals)
    max_inc = float(np.max(inc)) if inc.size else 0.0
    return EnergyTrace(traj.times, vals, max(max_inc, 0.0))


def m_bound(initial: FieldState, rf: ReactionFunction, structure: BranchStructure) -> float:
    """Invariant sup bound from the initial data and the fold geometry."""
    return float(max(np.max(rf.f(initial.u)), np.max(initial.u),
                     np.max(initial.v), structure.f_peak, structure.u_high))


@dataclass
class AprioriReport:
    """Measured counterparts of the uniform-in-eps estimates."""

    epsilon: float
    m_bound: float
    max_u: float
    max_v: float
    min_u: float
    min_v: float
    grad_v_l2: float
    scaled_defect_l2: float      # ||(F(u) - v)/sqrt(eps)||_L2(t,x)
    eps_laplacian_l2: float      # ||sqrt(eps) * Lap v||
    defect_l2: float             # ||F(u) - v||
    bound_excess: float          # how far any field exceeds m_bound
    negative_excess: float       # how far any field dips below 0
    bounds_ok: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def apriori_report(traj: Trajectory, rf: ReactionFunction, epsilon: float,
                   structure: BranchStructure, bound_tol: float = 1e-6,
                   neg_tol: float = 1e-8) -> AprioriReport:
    g = traj.grid
    h = g.h
    wt = trapezoid_weights(traj.times)
    bound = m_bound(traj.initial, rf, structure)

    max_u = max_v = -np.inf
    min_u = min_v = np.inf
    grad2 = defect2 = lap2 = 0.0
    for w, s in zip(wt, traj.states):
        max_u = max(max_u, float(np.max(s.u)))
        max_v = max(max_v, float(np.max(s.v)))
        min_u = min(min_u, float(np.min(s.u)))
        min_v = min(min_v, float(np.min(s.v)))
        d = rf.f(s.u) - s.v
        defect2 += w * float(np.sum(d * d)) * h
        faces = np.diff(s.v) / h
        grad2 += w * float(np.sum(faces * faces)) * h
        lap = neumann_laplacian(s.v, h)
        lap2 += w * float(np.sum(lap * lap)) * h

    excess = max(max_u - bound, max_v - bound, 0.0)
    negative = max(-min_u, -min_v, 0.0)
    return AprioriReport(
        epsilon=epsilon,
        m_bound=bound,
        max_u=max_u, max_v=max_v, min_u=min_u, min_v=min_v,
        grad_v_l2=float(np.sqrt(grad2)),
        scaled_defect_l2=float(np.sqrt(defect2 / epsilon)),
        eps_laplacian_l2=float(np.sqrt(epsilon * lap2)),
        defect_l2=float(np.sqrt(defect2)),
        bound_excess=excess,
        negative_excess=negative,
        bounds_ok=bool(excess <= bound_tol and negative <= neg_tol),
    )


@dataclass
class FitResult:
    """Least-squares slope of log(defect) against log(eps)."""

    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    n_points: int
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sweep_fit(eps_values, defect_norms, confidence: float = 0.95) -> FitResult:
    """Fit the convergence rate over a sweep; exact on exact power laws.

    Fewer than 3 points raise FitError; nonpositive defects (an all-stationary
    sweep) yield a degenerate result instead of a crash.
    """
    eps = np.asarray(eps_values, dtype=float)
    d = np.asarray(defect_norms, dtype=float)
    if eps.size < 3 or d.size != eps.size:
        raise FitError(f"need at least 3 matched points, got {eps.size}/{d.size}")
    if np.any(d <= 0.0) or np.any(eps <= 0.0):
        return FitResult(np.nan, np.nan, np.nan, np.nan, np.nan,
                         int(eps.size), degenerate=True)
    x = np.log(eps)
    y = np.log(d)
    n = eps.size
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    if n > 2:
        s2 = float(np.sum(resid ** 2)) / (n - 2)
        stderr = float(np.sqrt(s2 / sxx))
        tcrit = float(student_t.ppf(0.5 + confidence / 2.0, n - 2))
    else:  # pragma: no cover - guarded by the n >= 3 check
        stderr, tcrit = np.nan, np.nan
    return FitResult(slope, intercept, stderr,
                     slope - tcrit * stderr, slope + tcrit * stderr, int(n))


@dataclass
class SweepEntry:
    """Per-eps diagnostics aggregated by the sweep driver."""

    epsilon: float
    apriori: AprioriReport
    identity_mean: float
    identity_sup: float
    pushforward_sup: float
    binarization_fraction: float
    rho_mean: float
    mass_drift: float
    energy_max_increase: float
    failed: bool = False


@dataclass
class SweepSummary:
    """Sweep-level rollup: entries in decreasing eps plus the fitted rate."""

    entries: list
    fit: Optional[FitResult]
    trends: dict = field(default_factory=dict)

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([e.epsilon for e in self.entries])

    def surviving(self) -> list:
        return [e for e in self.entries if not e.failed]
