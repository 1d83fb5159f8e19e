"""Nonmonotone rate law and its branch geometry.

The rate law F is a C1 function on [0, u_max] with F(0) = 0, F >= 0, one
interior local maximum followed by one interior local minimum, and strict
growth past the minimum.  The resulting S-shaped graph has a hysteresis
window: for rates between the two fold values the equation F(u) = xi has
three roots, one on each monotone branch.  Everything downstream (branch
inverses and their slopes, the Wronskian independence certificate, the
pseudo-parabolic change of variables) reads that geometry from here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar


class ModelError(ValueError):
    """Base class for rate-law construction and evaluation problems."""


class DomainError(ModelError):
    """Evaluation requested outside the declared domain of validity."""


class ShapeError(ModelError):
    """The supplied function does not have the required one-max/one-min shape."""


class ValidityError(ModelError):
    """A change-of-variables map was used although its premise fails."""


REFERENCE_CUBIC_COEFFS = (1.0, -4.5, 6.0, 0.0)

#: Relative slack tolerated on domain checks before raising DomainError.
_DOMAIN_SLACK = 1e-9


@dataclass(frozen=True)
class ReactionFunction:
    """Rate law F together with its derivative, kept opaque behind evaluators.

    Attributes
    ----------
    f, fprime : callables mapping ndarray -> ndarray (vectorized).
    u_max : float
        Upper end of the domain of validity [0, u_max].
    kind : str
        "builtin-cubic", "coefficients" or "custom"; informational.
    coeffs : tuple or None
        Cubic coefficients (c3, c2, c1, c0) when polynomial, else None.
    antiderivative : callable or None
        Exact primitive of f with value 0 at 0, when available.
    """

    f: Callable[[np.ndarray], np.ndarray]
    fprime: Callable[[np.ndarray], np.ndarray]
    u_max: float
    kind: str = "custom"
    coeffs: Optional[tuple] = None
    antiderivative: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not np.isfinite(self.u_max) or self.u_max <= 0.0:
            raise ModelError(f"u_max must be positive and finite, got {self.u_max}")

    def with_u_max(self, u_max: float) -> "ReactionFunction":
        return ReactionFunction(self.f, self.fprime, float(u_max), self.kind,
                                self.coeffs, self.antiderivative)


def cubic_reaction(coeffs: Sequence[float], u_max: float = 4.0,
                   kind: str = "coefficients") -> ReactionFunction:
    """Build a cubic rate law c3*u^3 + c2*u^2 + c1*u + c0.

    The constant term must be zero (the rate law vanishes at zero
    concentration); anything else is rejected up front.
    """
    c3, c2, c1, c0 = (float(c) for c in coeffs)
    if c0 != 0.0:
        raise ModelError(f"constant coefficient must be 0 (rate law vanishes at 0), got {c0}")

    def f(u):
        u = np.asarray(u, dtype=float)
        return u * (c1 + u * (c2 + u * c3))

    def fprime(u):
        u = np.asarray(u, dtype=float)
        return c1 + u * (2.0 * c2 + u * (3.0 * c3))

    def antiderivative(u):
        u = np.asarray(u, dtype=float)
        return u * u * (c1 / 2.0 + u * (c2 / 3.0 + u * (c3 / 4.0)))

    return ReactionFunction(f, fprime, float(u_max), kind, (c3, c2, c1, c0),
                            antiderivative)


def reference_cubic(u_max: float = 4.0) -> ReactionFunction:
    """The built-in default cubic u^3 - 4.5 u^2 + 6 u on [0, u_max]."""
    return cubic_reaction(REFERENCE_CUBIC_COEFFS, u_max, kind="builtin-cubic")


def eval_f(rf: ReactionFunction, u) -> tuple:
    """Evaluate (F(u), F'(u)) with a domain check on [0, u_max]."""
    u = np.asarray(u, dtype=float)
    slack = _DOMAIN_SLACK * max(1.0, rf.u_max)
    if np.any(u < -slack) or np.any(u > rf.u_max + slack):
        bad = u[(u < -slack) | (u > rf.u_max + slack)]
        raise DomainError(f"u outside [0, {rf.u_max}]: {np.ravel(bad)[:4]}")
    val, der = rf.f(u), rf.fprime(u)
    if u.ndim == 0:
        return float(val), float(der)
    return val, der


@dataclass(frozen=True)
class BranchStructure:
    """Critical geometry of the rate law.

    ``u_peak`` / ``u_valley`` are the interior local max / min of F;
    ``f_valley`` / ``f_peak`` are the corresponding fold rates F(u_valley) <
    F(u_peak).  ``u_low`` is the point on the first increasing branch with
    F(u_low) = f_valley, ``u_high`` the point on the last branch with
    F(u_high) = f_peak, so the hysteresis window is [u_low, u_high] x
    [f_valley, f_peak].
    """

    u_low: float
    u_peak: float
    u_valley: float
    u_high: float
    f_valley: float
    f_peak: float

    def __post_init__(self):
        if not (self.u_low < self.u_peak < self.u_valley < self.u_high):
            raise ShapeError("branch points out of order: "
                             f"{self.u_low}, {self.u_peak}, {self.u_valley}, {self.u_high}")
        if not (self.f_valley < self.f_peak):
            raise ShapeError(f"fold rates out of order: {self.f_valley} >= {self.f_peak}")

    @property
    def fold_width(self) -> float:
        return self.f_peak - self.f_valley


def compute_branch_structure(rf: ReactionFunction, n_scan: int = 4096,
                             residual_tol: float = 1e-10) -> BranchStructure:
    """Locate the folds of an admissible rate law.

    Scans F' for sign changes on [0, u_max]; exactly two are required (one
    local max, one local min).  The outer window points are then solved on
    the two increasing branches.  Raises ShapeError if the function is not
    admissible, including when F(u_max) does not exceed the upper fold rate
    (u_max too small to contain the window).
    """
    us = np.linspace(0.0, rf.u_max, n_scan)
    fv = rf.f(us)
    dv = rf.fprime(us)

    if abs(float(rf.f(np.asarray(0.0)))) > 1e-12:
        raise ShapeError("rate law must vanish at 0")
    if np.min(fv) < -1e-12:
        raise ShapeError("rate law must be nonnegative on [0, u_max]")

    # Sign-change detection must survive critical points landing exactly on
    # scan nodes, so zeros are skipped when pairing brackets.
    sgn = np.sign(dv)
    nz = np.nonzero(sgn != 0)[0]
    if nz.size < 2:
        raise ShapeError("derivative vanishes almost everywhere on the scan")
    flip_pos = np.nonzero(sgn[nz][:-1] != sgn[nz][1:])[0]
    if len(flip_pos) != 2:
        raise ShapeError("derivative must change sign exactly twice on "
                         f"(0, u_max), found {len(flip_pos)}")

    def dfun(x):
        return float(rf.fprime(np.asarray(x)))

    u_peak = brentq(dfun, us[nz[flip_pos[0]]], us[nz[flip_pos[0] + 1]],
                    xtol=1e-15, rtol=8.9e-16)
    u_valley = brentq(dfun, us[nz[flip_pos[1]]], us[nz[flip_pos[1] + 1]],
                      xtol=1e-15, rtol=8.9e-16)
    f_peak = float(rf.f(np.asarray(u_peak)))
    f_valley = float(rf.f(np.asarray(u_valley)))
    if not f_valley < f_peak:
        raise ShapeError("fold rates are not ordered; function is not one-max/one-min")

    tail = us[us > u_valley + 1e-3 * (rf.u_max - u_valley)]
    if tail.size and np.any(rf.fprime(tail) <= 0):
        raise ShapeError("rate law must be strictly increasing past the local minimum")
    if float(rf.f(np.asarray(rf.u_max))) <= f_peak:
        raise ShapeError("u_max too small: F(u_max) must exceed the upper fold rate")

    def ffun(x, target):
        return float(rf.f(np.asarray(x))) - target

    u_low = brentq(ffun, 0.0, u_peak, args=(f_valley,), xtol=1e-15, rtol=8.9e-16)
    u_high = brentq(ffun, u_valley, rf.u_max, args=(f_peak,), xtol=1e-15, rtol=8.9e-16)

    for point, target in ((u_low, f_valley), (u_high, f_peak)):
        if abs(ffun(point, target)) > residual_tol:
            raise ShapeError(f"window point residual {abs(ffun(point, target)):.2e} "
                             f"exceeds {residual_tol:.1e}")
    return BranchStructure(u_low, u_peak, u_valley, u_high, f_valley, f_peak)


def _solve_monotone(f, lo, hi, target, increasing: bool, fprime=None,
                    max_bisect: int = 64, newton: int = 3):
    """Vectorized bracketed bisection with an optional Newton polish.

    f must be monotone on [lo, hi] elementwise and the targets must lie in
    the closed range; the bracket guarantees convergence, Newton only
    sharpens the last digits.
    """
    lo = np.array(np.broadcast_to(lo, np.shape(target)), dtype=float)
    hi = np.array(np.broadcast_to(hi, np.shape(target)), dtype=float)
    target = np.asarray(target, dtype=float)
    lo0, hi0 = lo.copy(), hi.copy()

    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        below = (f(mid) < target) if increasing else (f(mid) > target)
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        span = np.max(hi - lo) if lo.size else 0.0
        if span <= 1e-15 * max(1.0, np.max(np.abs(hi0))):
            break
    x = 0.5 * (lo + hi)

    if fprime is not None:
        for _ in range(newton):
            d = fprime(x)
            step = np.where(np.abs(d) > 1e-30, (f(x) - target) / np.where(d == 0, 1.0, d), 0.0)
            x = np.clip(x - step, lo0, hi0)
    return x


class BranchInverses:
    """The three monotone inverses of F, extended by constants outside their ranges.

    Branch 1 inverts F on [0, u_peak] (increasing), branch 2 on
    [u_peak, u_valley] (decreasing), branch 3 on [u_valley, ...] (increasing).
    Outside the rate range of a branch the inverse is frozen at the nearest
    endpoint value with slope 0.  Slopes inside are 1/F'(u); where F' is
    closer to zero than 1/slope_cap (the folds) the slope is clamped to
    +-slope_cap and flagged.
    """

    def __init__(self, structure: BranchStructure, solvers, derivs, slope_cap: float = 1e6):
        # solvers[i](xi) -> u valid strictly inside branch i's rate range;
        # derivs[i](u) -> F'(u).  Supplied by the factories below.
        self.structure = structure
        self._solvers = solvers
        self._derivs = derivs
        self.slope_cap = float(slope_cap)

    @classmethod
    def from_reaction(cls, rf: ReactionFunction, structure: Optional[BranchStructure] = None,
                      slope_cap: float = 1e6) -> "BranchInverses":
        st = structure if structure is not None else compute_branch_structure(rf)

        def solve1(xi):
            return _solve_monotone(rf.f, 0.0, st.u_peak, xi, True, rf.fprime)

        def solve2(xi):
            return _solve_monotone(rf.f, st.u_peak, st.u_valley, xi, False, rf.fprime)

        def solve3(xi):
            hi = rf.u_max
            f_hi = float(rf.f(np.asarray(hi)))
            top = float(np.max(xi)) if np.size(xi) else f_hi
            # Growth at infinity is assumed; expand a little if the declared
            # domain happens to cut the third branch short.
            doublings = 0
            while f_hi < top:
                hi *= 2.0
                f_hi = float(rf.f(np.asarray(hi)))
                doublings += 1
                if doublings > 6:
                    raise DomainError(f"rate {top} not reached by F up to u = {hi}")
            return _solve_monotone(rf.f, st.u_valley, hi, xi, True, rf.fprime)

        return cls(st, (solve1, solve2, solve3), (rf.fprime,) * 3, slope_cap)

    @classmethod
    def from_callables(cls, structure: BranchStructure, inverses, derivs,
                       slope_cap: float = 1e6) -> "BranchInverses":
        """Wrap externally supplied branch inverses (used for synthetic laws)."""
        solvers = tuple((lambda xi, g=g: np.asarray(g(xi), dtype=float)) for g in inverses)
        return cls(structure, solvers, tuple(derivs), slope_cap)

    def _interior_mask(self, i: int, xi: np.ndarray) -> np.ndarray:
        st = self.structure
        if i == 1:
            return (xi > 0.0) & (xi < st.f_peak)
        if i == 2:
            return (xi > st.f_valley) & (xi < st.f_peak)
        return xi > st.f_valley

    def _extension_value(self, i: int, xi: np.ndarray) -> np.ndarray:
        st = self.structure
        if i == 1:
            return np.where(xi <= 0.0, 0.0, st.u_peak)
        if i == 2:
            return np.where(xi <= st.f_valley, st.u_valley, st.u_peak)
        return np.full_like(xi, st.u_valley)

    def value_slope(self, i: int, xi):
        """Return (u, slope, clamped) for branch i at rates xi."""
        if i not in (1, 2, 3):
            raise ValueError(f"branch index must be 1, 2 or 3, got {i}")
        xi_arr = np.asarray(xi, dtype=float)
        scalar = xi_arr.ndim == 0
        xi_arr = np.atleast_1d(xi_arr)

        inside = self._interior_mask(i, xi_arr)
        u = self._extension_value(i, xi_arr)
        slope = np.zeros_like(u)
        clamped = np.zeros(u.shape, dtype=bool)

        if np.any(inside):
            u_in = self._solvers[i - 1](xi_arr[inside])
            d = np.asarray(self._derivs[i - 1](u_in), dtype=float)
            sign = -1.0 if i == 2 else 1.0
            tiny = 1.0 / self.slope_cap
            flat = np.abs(d) < tiny
            s = np.where(flat, sign * self.slope_cap, 1.0 / np.where(flat, 1.0, d))
            u[inside] = u_in
            slope[inside] = s
            clamped[inside] = flat

        if scalar:
            return float(u[0]), float(slope[0]), bool(clamped[0])
        return u, slope, clamped

    def value(self, i: int, xi):
        return self.value_slope(i, xi)[0]

    def values(self, xi):
        """Stack the three branch values for rates xi, shape (3,) + xi.shape."""
        return np.stack([self.value(i, xi) for i in (1, 2, 3)])


def branch_inverse(bi: BranchInverses, i: int, xi):
    """Invert F on branch i at rate xi; returns (u, slope).

    Total for xi >= 0 thanks to the constant extension; negative rates are
    rejected.
    """
    if np.any(np.asarray(xi) < 0.0):
        raise DomainError("branch inverses are defined for nonnegative rates only")
    u, slope, _ = bi.value_slope(i, xi)
    return u, slope


def nondegeneracy_check(bi: BranchInverses, lo: float, hi: float, n_samples: int,
                        fd_step: Optional[float] = None) -> float:
    """Minimum |Wronskian| of {1 + S_i'} over a window inside the fold range.

    The three shifted branch slopes are sampled on [lo, hi]; their first and
    second derivatives are taken by centered differences with step
    ``fd_step`` (default 1e-3 of the fold width, shrunk to stay inside the
    open fold interval).  A strictly positive return value certifies, at
    sampling resolution, that no fixed nontrivial combination of the three
    shifted slopes with coefficient sum != 0 vanishes on the window.
    """
    st = bi.structure
    if n_samples < 3:
        raise DomainError(f"need at least 3 samples, got {n_samples}")
    if not (st.f_valley < lo < hi < st.f_peak):
        raise DomainError(f"window [{lo}, {hi}] must lie strictly inside "
                          f"({st.f_valley}, {st.f_peak})")
    h = fd_step if fd_step is not None else 1e-3 * st.fold_width
    h = min(h, 0.45 * (lo - st.f_valley), 0.45 * (st.f_peak - hi))
    if h <= 0:
        raise DomainError("window touches the folds; no room for finite differences")

    xi = np.linspace(lo, hi, n_samples)
    rows = np.empty((3, 3, n_samples))
    for i in (1, 2, 3):
        s_mid = bi.value_slope(i, xi)[1]
        s_lft = bi.value_slope(i, xi - h)[1]
        s_rgt = bi.value_slope(i, xi + h)[1]
        rows[0, i - 1] = 1.0 + s_mid
        rows[1, i - 1] = (s_rgt - s_lft) / (2.0 * h)
        rows[2, i - 1] = (s_rgt - 2.0 * s_mid + s_lft) / (h * h)
    w = np.linalg.det(np.transpose(rows, (2, 0, 1)))
    return float(np.min(np.abs(w)))


@dataclass(frozen=True)
class PlotnikovMaps:
    """Change of variables w = u + F(u) and the induced flux for w.

    ``total`` maps u to u + F(u); when min F' > -1 it is strictly increasing,
    ``total_inverse`` is well defined and ``flux(w) = F(total_inverse(w))``
    has the same one-max/one-min profile as F.  ``valid`` records whether the
    premise holds; the inverse-based evaluators refuse to run when it fails.
    """

    total: Callable
    total_inverse: Callable
    flux: Callable
    flux_slope: Callable
    valid: bool
    min_fprime: float
    w_max: float
    # Optional direct evaluators; when present they let steppers warm-start
    # the inversion of ``total`` instead of bisecting from scratch.
    total_prime: Optional[Callable] = None
    rate: Optional[Callable] = None


def plotnikov_maps(rf: ReactionFunction, n_scan: int = 8193) -> PlotnikovMaps:
    """Build the w = u + F(u) maps, checking min F' > -1 on [0, u_max].

    The minimum of F' is located by a dense scan plus a bounded local
    refinement around the best sample.
    """
    us = np.linspace(0.0, rf.u_max, n_scan)
    dv = rf.fprime(us)
    k = int(np.argmin(dv))
    a = us[max(0, k - 1)]
    b = us[min(n_scan - 1, k + 1)]
    if b > a:
        res = minimize_scalar(lambda x: float(rf.fprime(np.asarray(x))),
                              bounds=(a, b), method="bounded",
                              options={"xatol": 1e-12})
        min_fprime = min(float(dv[k]), float(res.fun))
    else:
        min_fprime = float(dv[k])
    valid = min_fprime > -1.0
    w_max = float(rf.u_max + rf.f(np.asarray(rf.u_max)))

    def total(u):
        u = np.asarray(u, dtype=float)
        return u + rf.f(u)

    def total_prime(u):
        return 1.0 + rf.fprime(np.asarray(u, dtype=float))

    def _require_valid():
        if not valid:
            raise ValidityError(
                f"min F' = {min_fprime:.6g} <= -1: u + F(u) is not invertible")

    def total_inverse(w):
        _require_valid()
        w = np.asarray(w, dtype=float)
        # Constant extension outside [0, w_max] keeps the evaluator total.
        wc = np.clip(w, 0.0, w_max)
        u = _solve_monotone(total, 0.0, rf.u_max, wc, True, total_prime)
        return u if w.ndim else float(u)

    def flux(w):
        _require_valid()
        u = np.asarray(total_inverse(w), dtype=float)
        out = rf.f(u)
        return out if np.ndim(w) else float(out)

    def flux_slope(w):
        _require_valid()
        u = np.asarray(total_inverse(w), dtype=float)
        d = rf.fprime(u)
        out = d / (1.0 + d)
        return out if np.ndim(w) else float(out)

    return PlotnikovMaps(total, total_inverse, flux, flux_slope, valid,
                         min_fprime, w_max, total_prime=total_prime, rate=rf.f)
