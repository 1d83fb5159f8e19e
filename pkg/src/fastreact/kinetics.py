"""Oscillation structure extracted from trajectories.

The value distribution of each field is summarized per space-time cell by its
empirical tail profile: the cell average of the indicator 1_{0 < xi <= field}.
Tail profiles are non-increasing in xi, live in [0, 1], and integrate back to
the cell mean of the field.  In the sharp-relaxation limit the u-profile
approaches a three-step staircase whose plateau heights encode the branch
weights of the limiting Young measure, and the v-profile approaches a 0/1
indicator; the functions below measure how far a finite run is from that
structure:

* ``young_weights`` assigns each u sample to the nearest branch root of
  F(.) = cell mean of v and returns the occupation fractions,
* ``pushforward_residual`` checks the alternating-sum relation that the
  v-profile is the pushforward of the u-profile through the rate law,
* ``identity_terms`` / ``kinetic_identity_residual`` evaluate the two-point
  functional identity tying the profiles together, which holds exactly for
  the limiting staircase objects,
* ``defect_measure`` spreads the scaled reaction defect (v - F(u))^2 / eps
  along the rate segment between F(u) and v, building the histogram whose
  total is the squared scaled defect norm,
* ``plotnikov_*`` gaps compare the same structures after the change of
  variables w = u + F(u).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import BranchInverses, PlotnikovMaps, ReactionFunction
from .solver import Trajectory, trapezoid_weights

_BRANCH_SIGN = (1.0, -1.0, 1.0)


class PartitionError(ValueError):
    """A space-time cell is undersampled or not covered by snapshots."""


@dataclass(frozen=True)
class XiGrid:
    """Uniform bins on the value axis [0, xi_max]."""

    xi_max: float
    n_bins: int

    def __post_init__(self):
        if self.n_bins < 32:
            raise ValueError(f"need at least 32 bins, got {self.n_bins}")
        if not self.xi_max > 0.0:
            raise ValueError(f"xi_max must be positive, got {self.xi_max}")

    @property
    def width(self) -> float:
        return self.xi_max / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.xi_max, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) * self.width


@dataclass(frozen=True)
class CellPartition:
    """Lattice of time x space averaging cells over a trajectory."""

    t_edges: np.ndarray          # (n_time_cells + 1,)
    x_bounds: np.ndarray         # (n_space_cells + 1,) grid-index boundaries
    min_samples: int = 16

    @classmethod
    def for_trajectory(cls, traj: Trajectory, cells_t: int, cells_x: int,
                       min_samples: int = 16) -> "CellPartition":
        times = traj.times
        n_x = traj.grid.n_cells
        if cells_t < 1 or cells_x < 1:
            raise PartitionError("cell counts must be positive")
        if cells_x > n_x:
            raise PartitionError(f"{cells_x} space cells for {n_x} grid cells")
        t_edges = np.linspace(times[0], times[-1], cells_t + 1)
        x_bounds = np.rint(np.linspace(0, n_x, cells_x + 1)).astype(int)
        return cls(t_edges, x_bounds, min_samples)

    @property
    def n_time_cells(self) -> int:
        return len(self.t_edges) - 1

    @property
    def n_space_cells(self) -> int:
        return len(self.x_bounds) - 1

    @property
    def dt_cell(self) -> float:
        return float(self.t_edges[1] - self.t_edges[0])

    def time_cell_rows(self, times: np.ndarray) -> list:
        """Snapshot-row indices for each time cell (last edge inclusive)."""
        idx = np.searchsorted(self.t_edges, times, side="right") - 1
        idx = np.clip(idx, 0, self.n_time_cells - 1)
        rows = [np.nonzero(idx == k)[0] for k in range(self.n_time_cells)]
        for k, r in enumerate(rows):
            if r.size == 0:
                raise PartitionError(f"time cell {k} contains no snapshots")
        return rows

    def space_slice(self, j: int) -> slice:
        return slice(int(self.x_bounds[j]), int(self.x_bounds[j + 1]))


def _cell_blocks(traj: Trajectory, part: CellPartition, name: str) -> list:
    """Per-cell flattened sample arrays, row-major over (time cell, space cell)."""
    stacked = traj.stacked(name)
    rows = part.time_cell_rows(traj.times)
    out = []
    for r in rows:
        block = stacked[r]
        for j in range(part.n_space_cells):
            samples = block[:, part.space_slice(j)].ravel()
            if samples.size < part.min_samples:
                raise PartitionError(
                    f"cell has {samples.size} samples, need {part.min_samples}")
            out.append(samples)
    return out


# -- profiles -----------------------------------------------------------------

class TabulatedProfile:
    """Non-increasing profile sampled on bin centers, linearly interpolated."""

    def __init__(self, xi: np.ndarray, vals: np.ndarray):
        self.xi = np.asarray(xi, dtype=float)
        self.vals = np.asarray(vals, dtype=float)

    def __call__(self, x):
        return np.interp(x, self.xi, self.vals,
                         left=self.vals[0], right=self.vals[-1])

    def integral(self) -> float:
        """Midpoint integral over [0, xi_max]; equals the cell field mean."""
        return float(np.sum(self.vals) * (self.xi[1] - self.xi[0]))


class StepProfile:
    """Exact right-continuous-from-the-left step profile.

    Value is ``levels[k]`` on the interval (jumps[k-1], jumps[k]] and
    ``levels[-1]`` above the last jump; 0 at and below the origin.  This is
    the closed form of indicator averages of point masses, so sample atoms
    sitting exactly on a jump belong to the level on the left.
    """

    def __init__(self, jumps: Sequence[float], levels: Sequence[float]):
        self.jumps = np.asarray(jumps, dtype=float)
        self.levels = np.asarray(levels, dtype=float)
        if len(self.levels) != len(self.jumps) + 1:
            raise ValueError("need one more level than jumps")
        if np.any(np.diff(self.jumps) < 0):
            raise ValueError("jumps must be sorted")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.jumps, x, side="left")
        out = self.levels[idx]
        out = np.where(x <= 0.0, 0.0, out)
        return out if x.ndim else float(out)


def indicator_profile(alpha: float) -> StepProfile:
    """Tail profile of a point mass at alpha: 1 up to alpha, 0 above."""
    return StepProfile([alpha], [1.0, 0.0])


def staircase_profile(bi: BranchInverses, v_center: float,
                      plateau_hi: float, plateau_lo: float) -> StepProfile:
    """Exact-limit u-profile: jumps at the three branch roots of F(.) = v_center.

    Heights drop 1 -> plateau_hi -> plateau_lo -> 0; the branch weights are
    (1 - plateau_hi, plateau_hi - plateau_lo, plateau_lo).
    """
    if not 0.0 <= plateau_lo <= plateau_hi <= 1.0:
        raise ValueError("plateau heights must satisfy 0 <= lo <= hi <= 1")
    roots = [bi.value(i, v_center) for i in (1, 2, 3)]
    return StepProfile(roots, [1.0, plateau_hi, plateau_lo, 0.0])


# -- empirical profiles ---------------------------------------------------------

@dataclass
class EmpiricalKinetic:
    """Cell-averaged tail profiles of u and v on a value grid."""

    xg: XiGrid
    part: CellPartition
    u_tail: np.ndarray          # (ct, cx, n_bins)
    v_tail: np.ndarray

    def profile_u(self, it: int, ix: int) -> TabulatedProfile:
        return TabulatedProfile(self.xg.centers, self.u_tail[it, ix])

    def profile_v(self, it: int, ix: int) -> TabulatedProfile:
        return TabulatedProfile(self.xg.centers, self.v_tail[it, ix])

    @property
    def n_cells(self) -> tuple:
        return self.u_tail.shape[:2]


def _tail_fractions(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    s = np.sort(samples)
    return 1.0 - np.searchsorted(s, centers, side="left") / s.size


def empirical_kinetic(traj: Trajectory, part: CellPartition, xg: XiGrid) -> EmpiricalKinetic:
    """Average the value indicators 1_{0 < xi <= field} over each cell.

    Monotonicity in xi and the [0, 1] range hold by construction; the
    midpoint integral of each profile reproduces the cell mean of the field
    to half a bin width.
    """
    ct, cx = part.n_time_cells, part.n_space_cells
    centers = xg.centers
    u_tail = np.empty((ct, cx, xg.n_bins))
    v_tail = np.empty((ct, cx, xg.n_bins))
    u_cells = _cell_blocks(traj, part, "u")
    v_cells = _cell_blocks(traj, part, "v")
    for k, (uc, vc) in enumerate(zip(u_cells, v_cells)):
        it, ix = divmod(k, cx)
        u_tail[it, ix] = _tail_fractions(uc, centers)
        v_tail[it, ix] = _tail_fractions(vc, centers)
    return EmpiricalKinetic(xg, part, u_tail, v_tail)


# -- Young-measure weights ------------------------------------------------------

@dataclass
class WeightField:
    """Branch occupation fractions per cell.

    ``frac[..., i]`` is the share of u samples nearest to branch i+1 of
    F(.) = vbar; the fractions are nonnegative and sum to 1.0 exactly by
    construction.  ``rho`` is the mean distance of samples to their assigned
    root (the classification residual); cells whose vbar sits within
    ``fold_guard`` of a fold rate are flagged low-confidence.
    """

    frac: np.ndarray             # (ct, cx, 3)
    vbar: np.ndarray             # (ct, cx)
    rho: np.ndarray              # (ct, cx)
    low_confidence: np.ndarray   # (ct, cx) bool
    fold_guard: float

    @property
    def plateau(self) -> np.ndarray:
        """Plateau heights (1 - frac1, frac3) of the implied staircase."""
        return np.stack([1.0 - self.frac[..., 0], self.frac[..., 2]], axis=-1)


def young_weights(traj: Trajectory, part: CellPartition, bi: BranchInverses,
                  fold_guard: Optional[float] = None) -> WeightField:
    """Nearest-root branch assignment of u samples against the cell mean of v.

    Outside the fold window only the single true root is available, so the
    whole cell is assigned to it.
    """
    st = bi.structure
    guard = fold_guard if fold_guard is not None else 1e-3 * st.fold_width
    ct, cx = part.n_time_cells, part.n_space_cells
    frac = np.zeros((ct, cx, 3))
    vbar = np.zeros((ct, cx))
    rho = np.zeros((ct, cx))
    lowc = np.zeros((ct, cx), dtype=bool)

    u_cells = _cell_blocks(traj, part, "u")
    v_cells = _cell_blocks(traj, part, "v")
    for k, (uc, vc) in enumerate(zip(u_cells, v_cells)):
        it, ix = divmod(k, cx)
        vb = float(np.mean(vc))
        vbar[it, ix] = vb
        lowc[it, ix] = min(abs(vb - st.f_valley), abs(vb - st.f_peak)) < guard
        if vb <= st.f_valley:
            branches = (1,)
        elif vb >= st.f_peak:
            branches = (3,)
        else:
            branches = (1, 2, 3)
        roots = np.array([bi.value(i, vb) for i in branches])
        dist = np.abs(uc[:, None] - roots[None, :])
        pick = np.argmin(dist, axis=1)
        n = uc.size
        counts = np.bincount(pick, minlength=len(branches))
        lam = np.zeros(3)
        for slot, b in enumerate(branches):
            lam[b - 1] = counts[slot] / n
        # Close the simplex exactly in floating point: zero the last occupied
        # slot, then define it as 1 minus the float sum of the others.
        last = max(b - 1 for slot, b in enumerate(branches) if counts[slot])
        lam[last] = 0.0
        lam[last] = 1.0 - float(np.sum(lam))
        frac[it, ix] = lam
        rho[it, ix] = float(np.mean(dist[np.arange(n), pick]))
    return WeightField(frac, vbar, rho, lowc, guard)


# -- structural identities -------------------------------------------------------

def _branch_eval(bi: BranchInverses, pts: np.ndarray):
    """Roots and slopes of all three branches at pts, shapes (3, n)."""
    pts = np.asarray(pts, dtype=float)
    roots = np.empty((3,) + pts.shape)
    slopes = np.empty_like(roots)
    for i in (1, 2, 3):
        u, s, _ = bi.value_slope(i, pts)
        roots[i - 1], slopes[i - 1] = u, s
    return roots, slopes


def _range_masks(bi: BranchInverses, xi: np.ndarray):
    st = bi.structure
    return ((xi < st.f_peak),
            (xi > st.f_valley) & (xi < st.f_peak),
            (xi > st.f_valley))


def pushforward_gap(p_prof, q_prof, bi: BranchInverses, xi) -> np.ndarray:
    """q(xi) minus the alternating branch sum of p; zero for exact-limit pairs."""
    xi = np.asarray(xi, dtype=float)
    roots, _ = _branch_eval(bi, xi)
    masks = _range_masks(bi, xi)
    acc = np.zeros_like(xi)
    for i in range(3):
        acc += _BRANCH_SIGN[i] * np.asarray(p_prof(roots[i])) * masks[i]
    return np.asarray(q_prof(xi)) - acc


def retained_bins(xg: XiGrid, bi: BranchInverses, upper: float, guard: float) -> np.ndarray:
    """Mask of bin centers kept for identity evaluation: away from the folds,
    the origin and the support bound."""
    c = xg.centers
    st = bi.structure
    keep = (c > guard) & (c < upper - guard)
    keep &= np.abs(c - st.f_valley) > guard
    keep &= np.abs(c - st.f_peak) > guard
    return keep


def pushforward_residual(ek: EmpiricalKinetic, bi: BranchInverses, upper: float,
                         guard: float) -> np.ndarray:
    """Per-cell sup of |pushforward gap| over retained bins."""
    keep = retained_bins(ek.xg, bi, upper, guard)
    xi = ek.xg.centers[keep]
    ct, cx = ek.n_cells
    out = np.zeros((ct, cx))
    roots, _ = _branch_eval(bi, xi)
    masks = _range_masks(bi, xi)
    for it in range(ct):
        for ix in range(cx):
            p = ek.profile_u(it, ix)
            q = ek.profile_v(it, ix)
            acc = np.zeros_like(xi)
            for i in range(3):
                acc += _BRANCH_SIGN[i] * p(roots[i]) * masks[i]
            out[it, ix] = np.max(np.abs(q(xi) - acc)) if xi.size else 0.0
    return out


class _PairGeometry:
    """Branch roots/slopes at a fixed pair set, shared across all cells."""

    def __init__(self, bi: BranchInverses, eta, xi):
        self.eta = np.asarray(eta, dtype=float)
        self.xi = np.asarray(xi, dtype=float)
        self.roots_e, self.slopes_e = _branch_eval(bi, self.eta)
        self.roots_x, _ = _branch_eval(bi, self.xi)
        self.masks_x = _range_masks(bi, self.xi)
        # inner[i] = sum_j 1_{0 < root_e[j] <= root_x[i]} |slope_e[j]|
        self.inner = np.zeros_like(self.roots_x)
        for i in range(3):
            for j in range(3):
                self.inner[i] += (((self.roots_e[j] > 0.0)
                                   & (self.roots_e[j] <= self.roots_x[i]))
                                  * np.abs(self.slopes_e[j]))
        self.xi_le_eta = (self.xi > 0.0) & (self.xi <= self.eta)
        self.eta_le_xi = (self.eta > 0.0) & (self.eta <= self.xi)

    def terms(self, p_prof):
        slope_sum = np.zeros_like(self.eta)
        for j in range(3):
            slope_sum += np.asarray(p_prof(self.roots_e[j])) * np.abs(self.slopes_e[j])
        cross = np.zeros_like(self.xi)
        for i in range(3):
            cross += (_BRANCH_SIGN[i] * np.asarray(p_prof(self.roots_x[i]))
                      * self.masks_x[i] * self.inner[i])
        return slope_sum, cross

    def residual(self, p_prof, q_prof) -> np.ndarray:
        slope_sum, cross = self.terms(p_prof)
        q_xi = np.asarray(q_prof(self.xi))
        q_eta = np.asarray(q_prof(self.eta))
        res = ((q_xi - self.xi_le_eta) * slope_sum
               - self.eta_le_xi * q_xi - self.xi_le_eta * q_eta
               + q_eta * q_xi - cross)
        return np.abs(res)


def identity_terms(p_prof, bi: BranchInverses, eta, xi):
    """The two branch sums of the two-point identity at (eta, xi).

    Returns (slope_sum, cross): slope_sum depends on eta only and weighs the
    p values at the branch roots by the absolute branch slopes; cross couples
    the roots at xi with the roots at eta through the one-sided indicator.
    """
    return _PairGeometry(bi, eta, xi).terms(p_prof)


def kinetic_identity_residual(p_prof, q_prof, bi: BranchInverses, eta, xi) -> np.ndarray:
    """Absolute residual of the two-point identity; zero on exact-limit pairs."""
    return _PairGeometry(bi, eta, xi).residual(p_prof, q_prof)


def sample_identity_pairs(rng: np.random.Generator, n_pairs: int,
                          bi: BranchInverses, upper: float, guard: float):
    """Uniform (eta, xi) pairs over [guard, upper - guard] minus fold guards."""
    st = bi.structure

    def draw(n):
        out = np.empty(0)
        while out.size < n:
            cand = rng.uniform(guard, upper - guard, size=2 * n)
            ok = (np.abs(cand - st.f_valley) > guard) & (np.abs(cand - st.f_peak) > guard)
            out = np.concatenate([out, cand[ok]])
        return out[:n]

    return draw(n_pairs), draw(n_pairs)


@dataclass
class IdentityStats:
    sup: float
    mean: float
    per_cell_mean: np.ndarray    # (ct, cx)


def kinetic_identity_stats(ek: EmpiricalKinetic, bi: BranchInverses,
                           eta: np.ndarray, xi: np.ndarray) -> IdentityStats:
    """Residual statistics of the two-point identity over cells and pairs."""
    ct, cx = ek.n_cells
    geom = _PairGeometry(bi, eta, xi)
    per_cell = np.zeros((ct, cx))
    sup = 0.0
    for it in range(ct):
        for ix in range(cx):
            r = geom.residual(ek.profile_u(it, ix), ek.profile_v(it, ix))
            per_cell[it, ix] = float(np.mean(r))
            sup = max(sup, float(np.max(r)))
    return IdentityStats(sup, float(np.mean(per_cell)), per_cell)


# -- defect measure ---------------------------------------------------------------

@dataclass
class DefectHistogram:
    """Rate-axis histograms of the scaled reaction defect and of |grad v|^2.

    ``reaction_mass`` spreads (v - F(u))^2/eps uniformly along the rate
    segment [F(u), v] of each sample; its total (including the out-of-grid
    overflow) equals the squared scaled defect norm by bookkeeping.
    ``gradient_mass`` deposits |grad v|^2 at the rate v.
    """

    xg: XiGrid
    part: CellPartition
    epsilon: float
    reaction_mass: np.ndarray    # (ct, cx, n_bins)
    gradient_mass: np.ndarray
    reaction_overflow: float
    gradient_overflow: float

    @property
    def reaction_total(self) -> float:
        return float(np.sum(self.reaction_mass)) + self.reaction_overflow

    @property
    def gradient_total(self) -> float:
        return float(np.sum(self.gradient_mass)) + self.gradient_overflow


def spread_segment_mass(xg: XiGrid, lo: float, hi: float, mass: float) -> np.ndarray:
    """Distribute mass uniformly over the bins overlapping [lo, hi].

    A degenerate segment collapses to a point deposit in its containing bin.
    Mass falling outside [0, xi_max] is NOT returned in the array; callers
    track it as overflow.
    """
    out = np.zeros(xg.n_bins)
    edges = xg.edges
    if hi - lo < 1e-300:
        k = int(np.clip(np.searchsorted(edges, lo, side="right") - 1, 0, xg.n_bins - 1))
        if 0.0 <= lo <= xg.xi_max:
            out[k] = mass
        return out
    overlap = np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1])
    np.clip(overlap, 0.0, None, out=overlap)
    out += mass * overlap / (hi - lo)
    return out


def _deposit_rows(edges: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                  mass: np.ndarray):
    """Vectorized segment deposit for one snapshot row; returns (bins, overflow)."""
    n_bins = edges.size - 1
    length = hi - lo
    degenerate = length < 1e-300
    out = np.zeros(n_bins)
    overflow = 0.0

    if np.any(~degenerate):
        l_ = lo[~degenerate][:, None]
        h_ = hi[~degenerate][:, None]
        m_ = mass[~degenerate][:, None]
        overlap = np.clip(np.minimum(h_, edges[None, 1:]) - np.maximum(l_, edges[None, :-1]),
                          0.0, None)
        contrib = m_ * overlap / (h_ - l_)
        out += contrib.sum(axis=0)
        overflow += float(np.sum(mass[~degenerate]) - np.sum(contrib))
    if np.any(degenerate):
        pos = lo[degenerate]
        m = mass[degenerate]
        inside = (pos >= 0.0) & (pos <= edges[-1])
        k = np.clip(np.searchsorted(edges, pos[inside], side="right") - 1, 0, n_bins - 1)
        np.add.at(out, k, m[inside])
        overflow += float(np.sum(m[~inside]))
    return out, overflow


def defect_measure(traj: Trajectory, rf: ReactionFunction, part: CellPartition,
                   xg: XiGrid, epsilon: float) -> DefectHistogram:
    """Build the defect histograms from a trajectory.

    Quadrature weights are trapezoid in time and the cell width in space, the
    same discretization used for the reported defect norms, so the reaction
    total reproduces the squared scaled defect norm exactly up to roundoff.
    """
    times = traj.times
    wt = trapezoid_weights(times)
    h = traj.grid.h
    rows = part.time_cell_rows(times)
    ct, cx = part.n_time_cells, part.n_space_cells

    reaction = np.zeros((ct, cx, xg.n_bins))
    gradient = np.zeros((ct, cx, xg.n_bins))
    over_r = 0.0
    over_g = 0.0
    edges = xg.edges

    for it, row_idx in enumerate(rows):
        for r in row_idx:
            s = traj.states[r]
            fu = rf.f(s.u)
            defect2 = (s.v - fu) ** 2 / epsilon
            grad = np.empty_like(s.v)
            grad[1:-1] = (s.v[2:] - s.v[:-2]) / (2.0 * h)
            grad[0] = (s.v[1] - s.v[0]) / (2.0 * h)
            grad[-1] = (s.v[-2] - s.v[-1]) / (2.0 * h)
            weight = wt[r] * h
            for ix in range(cx):
                sl = part.space_slice(ix)
                lo = np.minimum(fu[sl], s.v[sl])
                hi = np.maximum(fu[sl], s.v[sl])
                binned, ov = _deposit_rows(edges, lo, hi, defect2[sl] * weight)
                reaction[it, ix] += binned
                over_r += ov
                binned_g, ov_g = _deposit_rows(edges, s.v[sl], s.v[sl],
                                               (grad[sl] ** 2) * weight)
                gradient[it, ix] += binned_g
                over_g += ov_g
    return DefectHistogram(xg, part, epsilon, reaction, gradient, over_r, over_g)


# -- concentration metrics ---------------------------------------------------------

@dataclass
class ConcentrationMetrics:
    """How concentrated the v values are and how the branch weights move."""

    binarization_fraction: float          # share of (cell, bin) entries with
                                          # v_tail strictly between the levels
    var_u: np.ndarray                     # (ct, cx) within-cell variances
    var_v: np.ndarray
    branch_multiplicity: np.ndarray       # (ct, cx) count of occupied branches
    frac_dt: np.ndarray                   # (3, ct-1, cx) discrete d(frac)/dt
    n_multibranch_concentrated: int       # cells with >= 2 branches and
                                          # var_v at most var_u / 10
    max_abs_frac_dt: float


def concentration_metrics(ek: EmpiricalKinetic, traj: Trajectory, part: CellPartition,
                          wf: WeightField, level_lo: float = 0.1, level_hi: float = 0.9,
                          occupancy: float = 0.05) -> ConcentrationMetrics:
    v_tail = ek.v_tail
    binar = float(np.mean((v_tail > level_lo) & (v_tail < level_hi)))

    ct, cx = part.n_time_cells, part.n_space_cells
    var_u = np.zeros((ct, cx))
    var_v = np.zeros((ct, cx))
    u_cells = _cell_blocks(traj, part, "u")
    v_cells = _cell_blocks(traj, part, "v")
    for k, (uc, vc) in enumerate(zip(u_cells, v_cells)):
        it, ix = divmod(k, cx)
        var_u[it, ix] = float(np.var(uc))
        var_v[it, ix] = float(np.var(vc))

    multiplicity = np.sum(wf.frac >= occupancy, axis=-1)
    multi = (multiplicity >= 2) & (var_v * 10.0 <= var_u)
    if ct > 1:
        frac_dt = np.transpose(np.diff(wf.frac, axis=0), (2, 0, 1)) / part.dt_cell
    else:
        frac_dt = np.zeros((3, 0, cx))
    max_dt = float(np.max(np.abs(frac_dt))) if frac_dt.size else 0.0
    return ConcentrationMetrics(binar, var_u, var_v, multiplicity, frac_dt,
                                int(np.count_nonzero(multi)), max_dt)


# -- change-of-variables gaps --------------------------------------------------------

def plotnikov_pushforward_gap(k_prof, q_prof, bi: BranchInverses,
                              maps: PlotnikovMaps, xi) -> np.ndarray:
    """Alternating branch sum of the w-profile minus q; zero in the limit."""
    xi = np.asarray(xi, dtype=float)
    roots, _ = _branch_eval(bi, xi)
    masks = _range_masks(bi, xi)
    acc = np.zeros_like(xi)
    for i in range(3):
        acc += _BRANCH_SIGN[i] * np.asarray(k_prof(maps.total(roots[i]))) * masks[i]
    return acc - np.asarray(q_prof(xi))


def plotnikov_flux_identity_gap(k_prof, p_prof, q_prof, bi: BranchInverses,
                                maps: PlotnikovMaps, xi) -> np.ndarray:
    """Both sides of the transported adjoint-sum identity.

    Left: the w-profile at the transported roots weighted by |shifted branch
    slopes|.  Right: the alternating slope sum of p plus q.  Their gap
    vanishes for exact-limit triples.
    """
    xi = np.asarray(xi, dtype=float)
    roots, slopes = _branch_eval(bi, xi)
    masks = _range_masks(bi, xi)
    lhs = np.zeros_like(xi)
    rhs = np.zeros_like(xi)
    for i in range(3):
        shifted = slopes[i] + masks[i]          # transported branch slope
        lhs += np.asarray(k_prof(maps.total(roots[i]))) * np.abs(shifted)
        rhs += _BRANCH_SIGN[i] * np.asarray(p_prof(roots[i])) * slopes[i]
    rhs += np.asarray(q_prof(xi))
    return lhs - rhs


def composition_gap(k_prof, p_prof, maps: PlotnikovMaps, w_pts) -> np.ndarray:
    """w-profile minus u-profile composed with the inverse total map."""
    w_pts = np.asarray(w_pts, dtype=float)
    return np.asarray(k_prof(w_pts)) - np.asarray(p_prof(maps.total_inverse(w_pts)))
