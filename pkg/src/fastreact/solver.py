"""Time integration on a 1-D no-flux grid.

Two steppers share the grid machinery:

* ``SystemStepper`` advances the stiff pair (u, v) by Strang splitting: a
  half step of the pointwise reaction exchange (backward Euler, damped
  Newton per cell, conserving u + v cell-wise by construction), a full
  implicit diffusion step on v (theta scheme, symmetric tridiagonal solve),
  and a second reaction half step.  The reaction solve is A-stable, so dt is
  set by accuracy, not by the stiffness 1/eps.

* ``PlotnikovStepper`` advances the scalar w variable of the pseudo-parabolic
  regularization (Id - eps*Lap) dw/dt = Lap flux(w), treating the flux
  explicitly and inverting the regularizing operator exactly each step.

The diffusion operator uses a mirrored ghost-cell stencil, so constants are
annihilated exactly and both steppers conserve their discrete integrals to
solver roundoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .model import PlotnikovMaps, ReactionFunction, ValidityError

#: Entries below this are clamped (and counted), never silently zeroed.
TOL_NEG = 1e-12


class SolverError(RuntimeError):
    pass


class InitError(ValueError):
    """Initial profile violates nonnegativity or is malformed."""


class StepFailure(SolverError):
    """A single step could not be completed; carries the offending cell."""

    def __init__(self, message: str, cell_index: int, t: float):
        super().__init__(message)
        self.cell_index = cell_index
        self.t = t


class IntegrationFailure(SolverError):
    """dt underflowed; the partial trajectory is attached."""

    def __init__(self, message: str, trajectory: "Trajectory"):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on (0, length) with mirrored ghost cells."""

    n_cells: int
    length: float = 1.0

    def __post_init__(self):
        if self.n_cells < 8:
            raise ValueError(f"need at least 8 cells, got {self.n_cells}")
        if not (self.length > 0.0 and math.isfinite(self.length)):
            raise ValueError(f"length must be positive, got {self.length}")

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.h


@dataclass
class FieldState:
    """Per-cell profiles at one time: (u, v) for the system, w for Plotnikov."""

    t: float
    grid: Grid1D
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    tol_neg: float = TOL_NEG

    def __post_init__(self):
        for name in ("u", "v", "w"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (self.grid.n_cells,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({self.grid.n_cells},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries at t={self.t}")
            if np.min(arr) < -2.0 * self.tol_neg:
                raise ValueError(f"{name} dips below -{self.tol_neg:g} at t={self.t}")
            setattr(self, name, arr)
        if self.w is None and (self.u is None or self.v is None):
            raise ValueError("state needs either (u, v) or w")

    def copy(self) -> "FieldState":
        return FieldState(self.t, self.grid,
                          None if self.u is None else self.u.copy(),
                          None if self.v is None else self.v.copy(),
                          None if self.w is None else self.w.copy(),
                          self.tol_neg)


@dataclass(frozen=True)
class SolverConfig:
    """Stepper knobs; dt defaults are decided by the caller (see harness)."""

    epsilon: float
    dt: float
    t_end: float
    newton_tol: float = 1e-11
    newton_max_iter: int = 50
    snapshot_stride: int = 1
    theta: float = 1.0
    dt_min: Optional[float] = None

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (0.5 <= self.theta <= 1.0):
            raise ValueError(f"theta must lie in [0.5, 1], got {self.theta}")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot stride must be >= 1")


def default_dt(grid: Grid1D, epsilon: float) -> float:
    """Accuracy-motivated default step: min(0.25 h^2, 10 eps)."""
    return min(0.25 * grid.h ** 2, 10.0 * epsilon)


def neumann_laplacian(arr: np.ndarray, h: float) -> np.ndarray:
    """Second-order centered Laplacian with mirrored ghost cells."""
    lap = np.empty_like(arr)
    inv_h2 = 1.0 / (h * h)
    lap[1:-1] = (arr[:-2] - 2.0 * arr[1:-1] + arr[2:]) * inv_h2
    lap[0] = (arr[1] - arr[0]) * inv_h2
    lap[-1] = (arr[-2] - arr[-1]) * inv_h2
    return lap


def _factor_identity_minus(coef: float, n: int, h: float):
    """Cholesky factor of the SPD tridiagonal (I - coef * Lap) in banded form."""
    a = coef / (h * h)
    ab = np.zeros((2, n))
    ab[0, 1:] = -a
    ab[1, :] = 1.0 + 2.0 * a
    ab[1, 0] = 1.0 + a
    ab[1, -1] = 1.0 + a
    return cholesky_banded(ab, lower=False)


def _clamp_undershoots(arr: np.ndarray, stats: dict) -> None:
    bad = arr < -TOL_NEG
    n = int(np.count_nonzero(bad))
    if n:
        stats["undershoot_clamps"] = stats.get("undershoot_clamps", 0) + n
        np.clip(arr, -TOL_NEG, None, out=arr)


class SystemStepper:
    """One Strang-split step of the stiff (u, v) system."""

    def __init__(self, grid: Grid1D, rf: ReactionFunction, cfg: SolverConfig):
        self.grid = grid
        self.rf = rf
        self.cfg = cfg
        self.dt = cfg.dt
        self._chol = _factor_identity_minus(cfg.dt * cfg.theta, grid.n_cells, grid.h)
        self.stats: dict = {"undershoot_clamps": 0, "newton_iterations": 0}

    def rescaled(self, dt: float) -> "SystemStepper":
        new = SystemStepper(self.grid, self.rf, replace(self.cfg, dt=dt))
        new.stats = self.stats
        return new

    # -- reaction half step -------------------------------------------------

    def _reaction(self, u: np.ndarray, v: np.ndarray, half_dt: float, t: float):
        """Backward Euler on du/dt = (v - F(u))/eps, dv/dt = -du/dt per cell.

        The per-cell sum s = u + v is held fixed exactly; only the root of
        g(U) = U - u - (half_dt/eps) (s - U - F(U)) is solved, by damped
        Newton safeguarded with a sign-change bracket.
        """
        cfg = self.cfg
        r = half_dt / cfg.epsilon
        s = u + v
        f = self.rf.f
        fp = self.rf.fprime

        def g(x):
            return x - u - r * (s - x - f(x))

        blo = np.minimum(0.0, np.minimum(u, s))
        bhi = np.maximum(0.0, np.maximum(u, s))
        x = u.copy()
        gx = g(x)
        tol = cfg.newton_tol * np.maximum(1.0, np.abs(s))

        for it in range(cfg.newton_max_iter):
            live = np.abs(gx) > tol
            if not np.any(live):
                self.stats["newton_iterations"] += it
                break
            d = 1.0 + r * (1.0 + fp(x))
            d = np.where(np.abs(d) < 1e-14, 1e-14, d)
            prop = np.clip(x - gx / d, blo, bhi)
            gp = g(prop)
            # Step halving toward the current iterate, at most 8 times.
            for _ in range(8):
                worse = live & (np.abs(gp) > np.abs(gx)) & (np.abs(gp) > tol)
                if not np.any(worse):
                    break
                prop = np.where(worse, 0.5 * (prop + x), prop)
                gp = np.where(worse, g(prop), gp)
            still = live & (np.abs(gp) > np.abs(gx)) & (np.abs(gp) > tol)
            if np.any(still):
                # Bisection fallback keeps the sign-change interval shrinking.
                mid = 0.5 * (blo + bhi)
                prop = np.where(still, mid, prop)
                gp = np.where(still, g(prop), gp)
            pos = gp > 0.0
            bhi = np.where(live & pos, prop, bhi)
            blo = np.where(live & ~pos, prop, blo)
            x = np.where(live, prop, x)
            gx = np.where(live, gp, gx)
        else:
            bad = np.abs(gx) > tol
            if np.any(bad):
                cell = int(np.argmax(bad))
                raise StepFailure(
                    f"reaction Newton stalled in cell {cell} "
                    f"(|g| = {float(np.abs(gx[cell])):.3e}) at t = {t:.6g}",
                    cell, t)
            self.stats["newton_iterations"] += cfg.newton_max_iter

        return x, s - x

    # -- full step ------------------------------------------------------------

    def __call__(self, state: FieldState) -> FieldState:
        cfg = self.cfg
        dt = cfg.dt
        u, v = state.u, state.v

        u, v = self._reaction(u, v, 0.5 * dt, state.t)

        if cfg.theta < 1.0:
            rhs = v + dt * (1.0 - cfg.theta) * neumann_laplacian(v, self.grid.h)
        else:
            rhs = v
        v = cho_solve_banded((self._chol, False), rhs)

        u, v = self._reaction(u, v, 0.5 * dt, state.t + 0.5 * dt)

        _clamp_undershoots(u, self.stats)
        _clamp_undershoots(v, self.stats)
        return FieldState(state.t + dt, self.grid, u, v, tol_neg=state.tol_neg)


class PlotnikovStepper:
    """Semi-implicit step of (Id - eps*Lap)(w_new - w) = dt * Lap flux(w)."""

    def __init__(self, grid: Grid1D, maps: PlotnikovMaps, cfg: SolverConfig):
        if not maps.valid:
            raise ValidityError("pseudo-parabolic stepper needs an invertible u + F(u)")
        self.grid = grid
        self.maps = maps
        self.cfg = cfg
        self.dt = cfg.dt
        self._chol = _factor_identity_minus(cfg.epsilon, grid.n_cells, grid.h)
        self._u_cache: Optional[np.ndarray] = None
        self.stats: dict = {"undershoot_clamps": 0}

    def rescaled(self, dt: float) -> "PlotnikovStepper":
        new = PlotnikovStepper(self.grid, self.maps, replace(self.cfg, dt=dt))
        new.stats = self.stats
        return new

    def _flux(self, w: np.ndarray) -> np.ndarray:
        maps = self.maps
        if maps.total_prime is None or maps.rate is None:
            return np.asarray(maps.flux(w), dtype=float)
        # Invert total(u) = w by Newton warm-started from the previous step;
        # w moves little per step, so a cold bisection is only needed once.
        wc = np.clip(w, 0.0, maps.w_max)
        u = self._u_cache
        if u is None or u.shape != w.shape:
            u = np.asarray(maps.total_inverse(wc), dtype=float)
        for _ in range(4):
            u = u - (np.asarray(maps.total(u)) - wc) / np.asarray(maps.total_prime(u))
        if np.max(np.abs(np.asarray(maps.total(u)) - wc)) > 1e-10 * max(1.0, float(np.max(wc))):
            u = np.asarray(maps.total_inverse(wc), dtype=float)
        self._u_cache = u
        return np.asarray(maps.rate(u), dtype=float)

    def __call__(self, state: FieldState) -> FieldState:
        h = self.grid.h
        w = state.w
        a_of_w = self._flux(w)
        rhs = self.cfg.dt * neumann_laplacian(a_of_w, h)
        delta = cho_solve_banded((self._chol, False), rhs)
        w_new = w + delta
        _clamp_undershoots(w_new, self.stats)
        return FieldState(state.t + self.cfg.dt, self.grid, w=w_new,
                          tol_neg=state.tol_neg)


def step_system(state: FieldState, rf: ReactionFunction, cfg: SolverConfig) -> FieldState:
    """Single Strang step; convenience wrapper constructing a fresh stepper."""
    return SystemStepper(state.grid, rf, cfg)(state)


def step_plotnikov(state: FieldState, maps: PlotnikovMaps, cfg: SolverConfig) -> FieldState:
    return PlotnikovStepper(state.grid, maps, cfg)(state)


# -- initial data -------------------------------------------------------------

def _as_params(params, defaults: dict, kind: str) -> dict:
    if params is None:
        return dict(defaults)
    if isinstance(params, dict):
        unknown = set(params) - set(defaults)
        if unknown:
            raise InitError(f"unknown {kind} parameters: {sorted(unknown)}")
        out = dict(defaults)
        out.update(params)
        return out
    seq = list(params)
    if len(seq) != len(defaults):
        raise InitError(f"{kind} takes {len(defaults)} positional parameters "
                        f"({', '.join(defaults)}), got {len(seq)}")
    return dict(zip(defaults, seq))


def init_fields(grid: Grid1D, kind: str, params=None) -> FieldState:
    """Build a t=0 state from a named profile family.

    All families have zero slope at both walls analytically, so the discrete
    one-sided differences at the boundaries vanish to O(h^2).

    constant        u0, v0
    cosine-sum      u_mean, v_mean, then (amplitude, integer mode) pairs per
                    field; mode k contributes amp * cos(k pi x / L)
    plateau-blend   u_lo, u_hi, v0, wiggle_amp, wiggle_mode: a half-cosine
                    ramp for u between two plateau values plus a small
                    high-mode ripple, with a flat v
    """
    x = grid.centers
    length = grid.length

    if kind == "constant":
        p = _as_params(params, {"u0": 1.0, "v0": 1.0}, kind)
        u = np.full(grid.n_cells, float(p["u0"]))
        v = np.full(grid.n_cells, float(p["v0"]))
    elif kind == "cosine-sum":
        if not isinstance(params, dict):
            raise InitError("cosine-sum takes a dict with u_mean, v_mean, "
                            "u_modes, v_modes")
        p = _as_params(params, {"u_mean": 1.0, "v_mean": 1.0,
                                "u_modes": (), "v_modes": ()}, kind)
        u = np.full(grid.n_cells, float(p["u_mean"]))
        v = np.full(grid.n_cells, float(p["v_mean"]))
        for arr, modes in ((u, p["u_modes"]), (v, p["v_modes"])):
            for amp, mode in modes:
                arr += float(amp) * np.cos(int(mode) * np.pi * x / length)
    elif kind == "plateau-blend":
        p = _as_params(params, {"u_lo": 0.6, "u_hi": 2.4, "v0": 2.25,
                                "wiggle_amp": 0.08, "wiggle_mode": 9}, kind)
        ramp = 0.5 * (1.0 - np.cos(np.pi * x / length))
        u = float(p["u_lo"]) + (float(p["u_hi"]) - float(p["u_lo"])) * ramp
        # A small high-mode ripple makes the blend cross the unstable window
        # several times, seeding a multi-front texture instead of one jump.
        if p["wiggle_amp"]:
            u = u + float(p["wiggle_amp"]) * np.cos(int(p["wiggle_mode"]) * np.pi * x / length)
        v = np.full(grid.n_cells, float(p["v0"]))
    else:
        raise InitError(f"unknown initial profile kind {kind!r}")

    for name, arr in (("u", u), ("v", v)):
        if np.min(arr) < 0.0:
            raise InitError(f"initial {name} dips to {np.min(arr):.6g} < 0")
    return FieldState(0.0, grid, u, v)


# -- trajectories -------------------------------------------------------------

@dataclass
class Trajectory:
    """Ordered snapshots of one run plus bookkeeping counters."""

    grid: Grid1D
    states: list
    epsilon: Optional[float] = None
    stats: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def stacked(self, name: str) -> np.ndarray:
        """Snapshots of one field as a (n_snapshots, n_cells) array."""
        return np.stack([getattr(s, name) for s in self.states])

    @property
    def initial(self) -> FieldState:
        return self.states[0]

    @property
    def final(self) -> FieldState:
        return self.states[-1]


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    """Trapezoid quadrature weights for possibly nonuniform snapshot times."""
    times = np.asarray(times, dtype=float)
    if times.size == 1:
        return np.zeros(1)
    w = np.empty_like(times)
    w[0] = 0.5 * (times[1] - times[0])
    w[-1] = 0.5 * (times[-1] - times[-2])
    w[1:-1] = 0.5 * (times[2:] - times[:-2])
    return w


def integrate(state: FieldState, stepper, cfg: SolverConfig,
              observers: Iterable[Callable[[FieldState], None]] = ()) -> Trajectory:
    """March the stepper to cfg.t_end, snapshotting every stride-th step.

    The final state is always snapshotted, so for N whole steps with stride s
    the trajectory holds floor(N/s) + 1 snapshots when s divides N (one extra
    otherwise).  On StepFailure the step size is halved, the stride doubled to
    keep the snapshot cadence in time, and the step retried; once dt falls
    below dt_min an IntegrationFailure carrying the partial trajectory is
    raised.
    """
    observers = tuple(observers)
    t_end = cfg.t_end
    if t_end < state.t - 1e-15:
        raise ValueError(f"t_end = {t_end} lies before the state time {state.t}")

    snaps = [state]
    for obs in observers:
        obs(state)
    traj = Trajectory(state.grid, snaps, epsilon=cfg.epsilon,
                      stats=getattr(stepper, "stats", {}))
    if t_end <= state.t:
        return traj

    dt = stepper.dt
    dt_min = cfg.dt_min if cfg.dt_min is not None else dt * 2.0 ** -12
    stride = cfg.snapshot_stride
    phase = 0
    current = stepper
    n_steps = 0

    while state.t < t_end:
        remaining = t_end - state.t
        final = remaining <= dt * (1.0 + 1e-9)
        impl = current
        if final and abs(remaining - dt) > 1e-12 * dt:
            impl = current.rescaled(remaining)
        try:
            new_state = impl(state)
        except StepFailure:
            dt *= 0.5
            if dt < dt_min:
                traj.stats["aborted_at_t"] = state.t
                raise IntegrationFailure(
                    f"dt underflow ({dt:.3e} < {dt_min:.3e}) at t = {state.t:.6g}",
                    traj)
            current = current.rescaled(dt)
            stride *= 2
            phase *= 2
            continue
        state = new_state
        n_steps += 1
        if final:
            state.t = t_end
        phase += 1
        if phase >= stride or final:
            snaps.append(state)
            phase = 0
            for obs in observers:
                obs(state)
        if final:
            break

    traj.stats.setdefault("n_steps", 0)
    traj.stats["n_steps"] += n_steps
    traj.stats["dt_final"] = dt
    return traj
