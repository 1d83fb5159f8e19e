"""Mass, energy, a priori bounds, and slope fitting."""

import numpy as np
import pytest

from fastreact.diagnostics import (
    FitError,
    apriori_report,
    energy_trace,
    m_bound,
    mass_trace,
    relative_mass_drift,
    sweep_fit,
    total_mass,
)
from fastreact.solver import (
    Grid1D,
    SolverConfig,
    SystemStepper,
    default_dt,
    init_fields,
    integrate,
)


class TestMass:
    def test_flat_fields(self):
        g = Grid1D(32)
        st = init_fields(g, "constant", {"u0": 3.0, "v0": 4.5})
        assert total_mass(st) == pytest.approx(7.5, abs=1e-13)

    def test_zero(self):
        g = Grid1D(32)
        st = init_fields(g, "constant", {"u0": 0.0, "v0": 0.0})
        assert total_mass(st) == 0.0

    def test_drift_after_steps(self, ref_rf):
        g = Grid1D(64)
        st = init_fields(g, "plateau-blend")
        eps = 1e-3
        cfg = SolverConfig(epsilon=eps, dt=default_dt(g, eps), t_end=0.01,
                           snapshot_stride=8)
        traj = integrate(st, SystemStepper(g, ref_rf, cfg), cfg)
        assert relative_mass_drift(traj) < 1e-10
        assert mass_trace(traj).shape == traj.times.shape


class TestEnergy:
    def test_potential_reference_value(self, ref_rf, traj_builder):
        # E for flat u=1, v=0 equals the primitive of the rate law at 1
        g = Grid1D(16)
        traj = traj_builder(g, [(0.0, np.ones(16), np.zeros(16))])
        tr = energy_trace(traj, ref_rf)
        assert tr.energy[0] == pytest.approx(1.75, abs=1e-12)

    def test_stationary_energy_constant(self, ref_rf, traj_builder):
        g = Grid1D(16)
        rows = [(0.1 * k, np.full(16, 3.0), np.full(16, 4.5)) for k in range(4)]
        tr = energy_trace(traj_builder(g, rows), ref_rf)
        assert np.max(np.abs(tr.energy - tr.energy[0])) == 0.0
        assert tr.max_increase == 0.0

    def test_quadrature_fallback_matches_polynomial(self, ref_rf):
        from dataclasses import replace
        from fastreact.diagnostics import _potential
        bare = replace(ref_rf, antiderivative=None)
        u = np.array([0.0, 0.7, 1.5, 3.2])
        assert np.allclose(_potential(bare, u), _potential(ref_rf, u), atol=1e-9)

    def test_dissipation_on_run(self, ref_rf):
        g = Grid1D(64)
        st = init_fields(g, "plateau-blend")
        eps = 1e-3
        cfg = SolverConfig(epsilon=eps, dt=default_dt(g, eps), t_end=0.02,
                           snapshot_stride=16)
        traj = integrate(st, SystemStepper(g, ref_rf, cfg), cfg)
        tr = energy_trace(traj, ref_rf)
        assert tr.max_increase <= 1e-8 * tr.initial


class TestApriori:
    def test_m_bound_example(self, ref_rf, ref_structure, traj_builder):
        g = Grid1D(16)
        st = traj_builder(g, [(0.0, np.full(16, 3.0), np.full(16, 4.5))]).initial
        assert m_bound(st, ref_rf, ref_structure) == pytest.approx(4.5)

    def test_stationary_zero_defect(self, ref_rf, ref_structure, traj_builder):
        g = Grid1D(16)
        rows = [(0.5 * k, np.full(16, 3.0), np.full(16, 4.5)) for k in range(3)]
        rep = apriori_report(traj_builder(g, rows), ref_rf, 1e-3, ref_structure)
        assert rep.scaled_defect_l2 == 0.0
        assert rep.defect_l2 == 0.0
        assert rep.grad_v_l2 == 0.0
        assert rep.bounds_ok

    def test_defect_shrinks_with_eps(self, ref_rf, ref_structure):
        g = Grid1D(64)
        norms = []
        for eps in (4e-3, 1e-3):
            st = init_fields(g, "plateau-blend")
            cfg = SolverConfig(epsilon=eps, dt=default_dt(g, eps), t_end=0.05,
                               snapshot_stride=16)
            traj = integrate(st, SystemStepper(g, ref_rf, cfg), cfg)
            rep = apriori_report(traj, ref_rf, eps, ref_structure)
            norms.append(rep.defect_l2)
            assert rep.bounds_ok
        assert norms[1] < norms[0]


class TestSweepFit:
    def test_sqrt_law_exact(self):
        eps = np.array([1e-2, 3e-3, 1e-3, 3e-4])
        fit = sweep_fit(eps, 2.0 * np.sqrt(eps))
        assert fit.slope == pytest.approx(0.5, abs=1e-12)
        assert fit.stderr == pytest.approx(0.0, abs=1e-10)
        assert fit.ci_low <= 0.5 <= fit.ci_high

    def test_linear_law_exact(self):
        eps = np.array([1e-1, 1e-2, 1e-3])
        fit = sweep_fit(eps, 0.7 * eps)
        assert fit.slope == pytest.approx(1.0, abs=1e-12)

    def test_too_few_points(self):
        with pytest.raises(FitError):
            sweep_fit([1e-2, 1e-3], [0.1, 0.03])

    def test_degenerate_zero_defects(self):
        fit = sweep_fit([1e-2, 1e-3, 1e-4], [0.0, 0.0, 0.0])
        assert fit.degenerate
        assert np.isnan(fit.slope)
