"""Rate-law geometry: evaluation, folds, branch inverses, change of variables.

Expected numbers for the reference cubic u^3 - 4.5 u^2 + 6 u come from exact
factorizations: F' = 3(u-1)(u-2), F - 2 = (u-2)^2 (u-0.5),
F - 2.5 = (u-1)^2 (u-2.5) and F - 2.25 = (u-1.5)(u^2 - 3u + 1.5).
"""

import numpy as np
import pytest

from fastreact.model import (
    BranchInverses,
    BranchStructure,
    DomainError,
    ModelError,
    ShapeError,
    ValidityError,
    branch_inverse,
    compute_branch_structure,
    cubic_reaction,
    eval_f,
    nondegeneracy_check,
    plotnikov_maps,
    reference_cubic,
)

SQRT3 = np.sqrt(3.0)


@pytest.fixture(scope="module")
def rf():
    return reference_cubic()


@pytest.fixture(scope="module")
def structure(rf):
    return compute_branch_structure(rf)


@pytest.fixture(scope="module")
def branches(rf, structure):
    return BranchInverses.from_reaction(rf, structure)


class TestEval:
    @pytest.mark.parametrize("u,val,der", [
        (0.0, 0.0, 6.0),
        (1.5, 2.25, -0.75),
        (3.0, 4.5, 6.0),
    ])
    def test_reference_values(self, rf, u, val, der):
        v, d = eval_f(rf, u)
        assert v == pytest.approx(val, abs=1e-14)
        assert d == pytest.approx(der, abs=1e-14)

    def test_out_of_domain(self, rf):
        with pytest.raises(DomainError):
            eval_f(rf, -0.5)
        with pytest.raises(DomainError):
            eval_f(rf, rf.u_max + 1.0)

    def test_vectorized(self, rf):
        u = np.array([0.0, 1.0, 2.0, 3.0])
        v, d = eval_f(rf, u)
        assert v.shape == (4,)
        assert np.all(v >= 0.0)

    def test_nonzero_constant_rejected(self):
        with pytest.raises(ModelError):
            cubic_reaction((1.0, -4.5, 6.0, 0.1))


class TestBranchStructure:
    def test_reference_window(self, structure):
        assert structure.u_low == pytest.approx(0.5, abs=1e-10)
        assert structure.u_peak == pytest.approx(1.0, abs=1e-10)
        assert structure.u_valley == pytest.approx(2.0, abs=1e-10)
        assert structure.u_high == pytest.approx(2.5, abs=1e-10)
        assert structure.f_valley == pytest.approx(2.0, abs=1e-10)
        assert structure.f_peak == pytest.approx(2.5, abs=1e-10)

    def test_residuals(self, rf, structure):
        assert abs(float(rf.f(np.asarray(structure.u_low))) - structure.f_valley) < 1e-10
        assert abs(float(rf.f(np.asarray(structure.u_high))) - structure.f_peak) < 1e-10
        # fold rates equal the function values at the window edges by construction
        assert float(rf.f(np.asarray(structure.u_peak))) == pytest.approx(structure.f_peak, abs=1e-12)

    def test_unstable_interior_slope(self, rf):
        assert eval_f(rf, 1.5)[1] == pytest.approx(-0.75, abs=1e-14)
        assert eval_f(rf, 1.5)[1] < 0.0

    def test_monotone_rejected(self):
        mono = cubic_reaction((0.0, 0.0, 1.0, 0.0))
        with pytest.raises(ShapeError):
            compute_branch_structure(mono)

    def test_window_beyond_domain_rejected(self):
        # u_max cuts the third branch before it climbs back to the upper fold
        small = cubic_reaction((1.0, -4.5, 6.0, 0.0), u_max=2.2)
        with pytest.raises(ShapeError):
            compute_branch_structure(small)


class TestBranchInverse:
    def test_middle_branch(self, branches):
        u, slope = branch_inverse(branches, 2, 2.25)
        assert u == pytest.approx(1.5, abs=1e-10)
        assert slope == pytest.approx(-4.0 / 3.0, abs=1e-10)

    def test_outer_branches(self, branches):
        u1, s1 = branch_inverse(branches, 1, 2.25)
        u3, s3 = branch_inverse(branches, 3, 2.25)
        assert u1 == pytest.approx((3.0 - SQRT3) / 2.0, abs=1e-10)
        assert u3 == pytest.approx((3.0 + SQRT3) / 2.0, abs=1e-10)
        assert s1 == pytest.approx(2.0 / 3.0, abs=1e-10)
        assert s3 == pytest.approx(2.0 / 3.0, abs=1e-10)

    def test_constant_extensions(self, branches):
        assert branch_inverse(branches, 1, 3.0) == (1.0, 0.0)
        assert branch_inverse(branches, 3, 0.0) == (2.0, 0.0)
        assert branch_inverse(branches, 2, 0.5) == (2.0, 0.0)
        assert branch_inverse(branches, 2, 4.0) == (1.0, 0.0)

    def test_negative_rate_rejected(self, branches):
        with pytest.raises(DomainError):
            branch_inverse(branches, 1, -0.1)

    def test_roundtrip_residuals(self, rf, branches, structure):
        rng = np.random.default_rng(7)
        ranges = {1: (0.0, structure.f_peak), 2: (structure.f_valley, structure.f_peak),
                  3: (structure.f_valley, float(rf.f(np.asarray(rf.u_max))))}
        for i, (lo, hi) in ranges.items():
            xi = rng.uniform(lo + 1e-9, hi - 1e-9, size=1000)
            u, _ = branch_inverse(branches, i, xi)
            assert np.max(np.abs(rf.f(u) - xi)) < 1e-10

    def test_slope_is_reciprocal_derivative(self, rf, branches, structure):
        rng = np.random.default_rng(11)
        pad = 1e-3 * structure.fold_width
        xi = rng.uniform(structure.f_valley + pad, structure.f_peak - pad, size=500)
        for i in (1, 2, 3):
            u, slope = branch_inverse(branches, i, xi)
            assert np.max(np.abs(slope * rf.fprime(u) - 1.0)) < 1e-8

    def test_sign_pattern_and_ordering(self, branches):
        xi = np.linspace(0.0, 4.0, 401)
        u1, s1 = branch_inverse(branches, 1, xi)
        u2, s2 = branch_inverse(branches, 2, xi)
        u3, s3 = branch_inverse(branches, 3, xi)
        assert np.all(s1 >= 0.0) and np.all(s2 <= 0.0) and np.all(s3 >= 0.0)
        assert np.all(u1 <= u2 + 1e-12) and np.all(u2 <= u3 + 1e-12)

    def test_fold_slope_clamped(self, branches, structure):
        cap = branches.slope_cap
        xi = structure.f_peak - 1e-15
        _, slope, clamped = branches.value_slope(1, xi)
        assert clamped
        assert abs(slope) == cap


class TestNondegeneracy:
    def test_reference_window_positive(self, branches):
        w_min = nondegeneracy_check(branches, 2.05, 2.45, 100)
        assert w_min > 0.0

    def test_affine_branches_degenerate(self):
        # Piecewise-affine law: constant slopes, so all higher derivatives vanish.
        st = BranchStructure(0.5, 1.0, 2.0, 2.5, 2.0, 2.5)
        inverses = (lambda xi: 0.4 * xi, lambda xi: 3.0 - 0.5 * xi, lambda xi: 0.8 * xi + 0.5)
        derivs = (lambda u: np.full_like(np.asarray(u, float), 2.5),
                  lambda u: np.full_like(np.asarray(u, float), -2.0),
                  lambda u: np.full_like(np.asarray(u, float), 1.25))
        bi = BranchInverses.from_callables(st, inverses, derivs)
        assert nondegeneracy_check(bi, 2.1, 2.4, 50) == 0.0

    def test_degenerate_request_rejected(self, branches):
        with pytest.raises(DomainError):
            nondegeneracy_check(branches, 2.1, 2.4, 1)

    def test_window_outside_folds_rejected(self, branches):
        with pytest.raises(DomainError):
            nondegeneracy_check(branches, 1.0, 2.4, 10)


class TestPlotnikovMaps:
    def test_reference_values(self, rf):
        maps = plotnikov_maps(rf)
        assert maps.valid
        assert maps.min_fprime == pytest.approx(-0.75, abs=1e-9)
        assert maps.total(1.0) == pytest.approx(3.5, abs=1e-12)
        assert maps.flux(3.5) == pytest.approx(2.5, abs=1e-10)
        assert maps.total(0.0) == pytest.approx(0.0, abs=1e-14)
        assert maps.flux(0.0) == pytest.approx(0.0, abs=1e-10)

    def test_flux_of_total_is_rate(self, rf):
        maps = plotnikov_maps(rf)
        u = np.linspace(0.0, rf.u_max, 257)
        assert np.max(np.abs(maps.flux(maps.total(u)) - rf.f(u))) < 1e-10

    def test_steep_law_invalid(self):
        steep = cubic_reaction((1.0, -6.0, 9.5, 0.0), u_max=8.0)
        maps = plotnikov_maps(steep)
        assert not maps.valid
        assert maps.min_fprime < -1.0
        with pytest.raises(ValidityError):
            maps.total_inverse(1.0)
        with pytest.raises(ValidityError):
            maps.flux(1.0)

    def test_flux_keeps_profile(self, rf):
        # two sign changes of the flux slope, same as F'
        maps = plotnikov_maps(rf)
        w = np.linspace(1e-6, maps.w_max - 1e-6, 2001)
        sgn = np.sign(maps.flux_slope(w))
        flips = np.count_nonzero(sgn[:-1] * sgn[1:] < 0)
        assert flips == 2
