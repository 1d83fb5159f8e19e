import numpy as np
import pytest

from fastreact.model import (
    BranchInverses,
    compute_branch_structure,
    plotnikov_maps,
    reference_cubic,
)
from fastreact.solver import FieldState, Grid1D, Trajectory


@pytest.fixture(scope="session")
def ref_rf():
    return reference_cubic(u_max=5.0)


@pytest.fixture(scope="session")
def ref_structure(ref_rf):
    return compute_branch_structure(ref_rf)


@pytest.fixture(scope="session")
def ref_branches(ref_rf, ref_structure):
    return BranchInverses.from_reaction(ref_rf, ref_structure)


@pytest.fixture(scope="session")
def ref_maps(ref_rf):
    return plotnikov_maps(ref_rf)


def build_trajectory(grid: Grid1D, rows, epsilon=1e-3):
    """Trajectory from explicit (t, u, v) rows of per-cell arrays."""
    states = [FieldState(float(t), grid, np.asarray(u, float), np.asarray(v, float))
              for t, u, v in rows]
    return Trajectory(grid, states, epsilon=epsilon)


@pytest.fixture
def traj_builder():
    return build_trajectory
