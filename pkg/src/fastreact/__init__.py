"""Desk-scale laboratory for a stiff two-component reaction-diffusion system.

The package simulates the eps-scaled system

    du/dt = (v - F(u)) / eps
    dv/dt = Lap(v) + (F(u) - v) / eps

on a 1-D interval with no-flux boundaries and a nonmonotone rate law F, and
measures the structures that emerge as eps shrinks: three-branch oscillations
of u, empirical kinetic profiles and their structural identities, Young-measure
branch weights, defect measures, and the pseudo-parabolic change of variables
w = u + F(u).
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    BranchInverses,
    BranchStructure,
    DomainError,
    ModelError,
    PlotnikovMaps,
    ReactionFunction,
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
