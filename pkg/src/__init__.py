"""
Nonlocal Geometry Toolkit Package
Fractional perimeters, fractional mean curvature, mass at infinity,
isoperimetric reports, second variation and min-cut plateau problems.
"""

from .errors import NonlocalToolkitError, NumericalFailure, ValidationError
from .geometry_module import BoundaryMesh, GridSpec, ShapeExpr, VoxelSet, shape_from_json, voxelize
from .quadrature_module import KernelParams, QuadratureOptions, interaction, pair_weight
from .functionals_module import (
    curvature_profile,
    fractional_mean_curvature,
    isoperimetric_report,
    per_s_global,
    per_s_local,
    second_variation_form,
    zeta_estimate,
)
from .plateau_module import PlateauProblem, solve_fixed_volume, solve_plateau

__all__ = [
    'NonlocalToolkitError',
    'NumericalFailure',
    'ValidationError',
    'BoundaryMesh',
    'GridSpec',
    'ShapeExpr',
    'VoxelSet',
    'shape_from_json',
    'voxelize',
    'KernelParams',
    'QuadratureOptions',
    'interaction',
    'pair_weight',
    'curvature_profile',
    'fractional_mean_curvature',
    'isoperimetric_report',
    'per_s_global',
    'per_s_local',
    'second_variation_form',
    'zeta_estimate',
    'PlateauProblem',
    'solve_fixed_volume',
    'solve_plateau',
]
