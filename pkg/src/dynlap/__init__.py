"""Finite-element computation of finite-time coherent sets via the
dynamic Laplacian, and their linear response to perturbations of the
dynamics."""

from .assembly import (
    assemble_mass,
    assemble_stiffness,
    assemble_transfer_operator,
    diffusion_tensor,
    diffusion_tensor_rate,
    laplace_stiffness,
)
from .coherent import (
    LevelSetCurve,
    LevelVelocityField,
    cheeger_value,
    extract_level_set,
    level_velocity,
    line_search_c,
)
from .dynamics import (
    DynamicsModel,
    FlowSpec,
    ModelFamily,
    double_gyre_spec,
    flow_map,
    flow_time_model,
    identity_model,
    make_family,
    standard_map,
)
from .mesh import (
    BoundaryCondition,
    QuadRule,
    TriMesh,
    delaunay_mesh,
    element_geometry,
    gauss_rule,
    grid_mesh,
)
from .response import ResponsePair, predict, solve_response, validate_fd
from .spectral import EigenPair, align_sign, eigs

__version__ = "0.1.0"

__all__ = [
    "BoundaryCondition",
    "DynamicsModel",
    "EigenPair",
    "FlowSpec",
    "LevelSetCurve",
    "LevelVelocityField",
    "ModelFamily",
    "QuadRule",
    "ResponsePair",
    "TriMesh",
    "align_sign",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_transfer_operator",
    "cheeger_value",
    "delaunay_mesh",
    "diffusion_tensor",
    "diffusion_tensor_rate",
    "double_gyre_spec",
    "eigs",
    "element_geometry",
    "extract_level_set",
    "flow_map",
    "flow_time_model",
    "gauss_rule",
    "grid_mesh",
    "identity_model",
    "laplace_stiffness",
    "level_velocity",
    "line_search_c",
    "make_family",
    "predict",
    "solve_response",
    "standard_map",
    "validate_fd",
]
