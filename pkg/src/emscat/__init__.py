"""emscat: fast boundary-integral solver for time-harmonic electromagnetic
scattering from homogeneous dielectric bodies."""

from .chebyshev import cheb_nodes, fejer_weights
from .geometry import (
    SurfaceDiscretization,
    load_surface,
    make_sphere_surface,
    write_surface,
)
from .ifgf import build_box_tree, build_cone_hierarchy, ifgf_apply
from .operators import (
    DensityBlock,
    MaterialPair,
    MullerOperator,
    build_muller_operator,
)
from .quadrature import SingularQuadratureConfig, classify_targets
from .reference import (
    electric_dipole,
    evaluate_fields,
    mie_solution,
    plane_wave,
)
from .solver import gmres

__all__ = [
    "cheb_nodes",
    "fejer_weights",
    "SurfaceDiscretization",
    "load_surface",
    "make_sphere_surface",
    "write_surface",
    "build_box_tree",
    "build_cone_hierarchy",
    "ifgf_apply",
    "DensityBlock",
    "MaterialPair",
    "MullerOperator",
    "build_muller_operator",
    "SingularQuadratureConfig",
    "classify_targets",
    "plane_wave",
    "electric_dipole",
    "mie_solution",
    "evaluate_fields",
    "gmres",
]
