"""Finite element library for large bending deformations of thin plates.

Discontinuous Galerkin discretizations of fourth order plate energies
built on a reconstructed Hessian, minimized by linearized or constrained
discrete gradient flows with optional acceleration.
"""

from .config import ProblemConfig, parse_config, parse_config_data
from .dgspace import DGSpace, build_space
from .driver import (
    RunResult,
    build_setup,
    hessian_study,
    run_dynamics,
    run_preprocess,
    run_static,
    write_outputs,
)
from .energy import (
    BoundaryData,
    CurvatureField,
    ForceField,
    MaterialParams,
    MetricField,
    PenaltyParams,
)
from .errors import ConfigError, MeshError, MeshFormatError, PlatebendError, SolverError
from .export import export_state, read_vtk, write_summary
from .flow import EnergyLog, FlowConfig, FlowProblem, bc_preprocess, run_flow
from .hessian import assemble_liftings, discrete_hessian
from .mesh import (
    Mesh,
    build_disc_mesh,
    build_structured_quad_mesh,
    load_mesh,
    make_mesh,
    save_mesh,
)

__version__ = "0.1.0"

__all__ = [
    "BoundaryData",
    "ConfigError",
    "CurvatureField",
    "DGSpace",
    "EnergyLog",
    "FlowConfig",
    "FlowProblem",
    "ForceField",
    "MaterialParams",
    "Mesh",
    "MeshError",
    "MeshFormatError",
    "MetricField",
    "PenaltyParams",
    "PlatebendError",
    "ProblemConfig",
    "RunResult",
    "SolverError",
    "assemble_liftings",
    "bc_preprocess",
    "build_disc_mesh",
    "build_setup",
    "build_space",
    "build_structured_quad_mesh",
    "discrete_hessian",
    "export_state",
    "hessian_study",
    "load_mesh",
    "make_mesh",
    "parse_config",
    "parse_config_data",
    "read_vtk",
    "run_dynamics",
    "run_flow",
    "run_preprocess",
    "run_static",
    "save_mesh",
    "write_outputs",
    "write_summary",
]
