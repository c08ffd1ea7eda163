"""Finite-element wave equation solver with an equilibrated a posteriori error estimator."""

from .assembly import MaterialData
from .equilibrate import FluxReconstructor
from .estimator import EstimatorTrace, approximation_factor_bound, oscillation
from .experiment import run_experiment
from .mesh import BoundaryKind, Mesh, build_patches, generate_square, read_mesh
from .scenarios import obstacle, reflection, standing_wave
from .spaces import LagrangeSpace, RTSpace
from .wavesolver import LeapFrog, cfl_dt, run

__all__ = [
    "BoundaryKind",
    "EstimatorTrace",
    "FluxReconstructor",
    "LagrangeSpace",
    "LeapFrog",
    "MaterialData",
    "Mesh",
    "RTSpace",
    "approximation_factor_bound",
    "build_patches",
    "cfl_dt",
    "generate_square",
    "obstacle",
    "oscillation",
    "read_mesh",
    "reflection",
    "run",
    "run_experiment",
    "standing_wave",
]
