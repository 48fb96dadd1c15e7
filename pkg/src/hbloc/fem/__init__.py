"""Finite element head model with complete electrode boundary conditions."""
from .assembly import FemSystem, RtSourceSpace, assemble_system, build_rt_space
from .leadfield import (
    FemForwardModel,
    dipole_to_rt,
    electric_lead_field,
    forward_solve,
    magnetic_lead_field,
    primary_matrices,
)
from .mesh import HeadMesh, MeshError, TABLE1_CONDUCTIVITIES, load_mesh, make_sphere_mesh, mesh_to_document

__all__ = [
    "FemSystem",
    "RtSourceSpace",
    "assemble_system",
    "build_rt_space",
    "FemForwardModel",
    "dipole_to_rt",
    "electric_lead_field",
    "forward_solve",
    "magnetic_lead_field",
    "primary_matrices",
    "HeadMesh",
    "MeshError",
    "TABLE1_CONDUCTIVITIES",
    "load_mesh",
    "make_sphere_mesh",
    "mesh_to_document",
]
