"""Segmentation procedures: range-restricted region growing, rigid-body
template tracking, cage-based free-form deformation, and mesh voxelization."""

from .ffd import Cage, CageBinding, cage_bind, cage_deform
from .grow import GrowParams, region_grow
from .mesh import TriMesh, is_watertight, load_obj, mesh_area, mesh_volume, point_in_mesh, save_obj, voxelize
from .rigid import RigidPose, TrackParams, TrackStep, apply_rigid, track_rigid

__all__ = [
    "Cage", "CageBinding", "cage_bind", "cage_deform",
    "GrowParams", "region_grow",
    "TriMesh", "is_watertight", "load_obj", "mesh_area", "mesh_volume",
    "point_in_mesh", "save_obj", "voxelize",
    "RigidPose", "TrackParams", "TrackStep", "apply_rigid", "track_rigid",
]
