"""Geometric primitives: nearest neighbours, meshes, visibility, registration, ray casting."""

from .mesh import BVH, TriangleMesh, closest_points_on_mesh, face_normals, point_to_mesh, vertex_normals
from .raycast import LidarSpec, RayHits, cast_rays
from .registration import (
    IcpResult,
    PlaneFit,
    ProcrustesResult,
    fit_plane_lsq,
    icp_rigid,
    procrustes_rotation,
    ransac_plane,
    rigid_fit,
    yaw_angle,
    yaw_of,
)
from .scene import PointCloudFrame, SceneMap
from .spatial import SpatialIndex, chamfer_one_sided, nearest
from .visibility import hidden_point_removal, observable_vertices

__all__ = [
    "BVH", "TriangleMesh", "closest_points_on_mesh", "face_normals", "point_to_mesh", "vertex_normals",
    "LidarSpec", "RayHits", "cast_rays", "IcpResult", "PlaneFit", "ProcrustesResult", "fit_plane_lsq",
    "icp_rigid", "procrustes_rotation", "ransac_plane", "rigid_fit", "yaw_angle", "yaw_of",
    "PointCloudFrame", "SceneMap", "SpatialIndex", "chamfer_one_sided", "nearest", "hidden_point_removal",
    "observable_vertices",
]
