"""Skeleton-guided 3D shape reconstruction and generation toolkit.

Subpackages cover point-cloud geometry primitives, medial skeleton
extraction, signed distance volumes with marching cubes, a small
autodiff-backed implicit auto-encoder, probability-flow latent sampling,
and point-set evaluation metrics. The ``skelgen`` CLI ties them together.
"""

__version__ = "0.1.0"

from skelgen.pointcloud import PointCloud, NormalizationTransform, SpatialIndex
from skelgen.skeleton import Skeleton, SkeletonizeConfig
from skelgen.sdf import SdfVolume
from skelgen.mesh import TriangleMesh

__all__ = [
    "PointCloud",
    "NormalizationTransform",
    "SpatialIndex",
    "Skeleton",
    "SkeletonizeConfig",
    "SdfVolume",
    "TriangleMesh",
]
