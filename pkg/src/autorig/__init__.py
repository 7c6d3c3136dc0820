"""Automatic rigging for 3D meshes: autoregressive skeletons, connectivity, and skinning."""

__version__ = "0.1.0"

from . import kernels
from .skeleton import (
    InvalidSkeletonError,
    JointSequence,
    MalformedSequenceError,
    Skeleton,
    ValidationReport,
    bfs_serialize,
    sequence_to_skeleton,
    validate_skeleton,
)

__all__ = [
    "kernels",
    "InvalidSkeletonError",
    "JointSequence",
    "MalformedSequenceError",
    "Skeleton",
    "ValidationReport",
    "bfs_serialize",
    "sequence_to_skeleton",
    "validate_skeleton",
]
