"""Mesh ingestion, normalization, surface sampling, kinematics, and skinning deformation.

All functions are pure: they return new arrays/objects and never mutate inputs.
Rotations act about rest joint positions, so parent-relative distances (bone
lengths) are preserved exactly by forward kinematics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .skeleton import InvalidSkeletonError, Skeleton, validate_skeleton


class DegenerateGeometryError(ValueError):
    """Raised for meshes without usable extent or surface area."""


@dataclass
class TriMesh:
    """Indexed triangle mesh: vertices (V, 3) float, faces (F, 3) int."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0.0, length, 1.0)


@dataclass
class SampledShape:
    """Surface point cloud with unit normals, both (L, 3)."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals must have matching shapes")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class NormalizationTransform:
    """Maps model units to normalized units: p_norm = (p + translation) * scale."""

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation


def normalize_shape(mesh: TriMesh) -> tuple[TriMesh, NormalizationTransform]:
    """Center the bounding box at the origin and scale its longest side to 1."""
    if len(mesh.vertices) == 0:
        raise DegenerateGeometryError("mesh has no vertices")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise DegenerateGeometryError("mesh bounding box has zero extent")
    transform = NormalizationTransform(-(lo + hi) / 2.0, 1.0 / extent)
    return TriMesh(transform.apply(mesh.vertices), mesh.faces.copy()), transform


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_surface_detailed(mesh: TriMesh, count: int, seed) -> tuple[SampledShape, np.ndarray, np.ndarray]:
    """Area-weighted surface sampling; also returns source face indices and barycentrics.

    Each point gets the unit normal of its source face. Barycentric coordinates
    are uniform within the triangle (reflection trick).
    """
    if len(mesh.faces) == 0:
        raise DegenerateGeometryError("mesh has no faces")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0.0:
        raise DegenerateGeometryError("mesh has zero surface area")
    rng = _as_rng(seed)
    face_idx = rng.choice(len(mesh.faces), size=count, p=areas / total)
    u = rng.random((count, 1))
    v = rng.random((count, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    bary = np.concatenate([1.0 - u - v, u, v], axis=1)
    tri = mesh.vertices[mesh.faces[face_idx]]          # (count, 3, 3)
    points = np.einsum("lc,lcj->lj", bary, tri)
    normals = mesh.face_normals()[face_idx]
    return SampledShape(points, normals), face_idx, bary


def sample_surface(mesh: TriMesh, count: int, seed) -> SampledShape:
    shape, _, _ = sample_surface_detailed(mesh, count, seed)
    return shape


def rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis; angle 0 gives exact identity."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    a = axis / norm
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    cross = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(a, a)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class Pose:
    """Per-joint local rotations as (K, 3, 3) orthonormal matrices."""

    rotations: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def validate(self, tol: float = 1e-6) -> None:
        rr = np.einsum("kij,kil->kjl", self.rotations, self.rotations)
        if not np.allclose(rr, np.eye(3), atol=tol):
            raise ValueError("pose rotations are not orthonormal")
        if not np.allclose(np.linalg.det(self.rotations), 1.0, atol=tol):
            raise ValueError("pose rotations must have determinant +1")

    @classmethod
    def identity(cls, num_joints: int) -> "Pose":
        return cls(np.broadcast_to(np.eye(3), (num_joints, 3, 3)).copy())

    @classmethod
    def from_quaternions(cls, quats: np.ndarray) -> "Pose":
        quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        return cls(np.stack([quaternion_to_matrix(q) for q in quats]))

    @classmethod
    def from_axis_angle(cls, axes: np.ndarray, angles_rad: np.ndarray) -> "Pose":
        axes = np.asarray(axes, dtype=np.float64).reshape(-1, 3)
        angles_rad = np.asarray(angles_rad, dtype=np.float64).reshape(-1)
        return cls(np.stack([rotation_matrix(a, t) for a, t in zip(axes, angles_rad)]))


def forward_kinematics(sk: Skeleton, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Global rigid transform per joint as (rotations (K, 3, 3), translations (K, 3)).

    Each joint's local rotation spins about its rest position; globals compose
    parent-first: G_k = G_parent o Rotate(R_k about rest_k). The posed position
    of joint k is G_k applied to rest_k.
    """
    report = validate_skeleton(sk, max_joints=len(sk))
    if not report.ok:
        raise InvalidSkeletonError(report)
    if len(pose) != len(sk):
        raise ValueError(f"pose has {len(pose)} rotations for {len(sk)} joints")

    k = len(sk)
    rot = np.empty((k, 3, 3))
    trans = np.empty((k, 3))
    order = [sk.root]
    children = sk.children()
    for node in order:
        order.extend(children[node])
    for node in order:
        local_r = pose.rotations[node]
        pivot = sk.joints[node]
        local_t = pivot - local_r @ pivot
        parent = int(sk.parents[node])
        if node == parent:
            rot[node], trans[node] = local_r, local_t
        else:
            rot[node] = rot[parent] @ local_r
            trans[node] = rot[parent] @ local_t + trans[parent]
    return rot, trans


def apply_transforms(points: np.ndarray, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Apply per-joint rigid transforms to one point set: (K, n, 3) result."""
    return np.einsum("kij,nj->kni", rot, points) + trans[:, None, :]


def posed_joints(sk: Skeleton, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    return np.einsum("kij,kj->ki", rot, sk.joints) + trans


def lbs_deform(points: np.ndarray, weights: np.ndarray, rot: np.ndarray,
               trans: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Blend per-joint rigid transforms by row-stochastic weights (L, K)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (points.shape[0], rot.shape[0]):
        raise ValueError(f"weights shape {weights.shape} does not match (L={points.shape[0]}, K={rot.shape[0]})")
    if weights.min(initial=0.0) < -tol or np.abs(weights.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("skinning weights must be row-stochastic")
    return kernels.lbs_blend(points, weights, rot, trans)


def random_pose_augment(mesh: TriMesh, sk: Skeleton, vertex_weights: np.ndarray,
                        max_angle_deg: float, rng: np.random.Generator) -> tuple[TriMesh, Skeleton]:
    """Deform a rig by a random pose: uniform axes, angles uniform in [0, max].

    Vertices move by LBS with the supplied ground-truth vertex weights; joints
    move rigidly with their own transforms, so bone lengths are preserved.
    """
    if not 0.0 <= max_angle_deg <= 180.0:
        raise ValueError("max_angle_deg must lie in [0, 180]")
    k = len(sk)
    axes = rng.normal(size=(k, 3))
    lengths = np.linalg.norm(axes, axis=1, keepdims=True)
    axes = np.where(lengths > 0.0, axes / np.where(lengths > 0.0, lengths, 1.0), [[1.0, 0.0, 0.0]])
    angles = rng.uniform(0.0, np.deg2rad(max_angle_deg), size=k)
    pose = Pose.from_axis_angle(axes, angles)
    rot, trans = forward_kinematics(sk, pose)
    new_vertices = lbs_deform(mesh.vertices, vertex_weights, rot, trans)
    new_joints = posed_joints(sk, rot, trans)
    return TriMesh(new_vertices, mesh.faces.copy()), Skeleton(new_joints, sk.parents.copy(), sk.names)


def load_obj(path) -> TriMesh:
    """Read the ASCII OBJ v/f subset; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: malformed vertex record")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                if len(idx) < 3:
                    raise ValueError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
