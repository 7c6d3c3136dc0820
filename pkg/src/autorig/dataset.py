"""Rig assets: text file format, filtering rules, statistics, synthetic data.

An asset bundles a triangle mesh, a skeleton, and sparse per-vertex skinning
weights. The text format is a single self-contained document; floats are
written with 9 significant digits, which round-trips 32-bit values exactly
and makes a second save byte-identical to the first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import DegenerateGeometryError, TriMesh, normalize_shape, sample_surface
from .skeleton import Skeleton, validate_skeleton

FORMAT_VERSION = 1
MAX_INFLUENCES = 8


class RigParseError(ValueError):
    """Malformed rig file; message carries the offending line number."""


@dataclass
class RigAsset:
    """Mesh + skeleton + sparse row-stochastic vertex skinning."""

    mesh: TriMesh
    skeleton: Skeleton
    skin_indices: list  # per vertex: int64 array of joint indices
    skin_weights: list  # per vertex: float64 array, sums to 1
    category: str | None = None

    def __post_init__(self):
        v = len(self.mesh.vertices)
        k = len(self.skeleton)
        if len(self.skin_indices) != v or len(self.skin_weights) != v:
            raise ValueError(f"skinning rows (indices {len(self.skin_indices)}, "
                             f"weights {len(self.skin_weights)}) do not cover {v} vertices")
        for i in range(v):
            idx = np.asarray(self.skin_indices[i], dtype=np.int64)
            w = np.asarray(self.skin_weights[i], dtype=np.float64)
            self.skin_indices[i] = idx
            self.skin_weights[i] = w
            if idx.shape != w.shape or idx.ndim != 1 or idx.size == 0:
                raise ValueError(f"vertex {i}: malformed skinning row")
            if idx.min() < 0 or idx.max() >= k:
                raise ValueError(f"vertex {i}: skinning joint index out of range")
            if w.min() < 0.0:
                raise ValueError(f"vertex {i}: negative skinning weight")
            if abs(w.sum() - 1.0) > 1e-4:
                raise ValueError(f"vertex {i}: skinning row sums to {w.sum():.6f}")

    def dense_weights(self) -> np.ndarray:
        out = np.zeros((len(self.mesh.vertices), len(self.skeleton)))
        for i, (idx, w) in enumerate(zip(self.skin_indices, self.skin_weights)):
            np.add.at(out[i], idx, w)
        return out

    @classmethod
    def from_dense(cls, mesh: TriMesh, skeleton: Skeleton, weights: np.ndarray,
                   category: str | None = None,
                   max_influences: int = MAX_INFLUENCES) -> "RigAsset":
        """Keep the top influences per vertex and renormalize the rest away."""
        weights = np.asarray(weights, dtype=np.float64)
        indices, values = [], []
        for row in weights:
            nz = np.flatnonzero(row > 0.0)
            if nz.size == 0:
                raise ValueError("vertex with no positive skinning weight")
            if nz.size > max_influences:
                nz = nz[np.argsort(row[nz])[::-1][:max_influences]]
            nz = np.sort(nz)
            w = row[nz]
            indices.append(nz.astype(np.int64))
            values.append(w / w.sum())
        return cls(mesh, skeleton, indices, values, category)


def _fmt(x: float) -> str:
    return f"{np.float32(x):.9g}"


def save_rig(asset: RigAsset, path) -> None:
    mesh, sk = asset.mesh, asset.skeleton
    lines = [f"rigfile {FORMAT_VERSION}", "units normalized"]
    if asset.category is not None:
        lines.append(f"category {asset.category}")
    lines.append(f"mesh {len(mesh.vertices)} {len(mesh.faces)}")
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(f"f {f[0]} {f[1]} {f[2]}")
    lines.append(f"joints {len(sk)}")
    names = sk.names if sk.names is not None else [f"joint{i}" for i in range(len(sk))]
    for i in range(len(sk)):
        j = sk.joints[i]
        lines.append(f"j {i} {_fmt(j[0])} {_fmt(j[1])} {_fmt(j[2])} {int(sk.parents[i])} {names[i]}")
    lines.append(f"skinning {len(mesh.vertices)}")
    for i, (idx, w) in enumerate(zip(asset.skin_indices, asset.skin_weights)):
        pairs = " ".join(f"{int(a)} {_fmt(b)}" for a, b in zip(idx, w))
        lines.append(f"s {i} {pairs}")
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            self.lines = fh.read().splitlines()
        self.pos = 0
        self.path = path

    def next(self) -> tuple[int, list[str]]:
        while self.pos < len(self.lines):
            self.pos += 1
            parts = self.lines[self.pos - 1].split()
            if parts and not parts[0].startswith("#"):
                return self.pos, parts
        raise RigParseError(f"{self.path}:{len(self.lines)}: unexpected end of file")


def _parse_error(path, lineno, msg) -> RigParseError:
    return RigParseError(f"{path}:{lineno}: {msg}")


def load_rig(path) -> RigAsset:
    """Parse a rig file; tree structure is NOT validated here (filters do that)."""
    rd = _LineReader(path)
    lineno, parts = rd.next()
    if parts[0] != "rigfile" or len(parts) != 2:
        raise _parse_error(path, lineno, "missing rigfile header")
    if parts[1] != str(FORMAT_VERSION):
        raise _parse_error(path, lineno, f"unsupported format version {parts[1]}")

    category = None
    lineno, parts = rd.next()
    if parts[0] == "units":
        lineno, parts = rd.next()
    if parts[0] == "category":
        category = " ".join(parts[1:])
        lineno, parts = rd.next()

    if parts[0] != "mesh" or len(parts) != 3:
        raise _parse_error(path, lineno, "expected 'mesh V F'")
    try:
        nv, nf = int(parts[1]), int(parts[2])
    except ValueError:
        raise _parse_error(path, lineno, "mesh counts must be integers") from None
    if nv < 0 or nf < 0:
        raise _parse_error(path, lineno, "mesh counts must be non-negative")

    vertices = np.empty((nv, 3))
    for i in range(nv):
        lineno, parts = rd.next()
        if parts[0] != "v" or len(parts) != 4:
            raise _parse_error(path, lineno, f"expected vertex record {i}")
        try:
            vertices[i] = [float(x) for x in parts[1:4]]
        except ValueError:
            raise _parse_error(path, lineno, "bad vertex coordinates") from None

    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        lineno, parts = rd.next()
        if parts[0] != "f" or len(parts) != 4:
            raise _parse_error(path, lineno, f"expected face record {i}")
        try:
            faces[i] = [int(x) for x in parts[1:4]]
        except ValueError:
            raise _parse_error(path, lineno, "bad face indices") from None
        if faces[i].min() < 0 or faces[i].max() >= nv:
            raise _parse_error(path, lineno, "face index out of range")

    lineno, parts = rd.next()
    if parts[0] != "joints" or len(parts) != 2:
        raise _parse_error(path, lineno, "expected 'joints K'")
    try:
        nj = int(parts[1])
    except ValueError:
        raise _parse_error(path, lineno, "joint count must be an integer") from None
    if nj < 1:
        raise _parse_error(path, lineno, "joint count must be positive")
    joints = np.empty((nj, 3))
    parents = np.empty(nj, dtype=np.int64)
    names = []
    for i in range(nj):
        lineno, parts = rd.next()
        if parts[0] != "j" or len(parts) < 6:
            raise _parse_error(path, lineno, f"expected joint record {i}")
        try:
            own = int(parts[1])
            joints[i] = [float(x) for x in parts[2:5]]
            parents[i] = int(parts[5])
        except ValueError:
            raise _parse_error(path, lineno, "bad joint record") from None
        if own != i:
            raise _parse_error(path, lineno, f"joint records must be in order, got index {own}")
        if not 0 <= parents[i] < nj:
            raise _parse_error(path, lineno, f"parent index {parents[i]} out of range")
        names.append(parts[6] if len(parts) > 6 else f"joint{i}")

    lineno, parts = rd.next()
    if parts[0] != "skinning" or len(parts) != 2 or parts[1] != str(nv):
        raise _parse_error(path, lineno, f"expected 'skinning {nv}'")
    skin_indices, skin_weights = [], []
    for i in range(nv):
        lineno, parts = rd.next()
        try:
            row_ok = (parts[0] == "s" and len(parts) >= 4
                      and len(parts) % 2 == 0 and int(parts[1]) == i)
        except ValueError:
            row_ok = False
        if not row_ok:
            raise _parse_error(path, lineno, f"expected skinning record {i}")
        try:
            idx = np.array([int(x) for x in parts[2::2]], dtype=np.int64)
            w = np.array([float(x) for x in parts[3::2]])
        except ValueError:
            raise _parse_error(path, lineno, "bad skinning pair") from None
        if idx.min() < 0 or idx.max() >= nj:
            raise _parse_error(path, lineno, "skinning joint index out of range")
        total = w.sum()
        if total <= 0.0:
            raise _parse_error(path, lineno, "skinning row has no positive mass")
        if abs(total - 1.0) > 1e-4:
            warnings.warn(f"{path}:{lineno}: skinning row sums to {total:.6g}, renormalizing")
            w = w / total
        skin_indices.append(idx)
        skin_weights.append(w)

    lineno, parts = rd.next()
    if parts[0] != "end":
        raise _parse_error(path, lineno, "expected 'end'")
    return RigAsset(TriMesh(vertices, faces), Skeleton(joints, parents, names),
                    skin_indices, skin_weights, category)


# ---- filtering --------------------------------------------------------------

@dataclass(frozen=True)
class FilterRules:
    max_joints: int = 64
    alignment_fraction: float = 0.1
    alignment_distance: float = 0.1
    min_vertices: int = 50
    min_faces: int = 50
    alignment_samples: int = 1024
    sampling_seed: int = 0


@dataclass
class FilterRecord:
    index: int
    category: str | None
    passed: bool
    failures: list  # (rule id, measured value) pairs


@dataclass
class FilterReport:
    records: list = field(default_factory=list)

    @property
    def kept_indices(self) -> list[int]:
        return [r.index for r in self.records if r.passed]

    @property
    def num_rejected(self) -> int:
        return sum(not r.passed for r in self.records)


def _alignment_fraction(asset: RigAsset, rules: FilterRules) -> float:
    """Fraction of joints farther than the cutoff from the sampled surface.

    Measured in normalized units; degenerate geometry counts as fully
    misaligned since there is no surface to align to.
    """
    try:
        normed, transform = normalize_shape(asset.mesh)
        samples = sample_surface(normed, rules.alignment_samples, seed=rules.sampling_seed)
    except DegenerateGeometryError:
        return 1.0
    joints = transform.apply(asset.skeleton.joints)
    d = np.sqrt(kernels.nearest_sqdist(joints, samples.points))
    return float((d > rules.alignment_distance).mean())


def filter_assets(assets, rules: FilterRules = FilterRules()):
    """Apply every rule to every asset; returns (kept assets, FilterReport).

    Rules are conjunctive and evaluated independently, so the report lists
    every violated rule per asset, not just the first.
    """
    kept = []
    report = FilterReport()
    for i, asset in enumerate(assets):
        failures = []
        k = len(asset.skeleton)
        if k > rules.max_joints:
            failures.append(("max-joints", float(k)))
        tree = validate_skeleton(asset.skeleton, max_joints=max(k, 1))
        if not tree.ok:
            failures.append(("tree", float(len(tree.violations))))
        frac = _alignment_fraction(asset, rules)
        if frac > rules.alignment_fraction:
            failures.append(("alignment", frac))
        nv, nf = len(asset.mesh.vertices), len(asset.mesh.faces)
        if nv < rules.min_vertices or nf < rules.min_faces:
            failures.append(("degenerate", float(min(nv, nf))))
        record = FilterRecord(i, asset.category, not failures, failures)
        report.records.append(record)
        if record.passed:
            kept.append(asset)
    return kept, report


# ---- statistics ---------------------------------------------------------------

HIST_BIN_WIDTH = 5
HIST_RANGE = (0, 65)


@dataclass
class DatasetStats:
    category_counts: dict
    joint_histogram: np.ndarray
    bin_edges: np.ndarray
    num_assets: int


def dataset_stats(assets) -> DatasetStats:
    edges = np.arange(HIST_RANGE[0], HIST_RANGE[1] + HIST_BIN_WIDTH, HIST_BIN_WIDTH)
    counts: dict = {}
    joint_counts = []
    for asset in assets:
        label = asset.category if asset.category is not None else "(none)"
        counts[label] = counts.get(label, 0) + 1
        joint_counts.append(len(asset.skeleton))
    hist, _ = np.histogram(joint_counts, bins=edges)
    return DatasetStats(counts, hist, edges, len(joint_counts))


# ---- synthetic assets -----------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    k_range: tuple = (4, 16)
    branch_prob: float = 0.25
    radius_range: tuple = (0.03, 0.07)
    bone_length: tuple = (0.15, 0.35)
    beta: float = 25.0
    segments: int = 8
    rings: int = 2


def tube_mesh(seg_a, seg_b, radius: float, segments: int = 8, rings: int = 2) -> TriMesh:
    """Closed tube around one segment: ring strips plus fan caps."""
    a = np.asarray(seg_a, dtype=np.float64)
    b = np.asarray(seg_b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    if length <= 0.0:
        raise ValueError("zero-length tube axis")
    w = axis / length
    helper = np.eye(3)[np.argmin(np.abs(w))]
    u = np.cross(w, helper)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)

    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    circle = radius * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)
    t = np.linspace(0.0, 1.0, rings + 1)
    centers = a[None, :] + t[:, None] * axis[None, :]
    verts = (centers[:, None, :] + circle[None, :, :]).reshape(-1, 3)
    verts = np.vstack([verts, a, b])
    cap_a = len(verts) - 2
    cap_b = len(verts) - 1

    faces = []
    for r in range(rings):
        for s in range(segments):
            s2 = (s + 1) % segments
            i00 = r * segments + s
            i01 = r * segments + s2
            i10 = (r + 1) * segments + s
            i11 = (r + 1) * segments + s2
            faces.append([i00, i01, i11])
            faces.append([i00, i11, i10])
    last = rings * segments
    for s in range(segments):
        s2 = (s + 1) % segments
        faces.append([cap_a, s2, s])
        faces.append([cap_b, last + s, last + s2])
    return TriMesh(verts, np.array(faces, dtype=np.int64))


def merge_meshes(meshes) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriMesh(np.vstack(verts), np.vstack(faces))


def skinning_field(points: np.ndarray, sk: Skeleton, beta: float = 25.0) -> np.ndarray:
    """Dense (n, K) weights: softmax of -beta * distance over the two nearest bones.

    Weight goes to each bone's child joint; the root joint itself carries no
    direct weight (its bones' mass lives on the children).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bones = sk.bones()
    if len(bones) < 2:
        raise ValueError("skinning field needs at least two bones")
    d = kernels.point_segment_dist(points, sk.joints[bones[:, 0]], sk.joints[bones[:, 1]])
    order = np.argsort(d, axis=1)[:, :2]
    rows = np.arange(len(points))[:, None]
    two = d[rows, order]
    logits = -beta * (two - two[:, :1])
    e = np.exp(logits)
    w2 = e / e.sum(axis=1, keepdims=True)
    out = np.zeros((len(points), len(sk)))
    child = bones[:, 1]
    np.add.at(out, (rows, child[order]), w2)
    return out


def _random_tree_skeleton(rng: np.random.Generator, params: SynthParams) -> Skeleton:
    k = int(rng.integers(params.k_range[0], params.k_range[1] + 1))
    joints = np.zeros((k, 3))
    parents = np.zeros(k, dtype=np.int64)
    for i in range(1, k):
        parents[i] = i - 1 if rng.random() >= params.branch_prob else int(rng.integers(0, i))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        length = rng.uniform(*params.bone_length)
        joints[i] = joints[parents[i]] + direction * length
    return Skeleton(joints, parents)


def synth_generate(n: int, rng: np.random.Generator,
                   params: SynthParams = SynthParams()) -> list[RigAsset]:
    """Procedural capsule-limb rigs that satisfy every filter rule by construction."""
    assets = []
    for child_rng in rng.spawn(n):
        sk = _random_tree_skeleton(child_rng, params)
        bones = sk.bones()
        tubes = [tube_mesh(sk.joints[p], sk.joints[c],
                           float(child_rng.uniform(*params.radius_range)),
                           params.segments, params.rings)
                 for p, c in bones]
        mesh = merge_meshes(tubes)
        normed, transform = normalize_shape(mesh)
        sk_normed = Skeleton(transform.apply(sk.joints), sk.parents.copy())
        weights = skinning_field(normed.vertices, sk_normed, params.beta)
        assets.append(RigAsset.from_dense(normed, sk_normed, weights, category="synthetic"))
    return assets
