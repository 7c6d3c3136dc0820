"""Skeleton tree model: validation, BFS serialization, and reconstruction.

A skeleton is a rooted tree of 3D joints. The root is encoded as a joint
whose parent index is itself. For sequence modeling the tree is flattened
in breadth-first order, so every parent precedes its children; the order
of siblings is either canonical (lexicographic by position) or randomized
by a caller-supplied RNG.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_JOINTS = 64


class InvalidSkeletonError(ValueError):
    """Raised when an operation requires a valid skeleton and gets one that fails validation."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("invalid skeleton: " + "; ".join(report.violations))
        self.report = report


class MalformedSequenceError(ValueError):
    """Raised when a joint sequence breaks the parent-precedes-child contract."""


@dataclass
class Skeleton:
    """Rooted tree of K joints: positions (K, 3) and parent indices (K,).

    The root satisfies parents[r] == r. All indices are 0-based.
    """

    joints: np.ndarray
    parents: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.joints.shape[0]

    @property
    def root(self) -> int:
        roots = np.flatnonzero(self.parents == np.arange(len(self)))
        if roots.size != 1:
            raise InvalidSkeletonError(validate_skeleton(self))
        return int(roots[0])

    def children(self) -> list[list[int]]:
        """Child index lists, one per joint, in original index order."""
        out: list[list[int]] = [[] for _ in range(len(self))]
        for child, parent in enumerate(self.parents):
            if child != parent:
                out[int(parent)].append(child)
        return out

    def bones(self) -> np.ndarray:
        """(B, 2) array of (parent, child) index pairs, one per non-root joint."""
        child = np.flatnonzero(self.parents != np.arange(len(self)))
        return np.stack([self.parents[child], child], axis=1)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_skeleton(sk: Skeleton, max_joints: int = DEFAULT_MAX_JOINTS) -> ValidationReport:
    """Check the tree invariants; reports every violation instead of aborting."""
    report = ValidationReport()
    k = len(sk)
    if k < 1:
        report.violations.append("empty skeleton")
        return report
    if k > max_joints:
        report.violations.append(f"too many joints: {k} > {max_joints}")

    in_range = (sk.parents >= 0) & (sk.parents < k)
    for idx in np.flatnonzero(~in_range):
        report.violations.append(f"index out of range at {int(idx)}: parent {int(sk.parents[idx])}")

    roots = np.flatnonzero((sk.parents == np.arange(k)) & in_range)
    if roots.size == 0:
        report.violations.append("no root (no self-parented joint)")
    elif roots.size > 1:
        report.violations.append(f"multiple roots at {roots.tolist()}")

    # Walk parent links; a valid joint reaches a self-parented node in < k steps.
    for start in range(k):
        cur, steps = start, 0
        while steps < k and 0 <= cur < k:
            nxt = int(sk.parents[cur])
            if nxt == cur:
                break
            cur, steps = nxt, steps + 1
        else:
            if 0 <= cur < k:
                report.violations.append(f"cycle at {start}")
    return report


@dataclass
class JointSequence:
    """BFS-ordered flattening of a skeleton.

    positions[i] is the i-th joint position; parents[i] is a 0-based index
    into the sequence itself. Entry 0 is the root (parents[0] == 0) and
    every later entry points strictly backwards. When has_terminal is set,
    the final entry is a training-target stop step: its parent index is its
    own position and its joint target repeats the root position.
    """

    positions: np.ndarray
    parents: np.ndarray
    has_terminal: bool = False
    source_indices: np.ndarray | None = None  # original joint index per real entry

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        if self.source_indices is not None:
            self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_joints(self) -> int:
        """Number of real joints (terminal step excluded)."""
        return len(self) - 1 if self.has_terminal else len(self)


def bfs_serialize(sk: Skeleton, sibling_rng: np.random.Generator | None = None,
                  max_joints: int = DEFAULT_MAX_JOINTS) -> JointSequence:
    """Flatten a valid skeleton breadth-first.

    Children of each node are visited in a uniformly random permutation when
    sibling_rng is given, otherwise in canonical order: lexicographic by
    (x, y, z) position with ties broken by original index.
    """
    report = validate_skeleton(sk, max_joints=max_joints)
    if not report.ok:
        raise InvalidSkeletonError(report)

    children = sk.children()
    order: list[int] = []
    parent_seq: list[int] = []
    seq_index = {}  # original joint index -> position in the sequence
    queue = deque([sk.root])
    seq_index[sk.root] = 0
    parent_of = {sk.root: 0}
    while queue:
        node = queue.popleft()
        order.append(node)
        parent_seq.append(parent_of[node])
        kids = children[node]
        if sibling_rng is not None:
            kids = [kids[i] for i in sibling_rng.permutation(len(kids))]
        else:
            pos = sk.joints[kids]
            kids = [kids[i] for i in np.lexsort((kids, pos[:, 2], pos[:, 1], pos[:, 0]))]
        for kid in kids:
            seq_index[kid] = len(seq_index)
            parent_of[kid] = seq_index[node]
            queue.append(kid)

    return JointSequence(sk.joints[order], np.array(parent_seq, dtype=np.int64),
                         source_indices=np.array(order, dtype=np.int64))


def sequence_to_skeleton(seq: JointSequence) -> Skeleton:
    """Rebuild a skeleton from a sequence; the terminal entry, if any, is dropped."""
    n = seq.num_joints
    if n < 1:
        raise MalformedSequenceError("nothing to build: sequence has no joints")
    parents = seq.parents[:n]
    if parents[0] != 0:
        raise MalformedSequenceError(f"first entry must be self-parented, got {int(parents[0])}")
    for i in range(1, n):
        if not 0 <= parents[i] < i:
            raise MalformedSequenceError(f"parent {int(parents[i])} at position {i} does not precede it")
    return Skeleton(seq.positions[:n].copy(), parents.copy())


def append_terminal(seq: JointSequence) -> JointSequence:
    """Append the stop-step training target: parent = self, position = root."""
    if seq.has_terminal:
        raise MalformedSequenceError("sequence already has a terminal step")
    if len(seq) < 1:
        raise MalformedSequenceError("cannot terminate an empty sequence")
    n = len(seq)
    positions = np.vstack([seq.positions, seq.positions[0:1]])
    parents = np.concatenate([seq.parents, [n]])
    return JointSequence(positions, parents, has_terminal=True,
                         source_indices=seq.source_indices)


def edge_multiset(sk: Skeleton, decimals: int = 9) -> tuple:
    """Order-free fingerprint of the tree: sorted (child position, parent position) pairs."""
    edges = []
    for parent, child in sk.bones():
        c = tuple(np.round(sk.joints[child], decimals))
        p = tuple(np.round(sk.joints[parent], decimals))
        edges.append((c, p))
    return tuple(sorted(edges))
