"""Evaluation suite: Chamfer family, joint matching, edit distance, skinning.

All metrics consume geometry and edge sets, never serialization order, so
they are invariant to sibling reordering on either side. Joint matching is
minimum-cost bipartite assignment with a distance threshold; the threshold
and the matching algorithm are protocol choices, so absolute numbers are
only comparable across tools that share them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .skeleton import Skeleton

PROTOCOL_NOTE = ("joint matching: hungarian assignment, threshold tau on euclidean distance; "
                 "edit distance over matched-label bone sets; values depend on these choices")


@dataclass(frozen=True)
class MetricConfig:
    tau: float = 0.1
    bone_density: int = 64
    tau_w: float = 0.05

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.bone_density < 2:
            raise ValueError("bone sampling density must be at least 2")
        if not 0.0 < self.tau_w < 1.0:
            raise ValueError("tau_w must lie in (0, 1)")


@dataclass
class SkeletonReport:
    iou: float
    precision: float
    recall: float
    cd_j2j: float
    cd_j2b: float
    cd_b2b: float
    edit_distance: int


def _points(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
    if arr.shape[0] == 0:
        raise ValueError(f"{name}: empty point set")
    return arr


def _one_sided(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(kernels.nearest_sqdist(a, b)).mean())


def chamfer_j2j(pred_joints, gt_joints) -> float:
    """Symmetric mean nearest-neighbor distance between two joint sets."""
    a = _points(pred_joints, "pred joints")
    b = _points(gt_joints, "gt joints")
    return 0.5 * _one_sided(a, b) + 0.5 * _one_sided(b, a)


def sample_bones(sk: Skeleton, density: int) -> np.ndarray:
    """Evenly spaced samples along every bone, endpoints included.

    Single-joint skeletons have no bones; callers fall back to joints.
    """
    bones = sk.bones()
    if len(bones) == 0:
        return np.zeros((0, 3))
    t = np.linspace(0.0, 1.0, density)
    a = sk.joints[bones[:, 0]]
    b = sk.joints[bones[:, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    return pts.reshape(-1, 3)


def _bone_samples_or_joints(sk: Skeleton, density: int) -> np.ndarray:
    pts = sample_bones(sk, density)
    return pts if len(pts) else sk.joints


def chamfer_j2b(pred: Skeleton, gt: Skeleton, config: MetricConfig = MetricConfig()) -> float:
    """Joints of one skeleton against sampled bones of the other, symmetrized."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty skeleton")
    gt_b = _bone_samples_or_joints(gt, config.bone_density)
    pred_b = _bone_samples_or_joints(pred, config.bone_density)
    return 0.5 * _one_sided(pred.joints, gt_b) + 0.5 * _one_sided(gt.joints, pred_b)


def chamfer_b2b(pred: Skeleton, gt: Skeleton, config: MetricConfig = MetricConfig()) -> float:
    """Symmetric chamfer between the two sampled bone point sets."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty skeleton")
    a = _bone_samples_or_joints(pred, config.bone_density)
    b = _bone_samples_or_joints(gt, config.bone_density)
    return 0.5 * _one_sided(a, b) + 0.5 * _one_sided(b, a)


def match_joints(pred_joints, gt_joints, tau: float = 0.1):
    """Hungarian matching on Euclidean distance with acceptance threshold tau.

    Returns (matching, iou, precision, recall); matching maps pred index ->
    gt index for pairs at distance <= tau only.
    """
    a = _points(pred_joints, "pred joints")
    b = _points(gt_joints, "gt joints")
    cost = np.sqrt(np.maximum(
        ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2), 0.0))
    rows, cols = linear_sum_assignment(cost)
    matching = {int(r): int(c) for r, c in zip(rows, cols) if cost[r, c] <= tau}
    tp = len(matching)
    precision = tp / a.shape[0]
    recall = tp / b.shape[0]
    iou = tp / (a.shape[0] + b.shape[0] - tp)
    return matching, iou, precision, recall


def _labeled_bones(sk: Skeleton, labels: dict[int, int]) -> tuple[list, int]:
    """Bones as unordered matched-label pairs; count of bones with unmatched ends."""
    labeled = []
    unmatched = 0
    for parent, child in sk.bones():
        lp = labels.get(int(parent))
        lc = labels.get(int(child))
        if lp is None or lc is None:
            unmatched += 1
        else:
            labeled.append(frozenset((lp, lc)))
    return labeled, unmatched


def edit_distance(pred: Skeleton, gt: Skeleton, matching: dict[int, int]) -> int:
    """Bone insertions plus deletions under the given joint matching.

    Bones are identified by the matched labels of their endpoints (gt joint
    indices label both sides); a bone touching an unmatched joint can never
    correspond to anything and always counts.
    """
    gt_labels = {i: i for i in range(len(gt))}
    pred_bones, pred_dangling = _labeled_bones(pred, matching)
    gt_bones, _ = _labeled_bones(gt, gt_labels)
    pred_set = set(pred_bones)
    gt_set = set(gt_bones)
    return len(pred_set - gt_set) + len(gt_set - pred_set) + pred_dangling


def connectivity_accuracy(pred_parents, gt_parents) -> float:
    """Fraction of non-root joints whose predicted parent matches ground truth."""
    pred = np.asarray(pred_parents, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_parents, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"parent arrays differ in length: {pred.shape} vs {gt.shape}")
    non_root = gt != np.arange(len(gt))
    if not non_root.any():
        return 1.0
    return float((pred[non_root] == gt[non_root]).mean())


def skinning_metrics(pred_weights, gt_weights, tau_w: float = 0.05):
    """(precision, recall, avg_l1) between two row-stochastic L x K matrices.

    A joint influences a point when its weight reaches tau_w; precision and
    recall compare the influential sets per point (empty/empty counts as
    perfect) and avg_l1 is the mean per-point L1 difference, in [0, 2].
    """
    w = np.asarray(pred_weights, dtype=np.float64)
    g = np.asarray(gt_weights, dtype=np.float64)
    if w.shape != g.shape or w.ndim != 2:
        raise ValueError(f"weight shapes differ: {w.shape} vs {g.shape}")
    pred_in = w >= tau_w
    gt_in = g >= tau_w
    inter = (pred_in & gt_in).sum(axis=1).astype(np.float64)
    p_cnt = pred_in.sum(axis=1)
    g_cnt = gt_in.sum(axis=1)
    precision = np.where(p_cnt > 0, inter / np.maximum(p_cnt, 1), (g_cnt == 0).astype(np.float64))
    recall = np.where(g_cnt > 0, inter / np.maximum(g_cnt, 1), (p_cnt == 0).astype(np.float64))
    avg_l1 = float(np.abs(w - g).sum(axis=1).mean())
    return float(precision.mean()), float(recall.mean()), avg_l1


def skeleton_report(pred: Skeleton, gt: Skeleton,
                    config: MetricConfig = MetricConfig()) -> SkeletonReport:
    """All skeleton-level metrics for one prediction/ground-truth pair."""
    matching, iou, precision, recall = match_joints(pred.joints, gt.joints, config.tau)
    return SkeletonReport(
        iou=iou,
        precision=precision,
        recall=recall,
        cd_j2j=chamfer_j2j(pred.joints, gt.joints),
        cd_j2b=chamfer_j2b(pred, gt, config),
        cd_b2b=chamfer_b2b(pred, gt, config),
        edit_distance=edit_distance(pred, gt, matching),
    )
