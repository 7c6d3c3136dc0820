"""Pure-numpy reference implementations of the hot kernels.

Broadcast work is blocked so the temporary (block, m, 3) buffers stay small
even when both point sets are large.
"""

from __future__ import annotations

import numpy as np

_BLOCK = 512


def nearest_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each row of a (n, 3) to its nearest row of b (m, 3)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(a.shape[0], dtype=np.float64)
    for start in range(0, a.shape[0], _BLOCK):
        blk = a[start:start + _BLOCK]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[start:start + _BLOCK] = d2.min(axis=1)
    return out


def point_segment_dist(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """(n, m) Euclidean distances from points (n, 3) to segments [seg_a, seg_b] (m, 3)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    seg_a = np.ascontiguousarray(seg_a, dtype=np.float64)
    seg_b = np.ascontiguousarray(seg_b, dtype=np.float64)
    ab = seg_b - seg_a
    ab_len2 = (ab ** 2).sum(axis=1)
    out = np.empty((points.shape[0], seg_a.shape[0]), dtype=np.float64)
    for start in range(0, points.shape[0], _BLOCK):
        blk = points[start:start + _BLOCK]
        ap = blk[:, None, :] - seg_a[None, :, :]
        t = np.einsum("nmj,mj->nm", ap, ab)
        with np.errstate(invalid="ignore"):
            t = np.where(ab_len2 > 0.0, t / np.where(ab_len2 > 0.0, ab_len2, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        closest = seg_a[None, :, :] + t[:, :, None] * ab[None, :, :]
        out[start:start + _BLOCK] = np.sqrt(((blk[:, None, :] - closest) ** 2).sum(axis=2))
    return out


def lbs_blend(points: np.ndarray, weights: np.ndarray, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Linear blend skinning in anchor form: p + sum_k w_k (R_k p + t_k - p).

    The anchor form keeps identity transforms bit-exact regardless of how the
    weight rows round, which the rest-pose contract relies on.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    rot = np.ascontiguousarray(rot, dtype=np.float64)
    trans = np.ascontiguousarray(trans, dtype=np.float64)
    out = np.empty_like(points)
    for start in range(0, points.shape[0], _BLOCK):
        blk = points[start:start + _BLOCK]
        w = weights[start:start + _BLOCK]
        moved = np.einsum("kij,lj->lki", rot, blk)        # (blk, K, 3)
        delta = moved - blk[:, None, :] + trans[None, :, :]
        out[start:start + _BLOCK] = blk + np.einsum("lk,lki->li", w, delta)
    return out
