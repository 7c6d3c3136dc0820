"""Numba-compiled hot kernels; signatures match _kernels_numpy exactly."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def nearest_sqdist(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
        out[i] = best
    return out


@njit(cache=True)
def point_segment_dist(points, seg_a, seg_b):
    n = points.shape[0]
    m = seg_a.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    for j in range(m):
        abx = seg_b[j, 0] - seg_a[j, 0]
        aby = seg_b[j, 1] - seg_a[j, 1]
        abz = seg_b[j, 2] - seg_a[j, 2]
        len2 = abx * abx + aby * aby + abz * abz
        for i in range(n):
            apx = points[i, 0] - seg_a[j, 0]
            apy = points[i, 1] - seg_a[j, 1]
            apz = points[i, 2] - seg_a[j, 2]
            if len2 > 0.0:
                t = (apx * abx + apy * aby + apz * abz) / len2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            cx = seg_a[j, 0] + t * abx
            cy = seg_a[j, 1] + t * aby
            cz = seg_a[j, 2] + t * abz
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            out[i, j] = np.sqrt(dx * dx + dy * dy + dz * dz)
    return out


@njit(cache=True)
def lbs_blend(points, weights, rot, trans):
    n = points.shape[0]
    k = rot.shape[0]
    out = np.empty_like(points)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        ax, ay, az = px, py, pz
        for j in range(k):
            w = weights[i, j]
            mx = rot[j, 0, 0] * px + rot[j, 0, 1] * py + rot[j, 0, 2] * pz
            my = rot[j, 1, 0] * px + rot[j, 1, 1] * py + rot[j, 1, 2] * pz
            mz = rot[j, 2, 0] * px + rot[j, 2, 1] * py + rot[j, 2, 2] * pz
            ax += w * (mx - px + trans[j, 0])
            ay += w * (my - py + trans[j, 1])
            az += w * (mz - pz + trans[j, 2])
        out[i, 0] = ax
        out[i, 1] = ay
        out[i, 2] = az
    return out
