"""Dispatch layer for the hot numeric kernels.

Backend selection, checked once at import:

  AUTORIG_NUMBA=1   require the numba kernels (ImportError if numba is missing)
  AUTORIG_NUMBA=0   force the pure-numpy reference path
  unset             numba when importable, numpy otherwise

Both backends implement identical math; `set_backend` switches at runtime
(tests and the benchmark use it). Kernel inputs/outputs are float64.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_numpy

_BACKENDS = {"numpy": _kernels_numpy}
_active = "numpy"


def _try_load_numba() -> bool:
    if "numba" in _BACKENDS:
        return True
    try:
        from . import _kernels_numba
    except ImportError:
        return False
    _BACKENDS["numba"] = _kernels_numba
    return True


def set_backend(name: str) -> None:
    global _active
    if name == "numba" and not _try_load_numba():
        raise ImportError("numba backend requested but numba is not importable")
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active = name


def active_backend() -> str:
    return _active


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def nearest_sqdist(a, b):
    """Squared distance from each row of a (n, 3) to its nearest row of b (m, 3)."""
    return _BACKENDS[_active].nearest_sqdist(_f64(a), _f64(b))


def point_segment_dist(points, seg_a, seg_b):
    """(n, m) Euclidean distances from points (n, 3) to segments [seg_a, seg_b]."""
    return _BACKENDS[_active].point_segment_dist(_f64(points), _f64(seg_a), _f64(seg_b))


def lbs_blend(points, weights, rot, trans):
    """Linear blend skinning in anchor form; identity transforms are bit-exact."""
    return _BACKENDS[_active].lbs_blend(_f64(points), _f64(weights), _f64(rot), _f64(trans))


_flag = os.environ.get("AUTORIG_NUMBA", "").strip()
if _flag == "1":
    set_backend("numba")
elif _flag != "0" and _try_load_numba():
    _active = "numba"
