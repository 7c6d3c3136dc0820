"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def gradcheck(build_loss, arrays: list[np.ndarray], eps: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar loss.

    build_loss takes one Tensor per input array and returns a scalar Tensor.
    Inputs should be float64 for the differences to be trustworthy. Returns
    the relative error: max |analytic - numeric| over all elements, divided
    by the largest gradient magnitude seen (floored at 1e-8).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    if loss.data.size != 1:
        raise ValueError("gradcheck needs a scalar loss")
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value_at(inputs):
        return float(build_loss(*[Tensor(a) for a in inputs]).data)

    max_diff = 0.0
    max_mag = 0.0
    for which, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[which].reshape(-1)[i] += eps
            hi = value_at(bumped)
            bumped[which].reshape(-1)[i] -= 2.0 * eps
            lo = value_at(bumped)
            flat[i] = (hi - lo) / (2.0 * eps)
        diff = np.abs(np.asarray(analytic[which], dtype=np.float64) - numeric)
        max_diff = max(max_diff, float(diff.max(initial=0.0)))
        max_mag = max(max_mag, float(np.abs(analytic[which]).max(initial=0.0)),
                      float(np.abs(numeric).max(initial=0.0)))
    return max_diff / max(max_mag, 1e-8)
