"""Neural net building blocks on the Tensor autograd: fused ops, parameters.

Fused ops (softmax family, layer norm, gelu) carry hand-derived backward
closures; everything else composes Tensor primitives.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, custom_op

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ParamStore:
    """Named trainable tensors; the single source of truth for model weights."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def num_weights(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            t = self._params[name]
            arr = np.ascontiguousarray(arr, dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def add_dense(store: ParamStore, rng: np.random.Generator, name: str,
              fan_in: int, fan_out: int, zero_init: bool = False) -> None:
    w = np.zeros((fan_in, fan_out)) if zero_init else glorot_uniform(rng, fan_in, fan_out)
    store.add(name + ".w", w)
    store.add(name + ".b", np.zeros(fan_out))


def dense(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ store[name + ".w"] + store[name + ".b"]


def gelu(x: Tensor) -> Tensor:
    """Exact gaussian error linear unit: 0.5 x (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return g * (cdf + xd * pdf)

    return custom_op(out, (x,), (back,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return custom_op(y, (x,), (back,))


def masked_softmax(x: Tensor, allow: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to allowed entries; fully masked rows come out zero."""
    allow = np.broadcast_to(np.asarray(allow, dtype=bool), x.shape)
    neg = np.where(allow, x.data, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(allow, np.exp(neg - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0.0, s, 1.0)

    def back(g):
        return np.where(allow, y * (g - (g * y).sum(axis=axis, keepdims=True)), 0.0)

    return custom_op(y.astype(x.dtype, copy=False), (x,), (back,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return custom_op(out, (x,), (back,))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; affine terms are optional (modulated norms skip them)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    gd = gamma.data if gamma is not None else None

    def back_x(g):
        dxhat = g * gd if gd is not None else g
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * term

    parents: list[Tensor] = [x]
    fns: list = [back_x]
    out_data = xhat
    if gamma is not None:
        out_data = out_data * gd
        parents.append(gamma)
        fns.append(lambda g: (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
    if beta is not None:
        out_data = out_data + beta.data
        parents.append(beta)
        fns.append(lambda g: g.sum(axis=tuple(range(g.ndim - 1))))
    return custom_op(out_data.astype(x.dtype, copy=False), tuple(parents), tuple(fns))


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
              allow: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (B, T, D) projections.

    allow is a boolean matrix broadcastable to (B, heads, T_q, T_k); True
    marks key positions each query may attend to.
    """
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if allow is None:
        probs = softmax(scores, axis=-1)
    else:
        allow = np.asarray(allow, dtype=bool)
        while allow.ndim < 4:
            allow = allow[None]
        probs = masked_softmax(scores, allow, axis=-1)
    return merge_heads(probs @ vh)
