"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() runs
the closures in reverse topological order and accumulates into .grad. Ops are
dtype-generic: float32 graphs stay float32, float64 stays float64, so the
same code serves fast training and high-precision gradient checking.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fns: tuple = ()

    # ---- basic protocol -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # ---- autodiff core ---------------------------------------------------

    def backward(self) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no grad graph")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in visited:
                    continue
                visited.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, 0))
            else:
                topo.append(node)

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, fn in zip(node._parents, node._grad_fns):
                if fn is None or not parent.requires_grad:
                    continue
                g = fn(node.grad)
                # grads are never mutated in place, so views are safe to hold
                parent.grad = g if parent.grad is None else parent.grad + g

    # ---- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out = custom_op(self.data + other.data, (self, other), (
            lambda g: _unbroadcast(g, self.shape),
            lambda g: _unbroadcast(g, other.shape),
        ))
        return out

    __radd__ = __add__

    def __neg__(self):
        return custom_op(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        return custom_op(self.data - other.data, (self, other), (
            lambda g: _unbroadcast(g, self.shape),
            lambda g: _unbroadcast(-g, other.shape),
        ))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        return custom_op(self.data * other.data, (self, other), (
            lambda g: _unbroadcast(g * other.data, self.shape),
            lambda g: _unbroadcast(g * self.data, other.shape),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        return custom_op(self.data / other.data, (self, other), (
            lambda g: _unbroadcast(g / other.data, self.shape),
            lambda g: _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
        ))

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        return custom_op(self.data ** e, (self,),
                         (lambda g: g * e * self.data ** (e - 1.0),))

    def __matmul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        return custom_op(a @ b, (self, other), (
            lambda g: _unbroadcast(g @ np.swapaxes(b, -1, -2), self.shape),
            lambda g: _unbroadcast(np.swapaxes(a, -1, -2) @ g, other.shape),
        ))

    def __getitem__(self, idx):
        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return full
        return custom_op(self.data[idx], (self,), (back,))

    # ---- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return custom_op(self.data.reshape(shape), (self,),
                         (lambda g: g.reshape(self.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.ndim - 1, -1, -1))
        inverse = tuple(int(i) for i in np.argsort(axes))
        return custom_op(self.data.transpose(axes), (self,),
                         (lambda g: g.transpose(inverse),))

    # ---- reductions and elementwise functions -------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def back(g):
            if axis is None:
                return np.broadcast_to(g, self.shape).astype(self.dtype, copy=False)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return np.broadcast_to(g, self.shape)
        return custom_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), (back,))

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self):
        out_data = np.exp(self.data)
        return custom_op(out_data, (self,), (lambda g: g * out_data,))

    def log(self):
        return custom_op(np.log(self.data), (self,), (lambda g: g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return custom_op(out_data, (self,), (lambda g: g * (0.5 / out_data),))

    def clip(self, lo: float, hi: float):
        """Gradient passes inside [lo, hi], zero outside."""
        inside = (self.data >= lo) & (self.data <= hi)
        return custom_op(np.clip(self.data, lo, hi), (self,),
                         (lambda g: g * inside,))


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def custom_op(data: np.ndarray, parents: tuple, grad_fns: tuple) -> Tensor:
    """Create an op node: grad_fns[i](upstream_grad) -> gradient for parents[i]."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fns = grad_fns
    return out


def concatenate(tensors: list, axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]
        def back(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            return g[tuple(index)]
        return back

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return custom_op(data, tuple(tensors), tuple(make_back(i) for i in range(len(tensors))))


def stack(tensors: list, axis: int = 0) -> Tensor:
    def make_back(i):
        def back(g):
            return np.take(g, i, axis=axis)
        return back
    data = np.stack([t.data for t in tensors], axis=axis)
    return custom_op(data, tuple(tensors), tuple(make_back(i) for i in range(len(tensors))))
