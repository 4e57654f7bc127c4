"""Dense float64 tensors with reverse-mode gradients.

The Tensor wraps a row-major numpy float64 array and records a backward
closure per op; gradients are propagated by a topological sweep from a
scalar loss.  Every op validates finiteness of its output so NaN/Inf
surface immediately as NumericError rather than silently poisoning a
training run.  Shapes are whatever numpy reports; broadcasting is
supported only for the patterns actually used here (bias rows, pooled
context tokens, per-sample scalars).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction of op outputs --------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basics -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.data.shape}")
        topo, seen = [], set()

        def visit(t):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    topo.append(node)
                    continue
                if id(node) in seen or not node.requires_grad:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node._parents:
                    stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        y = self.data + other.data

        def bwd(g):
            self._maybe(g, _unbroadcast(g, self.data.shape))
            other._maybe(g, _unbroadcast(g, other.data.shape))

        return Tensor._make(y, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        y = self.data * other.data

        def bwd(g):
            self._maybe(g, _unbroadcast(g * other.data, self.data.shape))
            other._maybe(g, _unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(y, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def _maybe(self, _g, contrib):
        if self.requires_grad:
            self._accum(contrib)

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
        y = np.matmul(a, b)

        def bwd(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                self._accum(_unbroadcast(ga, a.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
                other._accum(_unbroadcast(gb, b.shape))

        return Tensor._make(y, (self, other), bwd)

    def __getitem__(self, idx):
        y = self.data[idx]

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[idx] = g
                self._accum(full)

        return Tensor._make(y, (self,), bwd)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        orig = self.data.shape
        y = self.data.reshape(shape)

        def bwd(g):
            self._maybe(g, g.reshape(orig))

        return Tensor._make(y, (self,), bwd)

    def transpose(self, *axes):
        inv = np.argsort(axes)

        def bwd(g):
            self._maybe(g, g.transpose(inv))

        return Tensor._make(self.data.transpose(axes), (self,), bwd)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        y = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._make(y, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    # -- elementwise nonlinearities ---------------------------------------

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g):
            self._maybe(g, g * y * (1.0 - y))

        return Tensor._make(y, (self,), bwd)

    def tanh(self):
        y = np.tanh(self.data)

        def bwd(g):
            self._maybe(g, g * (1.0 - y * y))

        return Tensor._make(y, (self,), bwd)

    def gelu(self):
        # tanh approximation; smooth everywhere, which keeps central
        # differences honest in grad_check
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        u = c * (x + 0.044715 * x**3)
        t = np.tanh(u)
        y = 0.5 * x * (1.0 + t)

        def bwd(g):
            du = c * (1.0 + 3 * 0.044715 * x**2)
            dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            self._maybe(g, g * dy)

        return Tensor._make(y, (self,), bwd)

    def sqrt(self):
        if np.any(self.data < 0):
            raise NumericError("sqrt of negative value")
        y = np.sqrt(self.data)

        def bwd(g):
            self._maybe(g, g * 0.5 / np.maximum(y, 1e-300))

        return Tensor._make(y, (self,), bwd)

    # -- fused row ops (numba-backed kernels) ------------------------------

    def softmax(self):
        """Softmax over the last axis."""
        shp = self.data.shape
        x2 = np.ascontiguousarray(self.data.reshape(-1, shp[-1]))
        y2 = kernels.softmax_fwd(x2)

        def bwd(g):
            if self.requires_grad:
                g2 = np.ascontiguousarray(g.reshape(-1, shp[-1]))
                self._accum(kernels.softmax_bwd(y2, g2).reshape(shp))

        return Tensor._make(y2.reshape(shp), (self,), bwd)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    y = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(y, tuple(tensors), bwd)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer index array."""
    y = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accum(full)

    return Tensor._make(y, (table,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis {d}"
        )
    shp = x.data.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, xhat, inv = kernels.layernorm_fwd(x2, gain.data, bias.data, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = kernels.layernorm_bwd(g2, xhat, inv, gain.data)
        x._maybe(g, gx.reshape(shp))
        gain._maybe(g, ggain)
        bias._maybe(g, gbias)

    return Tensor._make(y2.reshape(shp), (x, gain, bias), bwd)


@dataclass
class Param:
    """Named model parameter; frozen params take no gradient and never move."""

    id: str
    value: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.value.requires_grad = self.trainable


class ParamSet:
    """Ordered collection of Params with unique ids."""

    def __init__(self):
        self._by_id: dict[str, Param] = {}

    def add(self, param: Param) -> Param:
        if param.id in self._by_id:
            raise ShapeError(f"duplicate param id {param.id!r}")
        self._by_id[param.id] = param
        return param

    def new(self, pid: str, data, trainable: bool = True) -> Param:
        return self.add(Param(pid, Tensor(data), trainable))

    def __getitem__(self, pid: str) -> Param:
        return self._by_id[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._by_id

    def __iter__(self):
        return iter(self._by_id.values())

    def __len__(self):
        return len(self._by_id)

    def ids(self):
        return list(self._by_id)

    def trainable(self):
        return [p for p in self if p.trainable]

    def zero_grad(self):
        for p in self:
            p.value.grad = None
