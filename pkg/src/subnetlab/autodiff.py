"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a fresh node holding the forward value, the parent
nodes, and a closure that scatters the incoming gradient back to them.
Calling backward() on a scalar node topologically sorts the graph and
accumulates gradients leaf-ward, micrograd style.

The engine is dtype-generic: training graphs run in float32 while
grad_check promotes the same code to float64 for finite-difference
verification. Explicit reductions (sums, means, softmax denominators,
layer-norm statistics) always accumulate in float64 regardless of the
working dtype.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .params import ParameterTree

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """backward() was called a second time on the same loss node."""


class Tensor:
    """A graph node: numpy value plus enough bookkeeping to backprop."""

    __slots__ = ("data", "grad", "path", "_parents", "_grad_fn", "_registry", "_consumed")

    def __init__(self, data, parents=(), grad_fn=None, path=None, registry=None, op="leaf",
                 check=True):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite output of op {op!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.path = path
        self._parents = parents
        self._grad_fn = grad_fn
        self._registry = registry
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        tag = f" path={self.path!r}" if self.path else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operators cover the arithmetic the model code reads naturally;
    # everything else is a module-level function.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    """Wrap raw data as a graph constant (no path, gradient discarded)."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, op="constant")


def make_leaves(params: ParameterTree) -> dict[str, Tensor]:
    """Bind a parameter tree to fresh leaf nodes sharing one registry.

    backward() reports a gradient for every registered leaf, zeros for the
    ones the loss never touched.
    """
    registry: dict[str, Tensor] = {}
    for path, value in params.items():
        # parameters were validated finite when stored in the tree
        registry[path] = Tensor(value, path=path, registry=registry, check=False)
    return registry


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    dtype = g.dtype
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64).astype(dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(dtype)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(a.data + b.data, (a, b), grad_fn, op="add")


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(a.data - b.data, (a, b), grad_fn, op="sub")


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def grad_fn(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(a.data * b.data, (a, b), grad_fn, op="mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        a._accumulate(g * c)

    return Tensor(a.data * c, (a,), grad_fn, op="scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product (ranks of a and b must match)."""

    def grad_fn(g):
        a._accumulate(np.matmul(g, b.data.swapaxes(-1, -2)))
        b._accumulate(np.matmul(a.data.swapaxes(-1, -2), g))

    return Tensor(np.matmul(a.data, b.data), (a, b), grad_fn, op="matmul")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth everywhere, safe for finite differences."""
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        a._accumulate(g * deriv.astype(g.dtype))

    return Tensor(out.astype(x.dtype), (a,), grad_fn, op="gelu")


def slice_rows(a: Tensor, n: int) -> Tensor:
    """First n rows of a 2-D tensor; backward scatters into those rows."""

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        a._accumulate(full)

    return Tensor(a.data[:n].copy(), (a,), grad_fn, op="slice_rows")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def grad_fn(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), (a,), grad_fn, op="reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return Tensor(np.ascontiguousarray(a.data.transpose(axes)), (a,), grad_fn, op="transpose")


def sum_all(a: Tensor) -> Tensor:
    def grad_fn(g):
        a._accumulate(np.full_like(a.data, float(g)))

    total = a.data.sum(dtype=np.float64)
    return Tensor(np.asarray(total, dtype=a.data.dtype), (a,), grad_fn, op="sum_all")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mean = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = x.data.astype(np.float64) - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (centered * inv).astype(x.data.dtype)
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        g64 = g.astype(np.float64)
        gain._accumulate(_unbroadcast((g * xhat).astype(g.dtype), gain.data.shape))
        bias._accumulate(_unbroadcast(g, bias.data.shape))
        gx = g64 * gain.data.astype(np.float64)
        # d/dx of (x - mean) * inv, with inv depending on x through var
        xhat64 = centered * inv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat64 * (gx * xhat64).mean(axis=-1, keepdims=True))
        x._accumulate(dx.astype(g.dtype))

    return Tensor(out.astype(x.data.dtype), (x, gain, bias), grad_fn, op="layer_norm")


def softmax_last(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    s = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def grad_fn(g):
        dot = (g.astype(np.float64) * s).sum(axis=-1, keepdims=True)
        a._accumulate((s * (g - dot)).astype(g.dtype))

    return Tensor(s, (a,), grad_fn, op="softmax")


def log_softmax_last(a: Tensor) -> Tensor:
    x = a.data
    shifted = x.astype(np.float64) - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = (shifted - lse).astype(x.dtype)
    soft = np.exp(shifted - lse)

    def grad_fn(g):
        total = g.sum(axis=-1, keepdims=True, dtype=np.float64)
        a._accumulate((g - (soft * total)).astype(g.dtype))

    return Tensor(out, (a,), grad_fn, op="log_softmax")


def from_loss_and_grad(parent: Tensor, loss: float, grad_wrt_parent: np.ndarray, op: str) -> Tensor:
    """Adopt an externally computed scalar (loss, analytic gradient) pair as a node."""
    grad_arr = np.asarray(grad_wrt_parent, dtype=parent.data.dtype)

    def grad_fn(g):
        parent._accumulate(float(g) * grad_arr)

    return Tensor(np.asarray(loss, dtype=parent.data.dtype), (parent,), grad_fn, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> ParameterTree:
    """Reverse-accumulate gradients of a scalar loss.

    Returns a tree with one entry per registered leaf (zeros where the loss
    does not depend on the leaf). A loss node can only be consumed once.
    """
    if loss._consumed:
        raise GraphConsumedError("backward() already called on this loss node")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    loss._consumed = True

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    registry: dict[str, Tensor] | None = None
    for node in reversed(order):
        if node._registry is not None:
            registry = node._registry
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)

    grads = ParameterTree()
    if registry is not None:
        for path, leaf in registry.items():
            grads[path] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads


def grad_check(params: ParameterTree, loss_fn: Callable[[ParameterTree], Tensor],
               epsilon: float,
               value_fn: Callable[[ParameterTree], float] | None = None) -> float:
    """Max scaled difference between backward() and central finite differences.

    The whole computation is promoted to float64; every parameter entry is
    perturbed by ±epsilon. The returned figure is
    max |analytic - numeric| / max(1, |analytic|, |numeric|).

    value_fn, when given, evaluates the same loss without building a graph
    (the check itself guarantees the two paths agree); by default the
    perturbed losses come from loss_fn.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if value_fn is None:
        value_fn = lambda p: float(loss_fn(p).data)
    p64 = params.astype(np.float64)
    p64.config = params.config
    analytic = backward(loss_fn(p64))

    worst = 0.0
    for path in p64.paths():
        flat = p64[path].reshape(-1)
        a_flat = analytic[path].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value_fn(p64)
            flat[i] = orig - epsilon
            down = value_fn(p64)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst
