"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a closure computing the
vector-Jacobian product. Node ids come from a global monotone counter, so the
inputs of a node always carry smaller ids than the node itself and a reverse
sweep in descending id order is a valid topological order.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()

MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyLossError(ValueError):
    """Raised when every row of a cross-entropy is ignored."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "id", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.id = next(_ids)
        self.op = op

    # -- basic protocol ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor, approximate: str = "tanh") -> Tensor:
    """Gaussian error linear unit.

    ``approximate="tanh"`` is the BERT-style approximation (the default used
    throughout); ``"none"`` evaluates ``x * Phi(x)`` with the exact error
    function.
    """
    x = a.data
    if approximate == "tanh":
        u = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(u)
        out = 0.5 * x * (1.0 + t)

        def bw(g):
            du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    elif approximate == "none":
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        out = x * cdf

        def bw(g):
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + x * pdf),)

    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    return _node(out, (a,), bw, "gelu")


def identity(a: Tensor) -> Tensor:
    return a


# -- shape ops -------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis, keepdims), 1.0 / float(n))


def take(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0 (embedding lookup and row selection)."""
    idx = np.asarray(index, dtype=np.int64)
    out = a.data[idx]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _node(out, (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tensors, bw, "concat")


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation and probabilities ---------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm: hidden size {h} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def log_softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = -100) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Rows whose target equals ``ignore_index`` are skipped. Raises
    :class:`EmptyLossError` when nothing is left to average.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, c] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {t.shape[0]} targets")
    keep = np.ones(n, dtype=bool) if ignore_index is None else t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every row is ignored")
    rows = np.flatnonzero(keep)
    tk = t[rows]
    if tk.min() < 0 or tk.max() >= c:
        raise ValueError(f"cross_entropy: targets must lie in [0, {c})")
    logp = log_softmax_array(logits.data[rows])
    loss = -logp[np.arange(count), tk].mean()

    def bw(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(logp)
        p[np.arange(count), tk] -= 1.0
        grad[rows] = p * (float(g) / count)
        return (grad,)

    return _node(np.asarray(loss), (logits,), bw, "cross_entropy")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# -- reverse sweep ---------------------------------------------------------------
def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the recorded graph.

    Writes ``.grad`` on every reachable leaf with ``requires_grad`` (replacing
    any previous value) and returns the same mapping.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.id in nodes or not node.requires_grad:
            continue
        nodes[node.id] = node
        stack.extend(node._parents)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient oracle -------------------------------------------------------------
def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    *,
    max_coords: int = 256,
    full_sweep: int = 64,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    Tensors with at most ``full_sweep`` elements are checked on every
    coordinate; larger tensors on ``max_coords`` coordinates drawn with
    ``seed``. Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_size = p.data.size
        if flat_size <= full_sweep:
            coords = np.arange(flat_size)
        else:
            coords = np.sort(rng.choice(flat_size, size=min(max_coords, flat_size), replace=False))
        base = p.data.copy()
        for c in coords:
            bumped = base.copy().reshape(-1)
            bumped[c] += step
            p.data = bumped.reshape(base.shape)
            fp = float(f().data)
            bumped[c] -= 2 * step
            p.data = bumped.reshape(base.shape)
            fm = float(f().data)
            p.data = base
            num = (fp - fm) / (2 * step)
            ana = float(ga.reshape(-1)[c])
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, err)
    return worst
