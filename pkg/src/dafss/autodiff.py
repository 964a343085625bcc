"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new ``Tensor`` and, when any input requires a
gradient, records a backward closure plus references to its parents. Calling
:func:`backward` on a scalar walks the graph once in reverse topological
order and accumulates gradients additively into every reachable leaf.

Conventions:
  * all data is float64, row-major, CPU-only;
  * gradients are NOT cleared implicitly -- callers zero them between steps;
  * :func:`stop_gradient` is the identity on values and detaches the result
    from the graph entirely.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from dafss.errors import (
    DegenerateBatchError,
    DomainError,
    GraphError,
    ShapeError,
)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Small amount of operator sugar; the module-level functions do the work.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """A leaf tensor that participates in optimization."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    """A leaf tensor that never receives a gradient."""
    return Tensor(data, requires_grad=False)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires [m,k] x [k,n], got {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g: np.ndarray) -> None:
        _accum(x, g.T)

    return _node(x.data.T.copy(), (x,), backward)


# ---------------------------------------------------------------------------
# normalizations and softmax
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = np.sum(g * s, axis=axis, keepdims=True)
        _accum(x, s * (g - inner))

    return _node(s, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def backward(g: np.ndarray) -> None:
        _accum(x, g - s * np.sum(g, axis=axis, keepdims=True))

    return _node(out_data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects [t,d], got shape {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match d={d}")
    mu = np.mean(x.data, axis=1, keepdims=True)
    var = np.var(x.data, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        _accum(gamma, np.sum(g * xhat, axis=0))
        _accum(beta, np.sum(g, axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = np.mean(dxhat, axis=1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out_data, (x, gamma, beta), backward)


class BatchNormState:
    """Running statistics for batch normalization (outside the graph)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = float(momentum)
        self.eps = float(eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-column normalization; train mode uses (and folds in) batch stats."""
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects [t,d], got shape {x.shape}")
    t, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match d={d}")
    eps = state.eps

    if mode == "train":
        if t < 2:
            raise DegenerateBatchError(f"batch_norm train mode needs >= 2 rows, got {t}")
        mu = np.mean(x.data, axis=0)
        var = np.var(x.data, axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        _accum(gamma, np.sum(g * xhat, axis=0))
        _accum(beta, np.sum(g, axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            if mode == "train":
                m1 = np.mean(dxhat, axis=0)
                m2 = np.mean(dxhat * xhat, axis=0)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
            else:
                _accum(x, dxhat * inv)

    return _node(out_data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g: np.ndarray) -> None:
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * e)

    return _node(e, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive entry")

    def backward(g: np.ndarray) -> None:
        _accum(x, g / x.data)

    return _node(np.log(x.data), (x,), backward)


def safe_log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); the gradient is zero wherever the floor binds."""
    clipped = np.maximum(x.data, floor)
    above = x.data > floor

    def backward(g: np.ndarray) -> None:
        _accum(x, np.where(above, g / clipped, 0.0))

    return _node(np.log(clipped), (x,), backward)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")

    def backward(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * c)

    return _node(x.data * c, (x,), backward)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of a [t,d] matrix."""
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec requires [t,d] + [d], got {x.shape} and {v.shape}")

    def backward(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(v, np.sum(g, axis=0))

    return _node(x.data + v.data, (x, v), backward)


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of a [t,d] matrix by a length-d vector."""
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"mul_rowvec requires [t,d] * [d], got {x.shape} and {v.shape}")

    def backward(g: np.ndarray) -> None:
        _accum(x, g * v.data)
        _accum(v, np.sum(g * x.data, axis=0))

    return _node(x.data * v.data, (x, v), backward)


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].data.ndim
    if axis >= ndim or axis < -ndim:
        raise ShapeError(f"concat axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(r != o for i, (r, o) in enumerate(zip(ref, other)) if i != axis):
            raise ShapeError(f"concat shapes incompatible along axis {axis}: {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(out_data, tuple(tensors), backward)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a matrix as a new tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got shape {x.shape}")
    if not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols range [{lo},{hi}) invalid for {x.shape[1]} columns")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accum(x, full)

    return _node(x.data[:, lo:hi].copy(), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, float(g)))

    return _node(np.asarray(np.sum(x.data)), (x,), backward)


def sum_rows(x: Tensor) -> Tensor:
    """Column sums of a [t,d] matrix, shape [d]."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a matrix, got shape {x.shape}")

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.sum(x.data, axis=0), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``.

    Zero-norm rows are guarded at ``eps``: their similarities come out 0 and
    the norm factor is treated as a constant there.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows requires [m,d] and [n,d], got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    ca = np.maximum(na, eps)
    cb = np.maximum(nb, eps)
    denom = np.outer(ca, cb)
    c = (a.data @ b.data.T) / denom

    def backward(g: np.ndarray) -> None:
        gd = g / denom
        if a.requires_grad:
            da = gd @ b.data
            corr = np.sum(g * c, axis=1, keepdims=True) * a.data / (ca**2)[:, None]
            da -= np.where((na > eps)[:, None], corr, 0.0)
            _accum(a, da)
        if b.requires_grad:
            db = gd.T @ a.data
            corr = np.sum(g * c, axis=0)[:, None] * b.data / (cb**2)[:, None]
            db -= np.where((nb > eps)[:, None], corr, 0.0)
            _accum(b, db)

    return _node(c, (a, b), backward)


# ---------------------------------------------------------------------------
# graph control
# ---------------------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; the result carries no graph history."""
    return Tensor(x.data)


def _toposort(root: Tensor) -> list:
    order: list = []
    state: dict = {}  # id -> 1 while on stack, 2 when finished
    stack: list = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if not parent.requires_grad:
                continue
            s = state.get(id(parent))
            if s == 1:
                raise GraphError("cycle detected in differentiation graph")
            if s is None:
                state[id(parent)] = 1
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from every reachable leaf parameter (requires_grad, no
    parents) to its accumulated gradient array. Calling backward twice on
    the same loss tensor is an error; gradients from separate backward
    calls on shared leaves accumulate unless explicitly zeroed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already called on this graph")
    if not loss.requires_grad:
        loss._done = True
        return {}

    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._done = True
    return {n: n.grad for n in order if n._backward is None and n.grad is not None}


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
