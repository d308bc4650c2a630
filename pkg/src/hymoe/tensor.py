"""Dense float64 tensors with reverse-mode automatic differentiation.

Thin tape-based autograd over numpy arrays. Arrays are row-major float64
throughout; every op checks shapes eagerly and raises ``ShapeError`` with both
offending shapes in the message. Nodes that no gradient can reach carry no
tape, so inference-only passes build no graph.

Gradient verification never trusts this tape: ``finite_diff_grad`` is an
independent central-difference oracle that perturbs raw parameter storage.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class Tensor:
    """A float64 array plus an optional position on the autodiff tape.

    Treat instances as immutable after construction: ops return new tensors,
    and mutating ``data`` in place invalidates any graph that references it
    (``finite_diff_grad`` does so deliberately and restores the original).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic is defined by the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named tensor with a trainable flag; the unit of the freeze policy.

    Gradients accumulate on ``value`` only when ``trainable`` is true.
    """

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.value = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def copy(self, name: str | None = None, trainable: bool | None = None) -> "Parameter":
        return Parameter(
            self.name if name is None else name,
            self.data.copy(),
            self.trainable if trainable is None else trainable,
        )

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an op result; drop the tape entirely when no parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(parent: Tensor, g: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = constant(a)
    return _node(-a.data, (a,), lambda g: _accum(a, -g))


def power(a: Tensor, exponent: float) -> Tensor:
    a = constant(a)
    out_data = a.data**exponent

    def backward(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = constant(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = constant(a)

    def backward(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); the smooth nonlinearity used by every FFN and expert."""
    a = constant(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: _accum(a, g.T))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _node(out_data, (a,), backward)


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax_axis(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis``: shift by the max, exponentiate, normalize."""
    a = constant(a)
    axis_n = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis_n, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis_n, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis_n, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _node(out_data, (a,), backward)


def log_softmax_axis(a: Tensor, axis: int) -> Tensor:
    a = constant(a)
    axis_n = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis_n, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis_n, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        soft = np.exp(out_data)
        _accum(a, g - soft * g.sum(axis=axis_n, keepdims=True))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# indexing, dispatch, and layout


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    a = constant(a)
    rows = np.asarray(rows, dtype=np.int64)
    out_data = a.data[rows]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, rows, g)
            _accum(a, ga)

    return _node(out_data, (a,), backward)


def scatter_rows(values: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Accumulate value rows into a zero matrix of ``num_rows`` rows."""
    values = constant(values)
    rows = np.asarray(rows, dtype=np.int64)
    out_data = np.zeros((num_rows,) + values.data.shape[1:], dtype=np.float64)
    np.add.at(out_data, rows, values.data)

    def backward(g):
        _accum(values, g[rows])

    return _node(out_data, (values,), backward)


def take_along_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row column gather: out[r, j] = a[r, idx[r, j]]."""
    a = constant(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_along_cols: rows disagree, {a.shape} vs index {idx.shape}")
    out_data = np.take_along_axis(a.data, idx, axis=1)
    rows = np.broadcast_to(np.arange(a.shape[0])[:, None], idx.shape)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, idx), g)
            _accum(a, ga)

    return _node(out_data, (a,), backward)


def scatter_cols(values: Tensor, idx: np.ndarray, num_cols: int) -> Tensor:
    """Inverse of take_along_cols: place per-row values at per-row columns."""
    values = constant(values)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.broadcast_to(np.arange(values.shape[0])[:, None], idx.shape)
    out_data = np.zeros((values.shape[0], num_cols), dtype=np.float64)
    np.add.at(out_data, (rows, idx), values.data)

    def backward(g):
        _accum(values, g[rows, idx])

    return _node(out_data, (values,), backward)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick individual elements a[rows[i], cols[i]] as a vector."""
    a = constant(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out_data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, cols), g)
            _accum(a, ga)

    return _node(out_data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = constant(a)
    axis_n = _check_axis(a, axis)
    sl = [slice(None)] * a.ndim
    sl[axis_n] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl].copy()

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[sl] = g
            _accum(a, ga)

    return _node(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accum(t, g[tuple(sl)])
            offset += size

    return _node(out_data, tuple(tensors), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = constant(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set entries where ``mask`` is true to ``value``; their gradient is cut."""
    a = constant(a)
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, value, a.data)

    def backward(g):
        _accum(a, np.where(mask, 0.0, g))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# selection (discrete; never on the tape)


def top_k_indices(x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k largest entries of a 1-D array.

    Ties break toward the lower index; output is sorted by descending value,
    then ascending index. Returns (values, indices) as plain arrays — the
    selection itself is a fixed, non-differentiable decision.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 1:
        raise ShapeError(f"top_k_indices expects a 1-D input, got shape {data.shape}")
    if not 1 <= k <= data.shape[0]:
        raise ValueError(f"k={k} out of range for length {data.shape[0]}")
    order = np.argsort(-data, kind="stable")[:k]
    return data[order].copy(), order.astype(np.int64)


def top_k_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices with the same tie rule as top_k_indices."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"top_k_rows expects a 2-D input, got shape {data.shape}")
    if not 1 <= k <= data.shape[1]:
        raise ValueError(f"k={k} out of range for row length {data.shape[1]}")
    return np.argsort(-data, axis=1, kind="stable")[:, :k].astype(np.int64)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable grad-enabled tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_grad(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of ``f()`` w.r.t. every element of ``p``.

    ``f`` must be deterministic and the evaluation point must sit away from
    any top-k tie boundary, otherwise the ±h probes straddle a selection flip.
    Perturbs ``p`` in place and restores it exactly.
    """
    flat = p.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f())
        flat[i] = orig - h
        f_minus = float(f())
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad.reshape(p.data.shape))


def relative_error(a, b) -> float:
    """Norm-based relative difference, safe near zero."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
