"""Reverse-mode automatic differentiation over dense float64 arrays.

Only the operations the matching model actually needs: matrix products,
row softmax, segment means, gathers/scatters, elementwise arithmetic,
ReLU, column concatenation, inverted-scaling dropout and a summed
cross-entropy.  Op functions build the graph implicitly; ``backward``
replays it once in reverse topological order.

Tensors are treated as immutable once created (the ``grad`` slot is the
one exception), so parameter updates always construct fresh tensors and
in-flight graphs keep reading a consistent snapshot.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "softmax_rows",
    "segment_mean",
    "gather_rows",
    "scatter_add_rows",
    "concat_cols",
    "cross_entropy",
    "sum_all",
    "dropout",
    "backward",
]

LOG_CLAMP = 1e-12


class Tensor:
    """A float64 array plus the bookkeeping needed for backward().

    ``requires_grad`` marks leaves whose gradient the caller wants; op
    outputs inherit it from their inputs.  ``grad`` stays ``None`` until
    a backward sweep writes it (write, not accumulate, so rebuilding an
    identical graph and sweeping again gives identical results).
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A gradient-free leaf sharing this tensor's values."""
        return Tensor(self.values)

    def clone(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.values.copy(), requires_grad=rg)

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the named functions below are the real API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, params: Iterable["Tensor"] | None = None):
        return backward(self, params=params)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result, recording the node only when a parent needs grad."""
    if any(p.requires_grad for p in parents):
        out = Tensor(values, requires_grad=True)
        out._parents = tuple(parents)
        out._vjp = vjp
        return out
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ValueError(f"add: incompatible shapes {av.shape} and {bv.shape}") from None
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, av.shape) if na else None,
            _unbroadcast(g, bv.shape) if nb else None,
        )

    return _make(av + bv, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    av, bv = a.values, b.values
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {av.shape} and {bv.shape}") from None
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g * bv, av.shape) if na else None,
            _unbroadcast(g * av, bv.shape) if nb else None,
        )

    return _make(av * bv, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _make(a.values * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ bv.T if na else None, av.T @ g if nb else None)

    return _make(av @ bv, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError(f"transpose: expected a 2-d tensor, got shape {a.shape}")

    def vjp(g):
        return (g.T,)

    return _make(a.values.T.copy(), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.values, 0.0), (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilised by the row max."""
    if a.values.ndim != 2:
        raise ValueError(f"softmax_rows: expected a 2-d tensor, got shape {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def segment_mean(a: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Mean of the rows of ``a`` grouped by ``segment_ids``.

    Every segment in [0, n_segments) must receive at least one row.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    if a.values.ndim != 2:
        raise ValueError(f"segment_mean: expected a 2-d tensor, got shape {a.shape}")
    if ids.ndim != 1 or ids.shape[0] != a.values.shape[0]:
        raise ValueError(
            f"segment_mean: ids length {ids.shape} does not match {a.values.shape[0]} rows"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise ValueError("segment_mean: segment id out of range")
    counts = np.bincount(ids, minlength=n_segments).astype(np.float64)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise ValueError(f"segment_mean: segment {int(empty[0])} is empty")
    out = np.zeros((n_segments, a.values.shape[1]), dtype=np.float64)
    np.add.at(out, ids, a.values)
    out /= counts[:, None]

    def vjp(g):
        return (g[ids] / counts[ids][:, None],)

    return _make(out, (a,), vjp)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or idx.ndim != 1:
        raise ValueError("gather_rows: expected a 2-d tensor and a 1-d index")
    if idx.size and (idx.min() < 0 or idx.max() >= a.values.shape[0]):
        raise ValueError("gather_rows: index out of range")
    n_rows = a.values.shape[0]

    def vjp(g):
        out = np.zeros((n_rows, g.shape[1]), dtype=np.float64)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx], (a,), vjp)


def scatter_add_rows(a: Tensor, index, n_rows: int) -> Tensor:
    """Sum the rows of ``a`` into ``n_rows`` buckets chosen by ``index``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.values.shape[0]:
        raise ValueError("scatter_add_rows: index must have one entry per row")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ValueError("scatter_add_rows: index out of range")
    out = np.zeros((n_rows, a.values.shape[1]), dtype=np.float64)
    np.add.at(out, idx, a.values)

    def vjp(g):
        return (g[idx],)

    return _make(out, (a,), vjp)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along the last axis."""
    if not tensors:
        raise ValueError("concat_cols: need at least one tensor")
    rows = tensors[0].values.shape[0]
    for t in tensors:
        if t.values.ndim != 2 or t.values.shape[0] != rows:
            raise ValueError("concat_cols: all tensors must be 2-d with matching row counts")
    widths = [t.values.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]
    out = np.concatenate([t.values for t in tensors], axis=1)

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _make(out, tuple(tensors), vjp)


def cross_entropy(pred: Tensor, onehot: Tensor, eps_log: float = LOG_CLAMP) -> Tensor:
    """Summed cross-entropy between predicted rows and one-hot targets.

    Targets must be exact two-class one-hot rows ([1,0] or [0,1]).  The
    log argument is clamped below at ``eps_log`` so zero probabilities
    stay finite.
    """
    p, y = pred.values, onehot.values
    if p.shape != y.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"cross_entropy: expected matching [n, 2] shapes, got {p.shape} and {y.shape}")
    is_onehot = np.all((y == 0.0) | (y == 1.0), axis=1) & (y.sum(axis=1) == 1.0)
    if not np.all(is_onehot):
        bad = int(np.nonzero(~is_onehot)[0][0])
        raise ValueError(f"cross_entropy: row {bad} of the target is not one-hot: {y[bad]}")
    clamped = np.maximum(p, eps_log)
    out = float(-(y * np.log(clamped)).sum())
    live = p >= eps_log  # below the clamp the log is flat

    def vjp(g):
        return (g * np.where(live, -y / clamped, 0.0), None)

    return _make(np.float64(out), (pred, onehot), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.values.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _make(np.float64(a.values.sum()), (a,), vjp)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-scaling dropout: keep with prob 1-rate, scale kept by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = rng.random(a.values.shape) >= rate
    factor = keep / (1.0 - rate)

    def vjp(g):
        return (g * factor,)

    return _make(a.values * factor, (a,), vjp)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, write_grad: bool = True):
    """Single reverse sweep from a scalar loss.

    Returns a dict mapping every visited requires_grad tensor to its
    gradient array.  Tensors passed in ``params`` that the sweep never
    reaches are included with zero gradients.  When ``write_grad`` is
    set the same arrays are written to each tensor's ``grad`` slot
    (overwriting, never accumulating across sweeps).
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")

    # Iterative post-order over op nodes only; leaves collect gradients
    # when their consumers run.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._vjp is not None and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                by_id[key] = parent

    result: dict[Tensor, np.ndarray] = {}
    for key, tensor in by_id.items():
        if tensor.requires_grad:
            result[tensor] = grads[key]
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.values)
    if write_grad:
        for tensor, g in result.items():
            tensor.grad = g
    return result
