"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Graph` is active are recorded on it when at
least one operand belongs to that graph; everything else runs as plain numpy
arithmetic. That is how no-grad passes (e.g. detached rollouts) work: run the
same model code outside any graph, or with parameters wrapped as constants.

    with Graph() as g:
        w = g.leaf("w", np.array([1.0, 2.0]))
        loss = sum_of_squares(w)
    grads = backward(g, loss)          # {"w": array([2., 4.])}
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor", "Graph", "backward", "finite_difference_check", "as_tensor",
    "matmul", "add", "sub", "mul", "scale", "softmax", "layer_norm", "gelu",
    "sigmoid", "silu", "concat", "slice_axis", "transpose", "reshape", "mean",
    "total", "sum_of_squares",
]

_ACTIVE: list["Graph"] = []
_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """A float64 array, optionally bound to a node of a recording graph."""

    __slots__ = ("data", "graph", "node", "name")

    def __init__(self, data, graph: "Graph | None" = None, node: int | None = None,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def tracked(self, graph: "Graph | None") -> bool:
        return graph is not None and self.graph is graph

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "vjp", "shape")

    def __init__(self, kind, inputs, vjp, shape=None):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Graph:
    """Ordered record of operations, rebuilt for every step."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self.frozen = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str, data) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} has non-finite entries")
        self.leaves[name] = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1, name)

    def _record(self, kind, out, inputs, vjp) -> Tensor:
        if self.frozen:
            raise RuntimeError("graph is frozen; build a new graph per step")
        self.nodes.append(_Node(kind, inputs, vjp))
        return Tensor(out, self, len(self.nodes) - 1)


def _active() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"op {kind!r} produced non-finite output")
    g = _active()
    if g is not None and any(t.graph is g for t in inputs):
        return g._record(kind, out, inputs, vjp)
    return Tensor(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- operations

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if needs[1]:
            if b.ndim == 2:
                ad = a.data.reshape(-1, a.shape[-1])
                gb = ad.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _emit("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g, needs):
        return (g * c,)

    return _emit("scale", a.data * c, (a,), vjp)


def softmax(a) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def vjp(g, needs):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer_norm", y, (a,), vjp)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def vjp(g, needs):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _emit("gelu", out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def vjp(g, needs):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", y, (a,), vjp)


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


def concat(tensors: Sequence, axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (the token axis by default)."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in ts]} disagree off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g, needs):
        parts = []
        for i, need in enumerate(needs):
            if need:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(bounds[i], bounds[i + 1])
                parts.append(g[tuple(idx)])
            else:
                parts.append(None)
        return tuple(parts)

    return _emit("concat", out, ts, vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g, needs):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _emit("slice", a.data[idx], (a,), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (np.transpose(g, inv),)

    return _emit("transpose", np.transpose(a.data, axes), (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def vjp(g, needs):
        return (g.reshape(a.shape),)

    return _emit("reshape", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _emit("mean", out, (a,), vjp)


def total(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", out, (a,), vjp)


def sum_of_squares(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (2.0 * g * a.data,)

    return _emit("sum_of_squares", np.sum(a.data * a.data), (a,), vjp)


# ------------------------------------------------------------------ backward

def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf of ``graph``.

    Nodes are visited in exact reverse recording order, so accumulation order
    (and therefore every bit of the result) is fixed for fixed inputs.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph.frozen = True
    grads: list = [None] * len(graph.nodes)
    if loss.graph is graph:
        grads[loss.node] = np.ones_like(loss.data)
    for i in range(len(graph.nodes) - 1, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.vjp is None:
            continue
        needs = [t.graph is graph for t in node.inputs]
        for t, need, gi in zip(node.inputs, needs, node.vjp(g, needs)):
            if need:
                j = t.node
                grads[j] = gi if grads[j] is None else grads[j] + gi
    out = {}
    for name, idx in graph.leaves.items():
        g = grads[idx]
        out[name] = np.zeros(graph.nodes[idx].shape) if g is None else np.array(g)
    return out


# ------------------------------------------------------- finite differences

def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    probes: int,
    rng: np.random.Generator | None = None,
    step: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` maps a dict of named tensors to a scalar tensor. Probed coordinates
    are drawn round-robin over the parameter tensors (uniform within each).
    Returns the max relative error ``|analytic - numeric| / max(|numeric|, 1e-8)``
    per probed tensor; an empty dict when there is nothing to probe.
    """
    if probes < 0:
        raise ValueError("probes must be non-negative")
    names = [n for n, a in params.items() if np.asarray(a).size > 0]
    if probes == 0 or not names:
        return {}
    rng = rng if rng is not None else np.random.default_rng(0)
    base = {n: np.array(a, dtype=np.float64) for n, a in params.items()}

    with Graph() as g:
        leaves = {n: g.leaf(n, a) for n, a in base.items()}
        loss = f(leaves)
    analytic = backward(g, loss)

    def value(arrays):
        return float(f({n: Tensor(a) for n, a in arrays.items()}).data)

    report: dict[str, float] = {}
    for p in range(probes):
        name = names[p % len(names)]
        arr = base[name]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        fp = value(base)
        arr[idx] = orig - step
        fm = value(base)
        arr[idx] = orig
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic[name][idx] - numeric) / max(abs(numeric), 1e-8)
        report[name] = max(report.get(name, 0.0), err)
    return report
