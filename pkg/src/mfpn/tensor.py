"""Rank-4 tensors with a tape-based reverse-mode differentiation engine.

Every tensor is a dense float64 array of shape ``(n, c, h, w)``.  Leaf
tensors (inputs and parameters) belong to no graph; the first operation that
touches a tensor requiring gradients opens a :class:`Graph` and every later
result derived from it is appended to the same tape.  Because records are
appended in evaluation order, walking the tape backwards is an exact reverse
topological traversal.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_node_ids = itertools.count()


class GraphError(RuntimeError):
    """Raised when tensors from different graphs are combined or a detached
    tensor is differentiated."""


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ValueError(f"tensors are rank-4 (n, c, h, w); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.graph: Optional[Graph] = None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor owned by a :class:`~mfpn.weights.WeightStore`."""

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)

    @property
    def trainable(self) -> bool:
        return self.requires_grad


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


class Graph:
    """Append-only tape of operation records.

    Graphs opened implicitly by an operation merge when independent
    computations meet.  A graph entered as a context manager is explicit:
    operations inside the block record onto it, and combining tensors from
    two different explicit graphs raises :class:`GraphError`.
    """

    def __init__(self, explicit: bool = False):
        self.records: list[OpRecord] = []
        self.explicit = explicit

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Graph":
        self.explicit = True
        _active_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_stack().pop()

    def _absorb(self, other: "Graph") -> None:
        # disjoint tapes: concatenation keeps a valid topological order
        for rec in other.records:
            rec.output.graph = self
        self.records.extend(other.records)
        other.records = []


_local = threading.local()


def _active_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph() -> Optional[Graph]:
    stack = _active_stack()
    return stack[-1] if stack else None


def record_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` as the result of ``op`` applied to ``inputs``.

    ``backward_fn`` maps the gradient of the output to one gradient (or
    ``None``) per input.  Results of operations on constants are constants.
    """
    graphs = list({id(t.graph): t.graph for t in inputs if t.graph is not None}.values())
    result = Tensor(out)
    if not graphs and not any(t.requires_grad for t in inputs):
        return result
    active = active_graph()
    candidates = graphs + ([active] if active is not None and active not in graphs else [])
    explicit = [g for g in candidates if g.explicit]
    if len(explicit) > 1:
        raise GraphError(f"{op}: operands belong to {len(explicit)} different graphs")
    if explicit:
        graph = explicit[0]
    elif graphs:
        graph = max(graphs, key=len)
    else:
        graph = Graph()
    for g in graphs:
        if g is not graph:
            graph._absorb(g)
    result.requires_grad = True
    result.graph = graph
    graph.records.append(OpRecord(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-requiring leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.graph is None:
        raise GraphError("backward() called on a detached tensor (no graph)")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss; got shape {loss.shape}")
    pending = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(loss.graph.records):
        g_out = pending.pop(rec.output.node_id, None)
        if g_out is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if inp.graph is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + g
            else:
                pending[inp.node_id] = g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, kernel: Optional[int] = None) -> Tensor:
    """Stride-1 convolution; 3x3 kernels use zero padding 1, 1x1 none.

    ``w`` has shape ``(c_out, c_in, k, k)`` and ``b`` holds ``c_out`` values
    (any rank-4 layout, e.g. ``(1, c_out, 1, 1)``).
    """
    c_out, c_in, kh, kw = w.shape
    if kernel is None:
        kernel = kh
    if kernel not in (1, 3):
        raise ValueError(f"kernel must be 1 or 3, got {kernel}")
    if kh != kernel or kw != kernel:
        raise ValueError(f"weight shape {w.shape} does not match kernel {kernel}")
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {c_in}")
    if b.data.size != c_out:
        raise ValueError(f"bias has {b.data.size} values, expected {c_out}")

    pad = kernel // 2
    n, _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (n, c_in, h, w, k, k)
    cols = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (n, h, w, c_out)
    out = out.transpose(0, 3, 1, 2) + b.data.reshape(1, c_out, 1, 1)

    def _backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (c_out, c_in, k, k)
        gb = g.sum(axis=(0, 2, 3)).reshape(b.shape)
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = sliding_window_view(gp, (kernel, kernel), axis=(2, 3))
        flipped = w.data[:, :, ::-1, ::-1]
        gx = np.tensordot(gcols, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gw, gb

    return record_op(f"conv{kernel}x{kernel}", (x, w, b), np.ascontiguousarray(out), _backward)


def upsample_nearest_x2(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record_op("upsample2x", (x,), out, _backward)


def maxpool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties send the gradient to the first cell
    of the window in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool_2x2 needs even spatial dims; got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return record_op("maxpool2x2", (x,), out, _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return record_op("gap", (x,), out, _backward)


def add(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise sum.  Operands of shape ``(n, c, 1, 1)`` are broadcast
    over the spatial grid of the others."""
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("add() needs at least one operand")
    full = [t for t in xs if t.shape[2:] != (1, 1)]
    target = full[0].shape if full else xs[0].shape
    for t in xs:
        if t.shape[:2] != target[:2] or t.shape[2:] not in (target[2:], (1, 1)):
            raise ValueError(f"add: incompatible shapes {[u.shape for u in xs]}")
    out = np.zeros(target)
    for t in xs:
        out = out + t.data

    def _backward(g):
        return [g if t.shape == target else g.sum(axis=(2, 3), keepdims=True) for t in xs]

    return record_op("add", xs, out, _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def _backward(g):
        return g[:, :ca], g[:, ca:]

    return record_op("concat", (a, b), out, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", (x,), x.data * mask, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def scale(x: Tensor, alpha: float) -> Tensor:
    return record_op("scale", (x,), alpha * x.data, lambda g: (alpha * g,))


def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum())
    return record_op("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_squares(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), np.sum(x.data * x.data))
    return record_op("sumsq", (x,), out, lambda g: (2.0 * g * x.data,))


def ancestors(t: Tensor) -> set:
    """Node ids of every tensor ``t`` was computed from (including ``t``),
    found by walking the tape structurally, without evaluating gradients."""
    seen = {t.node_id}
    if t.graph is None:
        return seen
    producer = {rec.output.node_id: rec for rec in t.graph.records}
    stack = [t]
    while stack:
        rec = producer.get(stack.pop().node_id)
        if rec is None:
            continue
        for inp in rec.inputs:
            if inp.node_id not in seen:
                seen.add(inp.node_id)
                stack.append(inp)
    return seen
