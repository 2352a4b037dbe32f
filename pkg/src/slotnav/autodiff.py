"""Reverse-mode differentiation over a static expression graph.

Graphs are built once (define-then-run), then evaluated or differentiated
against named parameter and input leaves.  All values are dense float64
numpy arrays.  Shapes are inferred and validated at construction time, so
shape bugs surface when a node is created, not when the graph runs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray

# Ops whose gradient is discontinuous.  finite_difference_check skips
# coordinates whose probe steps straddle one of these kinks.
_KINK_OPS = ("minimum", "maximum", "absolute")

_LN_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when operands of a graph op have incompatible shapes."""


class EvaluationError(ArithmeticError):
    """Raised when a node produces a non-finite value during evaluation."""


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite entries")
    return arr


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over the leading axes broadcast added."""
    extra = grad.ndim - len(shape)
    if extra == 0:
        return grad
    return grad.sum(axis=tuple(range(extra)))


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    # Allowed: identical shapes, scalar second operand, or second operand
    # matching the trailing axes of the first (broadcast over leading axes).
    if a == b or b == () or b == a[len(a) - len(b):]:
        return a
    raise ShapeError(f"{op}: cannot broadcast {b} onto {a}")


@dataclass(frozen=True)
class Node:
    """Handle to one graph operation; cheap to copy, compares by identity."""

    graph: "Graph" = field(repr=False)
    index: int
    op: str
    shape: tuple[int, ...]
    name: str

    def __hash__(self) -> int:
        return hash((id(self.graph), self.index))

    def __eq__(self, other) -> bool:
        return isinstance(other, Node) and other.graph is self.graph and other.index == self.index

    # Arithmetic sugar so builders read like math.
    def __add__(self, other):
        if isinstance(other, Node):
            return self.graph.add(self, other)
        return self.graph.affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return self.graph.subtract(self, other)
        return self.graph.affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return self.graph.affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.multiply(self, other)
        return self.graph.affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return self.graph.divide(self, other)
        return self.graph.affine(self, 1.0 / float(other), 0.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.affine(self, -1.0, 0.0)


@dataclass
class GradientReport:
    """Loss value plus gradients for every requested parameter."""

    value: float
    gradients: dict[str, Array]


@dataclass
class CoordinateError:
    """Worst finite-difference mismatch within one parameter tensor."""

    parameter: str
    coordinate: tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class FiniteDifferenceReport:
    """Outcome of a central finite-difference sweep over graph parameters."""

    max_relative_error: float
    per_parameter: dict[str, float]
    worst: CoordinateError | None
    checked_coordinates: int
    skipped_coordinates: int
    passed: bool


class Graph:
    """Static computation graph over named parameter and input leaves."""

    def __init__(self) -> None:
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._names: list[str] = []
        self._forward: list[Callable | None] = []
        self._backward: list[Callable | None] = []
        self._leaf_values: dict[int, Array] = {}
        self._params: dict[str, int] = {}
        self._inputs: dict[str, int] = {}

    # ------------------------------------------------------------------
    # Node construction

    def _register(self, op: str, parents: tuple[Node, ...], shape: tuple[int, ...],
                  forward: Callable | None, backward: Callable | None,
                  name: str | None = None) -> Node:
        for p in parents:
            if p.graph is not self:
                raise ValueError(f"{op}: operand {p.name} belongs to a different graph")
        index = len(self._ops)
        label = name if name is not None else f"{op}#{index}"
        self._ops.append(op)
        self._parents.append(tuple(p.index for p in parents))
        self._shapes.append(shape)
        self._names.append(label)
        self._forward.append(forward)
        self._backward.append(backward)
        return Node(self, index, op, shape, label)

    def parameter(self, name: str, value) -> Node:
        """Trainable leaf; gradient() reports a gradient for it."""
        if name in self._params or name in self._inputs:
            raise ValueError(f"duplicate leaf name: {name}")
        arr = _as_array(value)
        node = self._register("parameter", (), arr.shape, None, None, name=name)
        self._leaf_values[node.index] = arr
        self._params[name] = node.index
        return node

    def input(self, name: str, shape: Sequence[int]) -> Node:
        """Non-trainable leaf whose value is supplied at evaluation time."""
        if name in self._params or name in self._inputs:
            raise ValueError(f"duplicate leaf name: {name}")
        node = self._register("input", (), tuple(int(s) for s in shape), None, None, name=name)
        self._inputs[name] = node.index
        return node

    def constant(self, value, name: str | None = None) -> Node:
        """Fixed leaf baked into the graph; never differentiated."""
        arr = _as_array(value)
        node = self._register("constant", (), arr.shape, None, None, name=name)
        self._leaf_values[node.index] = arr
        return node

    @property
    def parameter_names(self) -> list[str]:
        return list(self._params)

    def parameter_value(self, name: str) -> Array:
        return self._leaf_values[self._params[name]]

    def set_parameter(self, name: str, value) -> None:
        arr = _as_array(value)
        expected = self._shapes[self._params[name]]
        if arr.shape != expected:
            raise ShapeError(f"parameter {name}: expected shape {expected}, got {arr.shape}")
        self._leaf_values[self._params[name]] = arr

    # ------------------------------------------------------------------
    # Elementwise and linear-algebra ops

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2:
            raise ShapeError(f"matmul: operands must be rank 2, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
        ia, ib = a.index, b.index

        def forward(v):
            return v[ia] @ v[ib]

        def backward(v, g):
            return ((ia, g @ v[ib].T), (ib, v[ia].T @ g))

        return self._register("matmul", (a, b), (a.shape[0], b.shape[1]), forward, backward)

    def transpose(self, a: Node) -> Node:
        if len(a.shape) != 2:
            raise ShapeError(f"transpose: operand must be rank 2, got {a.shape}")
        ia = a.index
        return self._register(
            "transpose", (a,), (a.shape[1], a.shape[0]),
            lambda v: v[ia].T,
            lambda v, g: ((ia, g.T),),
        )

    def _binary(self, op: str, a: Node, b: Node, fwd, dfa, dfb) -> Node:
        shape = _broadcast_shape(op, a.shape, b.shape)
        ia, ib = a.index, b.index
        b_shape = b.shape

        def forward(v):
            return fwd(v[ia], v[ib])

        def backward(v, g):
            return ((ia, dfa(v[ia], v[ib], g)),
                    (ib, _reduce_to(dfb(v[ia], v[ib], g), b_shape)))

        return self._register(op, (a, b), shape, forward, backward)

    def add(self, a: Node, b: Node) -> Node:
        return self._binary("add", a, b, np.add,
                            lambda x, y, g: g, lambda x, y, g: g)

    def subtract(self, a: Node, b: Node) -> Node:
        return self._binary("subtract", a, b, np.subtract,
                            lambda x, y, g: g, lambda x, y, g: -g)

    def multiply(self, a: Node, b: Node) -> Node:
        return self._binary("multiply", a, b, np.multiply,
                            lambda x, y, g: g * y, lambda x, y, g: g * x)

    def divide(self, a: Node, b: Node) -> Node:
        return self._binary("divide", a, b, np.divide,
                            lambda x, y, g: g / y, lambda x, y, g: -g * x / (y * y))

    def minimum(self, a: Node, b: Node) -> Node:
        # Ties follow the first operand (subgradient of the first branch).
        return self._binary("minimum", a, b, np.minimum,
                            lambda x, y, g: g * (x <= y), lambda x, y, g: g * (x > y))

    def maximum(self, a: Node, b: Node) -> Node:
        return self._binary("maximum", a, b, np.maximum,
                            lambda x, y, g: g * (x >= y), lambda x, y, g: g * (x < y))

    def affine(self, a: Node, scale: float, shift: float) -> Node:
        ia = a.index
        scale = float(scale)
        shift = float(shift)
        return self._register(
            "affine", (a,), a.shape,
            lambda v: v[ia] * scale + shift,
            lambda v, g: ((ia, g * scale),),
        )

    def _unary(self, op: str, a: Node, fwd, grad_from_xy) -> Node:
        ia = a.index

        def backward(v, g):
            x = v[ia]
            return ((ia, grad_from_xy(x, fwd(x), g)),)

        return self._register(op, (a,), a.shape, lambda v: fwd(v[ia]), backward)

    def absolute(self, a: Node) -> Node:
        # Subgradient at 0 is +1: |x| treated as maximum(x, -x) with ties
        # resolved toward the first branch.
        return self._unary("absolute", a, np.abs,
                           lambda x, y, g: g * np.where(x >= 0.0, 1.0, -1.0))

    def exp(self, a: Node) -> Node:
        return self._unary("exp", a, np.exp, lambda x, y, g: g * y)

    def log(self, a: Node) -> Node:
        return self._unary("log", a, np.log, lambda x, y, g: g / x)

    def sqrt(self, a: Node) -> Node:
        return self._unary("sqrt", a, np.sqrt, lambda x, y, g: g / (2.0 * y))

    def sigmoid(self, a: Node) -> Node:
        def fwd(x):
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        return self._unary("sigmoid", a, fwd, lambda x, y, g: g * y * (1.0 - y))

    def tanh(self, a: Node) -> Node:
        return self._unary("tanh", a, np.tanh, lambda x, y, g: g * (1.0 - y * y))

    def gelu(self, a: Node) -> Node:
        # tanh approximation; smooth, so finite differences track it exactly.
        c = np.sqrt(2.0 / np.pi)

        def fwd(x):
            return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))

        def grad(x, y, g):
            inner = c * (x + 0.044715 * x ** 3)
            t = np.tanh(inner)
            d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
            return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)

        return self._unary("gelu", a, fwd, grad)

    # ------------------------------------------------------------------
    # Reductions and normalizations

    def sum(self, a: Node, axis: int | None = None) -> Node:
        ia = a.index
        in_shape = a.shape
        if axis is None:
            shape: tuple[int, ...] = ()

            def forward(v):
                return np.asarray(v[ia].sum())

            def backward(v, g):
                return ((ia, np.broadcast_to(g, in_shape)),)
        else:
            if not -len(in_shape) <= axis < len(in_shape):
                raise ShapeError(f"sum: axis {axis} out of range for shape {in_shape}")
            axis = axis % len(in_shape)
            shape = in_shape[:axis] + in_shape[axis + 1:]

            def forward(v):
                return v[ia].sum(axis=axis)

            def backward(v, g):
                return ((ia, np.broadcast_to(np.expand_dims(g, axis), in_shape)),)

        return self._register("sum", (a,), shape, forward, backward)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        count = int(np.prod(a.shape)) if axis is None else a.shape[axis]
        if count == 0:
            raise ShapeError("mean: cannot average over an empty axis")
        return self.affine(self.sum(a, axis=axis), 1.0 / count, 0.0)

    def softmax(self, a: Node, axis: int) -> Node:
        if not -len(a.shape) <= axis < len(a.shape):
            raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
        ia = a.index

        def forward(v):
            x = v[ia]
            z = x - x.max(axis=axis, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=axis, keepdims=True)

        def backward(v, g):
            y = forward(v)
            dot = (g * y).sum(axis=axis, keepdims=True)
            return ((ia, y * (g - dot)),)

        return self._register("softmax", (a,), a.shape, forward, backward)

    def log_softmax(self, a: Node, axis: int) -> Node:
        if not -len(a.shape) <= axis < len(a.shape):
            raise ShapeError(f"log_softmax: axis {axis} out of range for shape {a.shape}")
        ia = a.index

        def forward(v):
            x = v[ia]
            z = x - x.max(axis=axis, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

        def backward(v, g):
            y = np.exp(forward(v))
            return ((ia, g - y * g.sum(axis=axis, keepdims=True)),)

        return self._register("log_softmax", (a,), a.shape, forward, backward)

    def layer_norm(self, a: Node) -> Node:
        """Normalize the last axis to zero mean, unit variance (no affine)."""
        if len(a.shape) == 0:
            raise ShapeError("layer_norm: operand must have at least one axis")
        ia = a.index
        d = a.shape[-1]

        def forward(v):
            x = v[ia]
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            return (x - mu) / np.sqrt(var + _LN_EPS)

        def backward(v, g):
            x = v[ia]
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + _LN_EPS)
            xhat = (x - mu) * inv
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            return ((ia, inv * (g - gm - xhat * gx)),)

        if d < 1:
            raise ShapeError("layer_norm: last axis must be non-empty")
        return self._register("layer_norm", (a,), a.shape, forward, backward)

    def row_divide(self, a: Node, s: Node) -> Node:
        """Divide each row of a rank-2 operand by the matching scalar in s."""
        if len(a.shape) != 2 or s.shape != (a.shape[0],):
            raise ShapeError(f"row_divide: expected (n, d) and (n,), got {a.shape} and {s.shape}")
        ia, isx = a.index, s.index

        def forward(v):
            return v[ia] / v[isx][:, None]

        def backward(v, g):
            x, s_val = v[ia], v[isx]
            return ((ia, g / s_val[:, None]),
                    (isx, -(g * x).sum(axis=1) / (s_val * s_val)))

        return self._register("row_divide", (a, s), a.shape, forward, backward)

    # ------------------------------------------------------------------
    # Structural ops

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        new_shape = tuple(int(s) for s in shape)
        if int(np.prod(new_shape)) != int(np.prod(a.shape)):
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {new_shape}")
        ia = a.index
        old_shape = a.shape
        return self._register(
            "reshape", (a,), new_shape,
            lambda v: v[ia].reshape(new_shape),
            lambda v, g: ((ia, g.reshape(old_shape)),),
        )

    def concat(self, nodes: Sequence[Node], axis: int = 0) -> Node:
        if not nodes:
            raise ShapeError("concat: need at least one operand")
        rank = len(nodes[0].shape)
        if not -rank <= axis < rank:
            raise ShapeError(f"concat: axis {axis} out of range for rank {rank}")
        axis = axis % rank
        for n in nodes:
            if len(n.shape) != rank or n.shape[:axis] + n.shape[axis + 1:] \
                    != nodes[0].shape[:axis] + nodes[0].shape[axis + 1:]:
                raise ShapeError(f"concat: mismatched shapes {[n.shape for n in nodes]}")
        sizes = [n.shape[axis] for n in nodes]
        shape = nodes[0].shape[:axis] + (sum(sizes),) + nodes[0].shape[axis + 1:]
        idxs = tuple(n.index for n in nodes)
        bounds = np.cumsum([0] + sizes)

        def forward(v):
            return np.concatenate([v[i] for i in idxs], axis=axis)

        def backward(v, g):
            pieces = []
            for k, i in enumerate(idxs):
                sl = [slice(None)] * rank
                sl[axis] = slice(bounds[k], bounds[k + 1])
                pieces.append((i, g[tuple(sl)]))
            return tuple(pieces)

        return self._register("concat", tuple(nodes), shape, forward, backward)

    def gather(self, a: Node, indices: Sequence[int], axis: int = 0) -> Node:
        """Select rows (axis 0) or columns (axis 1) by index, duplicates allowed."""
        if len(a.shape) != 2:
            raise ShapeError(f"gather: operand must be rank 2, got {a.shape}")
        if axis not in (0, 1):
            raise ShapeError("gather: axis must be 0 or 1")
        idx = np.asarray(list(indices), dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise ShapeError("gather: indices must be a non-empty 1-d sequence")
        if idx.min() < 0 or idx.max() >= a.shape[axis]:
            raise ShapeError(f"gather: index out of range for axis {axis} of shape {a.shape}")
        ia = a.index
        in_shape = a.shape
        shape = (len(idx), in_shape[1]) if axis == 0 else (in_shape[0], len(idx))

        def forward(v):
            return v[ia][idx, :] if axis == 0 else v[ia][:, idx]

        def backward(v, g):
            out = np.zeros(in_shape)
            if axis == 0:
                np.add.at(out, idx, g)
            else:
                np.add.at(out.T, idx, g.T)
            return ((ia, out),)

        return self._register("gather", (a,), shape, forward, backward)

    def slice_columns(self, a: Node, start: int, stop: int) -> Node:
        if len(a.shape) != 2 or not 0 <= start < stop <= a.shape[1]:
            raise ShapeError(f"slice_columns: bad range [{start}, {stop}) for shape {a.shape}")
        ia = a.index
        in_shape = a.shape

        def forward(v):
            return v[ia][:, start:stop]

        def backward(v, g):
            out = np.zeros(in_shape)
            out[:, start:stop] = g
            return ((ia, out),)

        return self._register("slice_columns", (a,), (a.shape[0], stop - start),
                              forward, backward)

    # ------------------------------------------------------------------
    # Execution

    def _ancestors(self, targets: Iterable[int]) -> list[int]:
        """Indices of targets plus everything they depend on, ascending."""
        seen: set[int] = set()
        stack = list(targets)
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self._parents[i])
        return sorted(seen)

    def _run(self, order: Sequence[int], values: list, check: bool = True) -> None:
        forward = self._forward
        with np.errstate(all="ignore"):
            for i in order:
                fn = forward[i]
                if fn is None:
                    if values[i] is None:
                        raise ValueError(f"missing value for leaf {self._names[i]}")
                    continue
                out = fn(values)
                if check and not np.all(np.isfinite(out)):
                    raise EvaluationError(f"non-finite value in node {self._names[i]}")
                values[i] = out

    def _leaf_frame(self, inputs: Mapping[str, Array] | None) -> list:
        values: list = [None] * len(self._ops)
        for i, val in self._leaf_values.items():
            values[i] = val
        supplied = dict(inputs or {})
        for name, i in self._inputs.items():
            if name not in supplied:
                raise ValueError(f"missing input: {name}")
            arr = _as_array(supplied.pop(name))
            if arr.shape != self._shapes[i]:
                raise ShapeError(f"input {name}: expected shape {self._shapes[i]}, got {arr.shape}")
            values[i] = arr
        if supplied:
            raise ValueError(f"unknown inputs: {sorted(supplied)}")
        return values

    def evaluate(self, outputs: Node | Sequence[Node],
                 inputs: Mapping[str, Array] | None = None,
                 check: bool = True):
        """Evaluate one node (returns its array) or several (returns a list).

        With check=False, non-finite intermediates flow through instead of
        raising, so callers can report which result went bad.
        """
        single = isinstance(outputs, Node)
        nodes = [outputs] if single else list(outputs)
        for n in nodes:
            if n.graph is not self:
                raise ValueError("output node belongs to a different graph")
        values = self._leaf_frame(inputs)
        order = self._ancestors([n.index for n in nodes])
        self._run(order, values, check=check)
        results = [values[n.index] for n in nodes]
        return results[0] if single else results

    def gradient(self, output: Node, inputs: Mapping[str, Array] | None = None,
                 parameters: Sequence[str] | None = None) -> GradientReport:
        """Differentiate a scalar output with respect to named parameters."""
        if output.graph is not self:
            raise ValueError("output node belongs to a different graph")
        if output.shape != ():
            raise ShapeError(f"gradient: output must be scalar, got shape {output.shape}")
        names = list(parameters) if parameters is not None else list(self._params)
        for name in names:
            if name not in self._params:
                raise ValueError(f"unknown parameter: {name}")

        values = self._leaf_frame(inputs)
        order = self._ancestors([output.index])
        self._run(order, values)

        adjoint: list = [None] * len(self._ops)
        adjoint[output.index] = np.asarray(1.0)
        backward = self._backward
        in_path = set(order)
        for i in reversed(order):
            g = adjoint[i]
            if g is None or backward[i] is None:
                continue
            for parent, contribution in backward[i](values, g):
                if parent not in in_path:
                    continue
                if adjoint[parent] is None:
                    adjoint[parent] = contribution if isinstance(contribution, np.ndarray) \
                        else np.asarray(contribution)
                else:
                    adjoint[parent] = adjoint[parent] + contribution

        grads = {}
        for name in names:
            i = self._params[name]
            g = adjoint[i]
            grads[name] = np.zeros(self._shapes[i]) if g is None \
                else np.broadcast_to(np.asarray(g), self._shapes[i]).copy()
        return GradientReport(value=float(values[output.index]), gradients=grads)

    # ------------------------------------------------------------------
    # Finite differences

    def _descendants_of(self, leaf: int, active: set[int]) -> list[int]:
        """Nodes in active reachable from leaf, ascending order."""
        reach = {leaf}
        out = []
        for i in sorted(active):
            if i == leaf:
                out.append(i)
                continue
            if any(p in reach for p in self._parents[i]):
                reach.add(i)
                out.append(i)
        return out

    @staticmethod
    def _relative_error(analytic: float, numeric: float) -> float:
        denom = max(abs(analytic), abs(numeric))
        if denom < 1e-8:
            return abs(analytic - numeric)
        return abs(analytic - numeric) / denom

    @staticmethod
    def _straddles_kink(plus_discs: list[Array], minus_discs: list[Array]) -> bool:
        for dp, dm in zip(plus_discs, minus_discs):
            # Only entries this coordinate actually moved can straddle.
            dp, dm = np.atleast_1d(dp), np.atleast_1d(dm)
            moved = dp != dm
            if not np.any(moved):
                continue
            dp_m, dm_m = dp[moved], dm[moved]
            if np.any(dp_m * dm_m < 0.0) or np.any(np.abs(dp_m) < 1e-12) \
                    or np.any(np.abs(dm_m) < 1e-12):
                return True
        return False

    def finite_difference_check(self, output: Node,
                                inputs: Mapping[str, Array] | None = None,
                                parameters: Sequence[str] | None = None,
                                step: float = 1e-5,
                                tolerance: float = 1e-4) -> FiniteDifferenceReport:
        """Compare analytic gradients against central finite differences.

        Every coordinate of every checked parameter is perturbed by +-step and
        only the affected part of the graph is re-evaluated.  Coordinates whose
        perturbation flips the branch of a minimum/maximum/absolute node are
        skipped: the analytic value is a one-sided subgradient there and the
        central difference straddles the kink.  A coordinate that misses the
        tolerance at the base step is re-probed at larger steps, which lowers
        the roundoff floor for tiny-magnitude gradients; a genuinely wrong
        analytic gradient fails at every step size.
        """
        report = self.gradient(output, inputs, parameters)
        names = list(report.gradients)

        base = self._leaf_frame(inputs)
        order = self._ancestors([output.index])
        self._run(order, base)
        active = set(order)
        out_idx = output.index

        max_rel = 0.0
        worst: CoordinateError | None = None
        per_param: dict[str, float] = {}
        checked = 0
        skipped = 0

        saved_err = np.seterr(all="ignore")
        try:
            for name in names:
                leaf = self._params[name]
                if leaf not in active:
                    # Parameter does not feed the output; the analytic gradient
                    # is exactly zero and there is nothing to probe.
                    per_param[name] = 0.0
                    continue
                sub_order = self._descendants_of(leaf, active)
                plan = [(i, self._forward[i]) for i in sub_order
                        if self._forward[i] is not None]
                kinks = [(self._ops[i], self._parents[i]) for i in sub_order
                         if self._ops[i] in _KINK_OPS]
                theta = self._leaf_values[leaf]
                grad_flat = report.gradients[name].reshape(-1)
                scratch = theta.copy().reshape(-1)
                frame = list(base)
                frame[leaf] = scratch.reshape(theta.shape)

                def probe(c: int, value: float):
                    scratch[c] = value
                    for i, fn in plan:
                        frame[i] = fn(frame)
                    if not kinks:
                        return float(frame[out_idx]), []
                    discs = [frame[parents[0]].copy() if op == "absolute"
                             else frame[parents[0]] - frame[parents[1]]
                             for op, parents in kinks]
                    return float(frame[out_idx]), discs

                def central(c: int, original: float, h: float):
                    """Central difference at width h, or None on a kink straddle."""
                    f_plus, disc_p = probe(c, original + h)
                    f_minus, disc_m = probe(c, original - h)
                    if kinks and self._straddles_kink(disc_p, disc_m):
                        return None
                    return (f_plus - f_minus) / (2.0 * h)

                param_max = 0.0
                for c in range(scratch.size):
                    original = scratch[c]
                    numeric = central(c, original, step)
                    if numeric is None:
                        scratch[c] = original
                        skipped += 1
                        continue
                    analytic = float(grad_flat[c])
                    rel = self._relative_error(analytic, numeric)
                    if rel >= 0.5 * tolerance:
                        # Small gradients formed by cancellation of large
                        # branches are roundoff/truncation limited at any
                        # single width; a Richardson ladder over shrinking
                        # widths cancels the even-order truncation terms.
                        table: list[list[float]] = []
                        for k in range(4):
                            d = central(c, original, 3.2e-3 / (2.0 ** k))
                            if d is None:
                                break
                            row = [d]
                            for m in range(1, len(table) + 1):
                                scale = 4.0 ** m
                                row.append((scale * row[m - 1] - table[-1][m - 1])
                                           / (scale - 1.0))
                            table.append(row)
                            for estimate in row:
                                retry_rel = self._relative_error(analytic, estimate)
                                if retry_rel < rel:
                                    rel, numeric = retry_rel, estimate
                            if rel < 0.25 * tolerance:
                                break
                    scratch[c] = original
                    checked += 1
                    if rel > param_max:
                        param_max = rel
                    if rel > max_rel:
                        max_rel = rel
                        worst = CoordinateError(
                            parameter=name,
                            coordinate=tuple(int(k) for k in np.unravel_index(c, theta.shape))
                            if theta.shape else (),
                            analytic=analytic,
                            numeric=numeric,
                            relative_error=rel,
                        )
                per_param[name] = param_max
        finally:
            np.seterr(**saved_err)

        return FiniteDifferenceReport(
            max_relative_error=max_rel,
            per_parameter=per_param,
            worst=worst,
            checked_coordinates=checked,
            skipped_coordinates=skipped,
            passed=max_rel < tolerance,
        )


# ----------------------------------------------------------------------
# Named parameter collections and checkpoint serialization

_CHECKPOINT_MAGIC = b"LZP1"


class ParamStore:
    """Named float64 tensors with an optional frozen (non-trainable) subset."""

    def __init__(self, values: Mapping[str, Array] | None = None,
                 frozen: Iterable[str] = ()) -> None:
        self._values: dict[str, Array] = {}
        self.frozen: set[str] = set(frozen)
        for name, value in (values or {}).items():
            self[name] = value
        for name in self.frozen:
            if name not in self._values:
                raise KeyError(f"frozen name not in store: {name}")

    def __getitem__(self, name: str) -> Array:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        self._values[name] = _as_array(value)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self) -> list[str]:
        return list(self._values)

    def trainable_names(self) -> list[str]:
        return [n for n in self._values if n not in self.frozen]

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen

    def freeze(self, name: str) -> None:
        if name not in self._values:
            raise KeyError(f"no such parameter: {name}")
        self.frozen.add(name)

    def copy(self) -> "ParamStore":
        return ParamStore({n: v.copy() for n, v in self._values.items()}, frozen=self.frozen)

    def coordinate_count(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return int(sum(self._values[n].size for n in names))


def save_checkpoint(store: ParamStore | Mapping[str, Array], path) -> None:
    """Write parameters: magic, count, then per tensor name/rank/dims/values.

    All integers are little-endian uint32; values are little-endian float64
    in row-major order.  Insertion order is preserved.
    """
    items = list(store.items()) if isinstance(store, ParamStore) else list(store.items())
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, value in items:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    """Read a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    offset = 4

    def read_u32() -> int:
        nonlocal offset
        value = struct.unpack_from("<I", data, offset)[0]
        offset += 4
        return value

    count = read_u32()
    out: dict[str, Array] = {}
    for _ in range(count):
        name_len = read_u32()
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        out[name] = arr.reshape(shape).astype(np.float64)
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def derive_seed(seed: int, *salt) -> int:
    """Deterministically derive an independent substream seed."""
    digest = hashlib.sha256()
    digest.update(str(int(seed)).encode())
    for s in salt:
        digest.update(b"/")
        digest.update(str(s).encode("utf-8"))
    return int.from_bytes(digest.digest()[:4], "little")
