"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The primitive set is deliberately small: matmul (with an optional
transposed right operand), elementwise add/sub/mul, multiplication by a
python scalar, relu, exp, log, full-array sum and mean, row-wise L2
normalization, row-wise inner products, stop_gradient, and nearest-rank
percentile selection. Everything the losses and models in this package
need composes out of these.

A tape is rebuilt for every forward pass (define-by-run); node insertion
order is the topological order, and ``Tape.backward`` sweeps it once in
reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class DomainError(ValueError):
    """Input lies outside a primitive's documented domain."""


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


@dataclass
class Node:
    kind: str
    input_ids: tuple[int, ...]
    ctx: dict
    tensor: "Tensor"


class Tensor:
    """A dense float64 array registered on a tape.

    ``grad`` is populated by ``Tape.backward``: leaves created with
    ``requires_grad=True`` and every intermediate result receive their
    accumulated gradient; constant leaves keep ``grad = None``.
    """

    __slots__ = ("values", "grad", "node_id", "tape", "requires_grad")

    def __init__(self, values: np.ndarray, tape: "Tape", node_id: int, requires_grad: bool):
        self.values = values
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    # arithmetic sugar; scalars route through the 'scale' primitive
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def stop_gradient(self) -> "Tensor":
        return stop_gradient(self)


class Tape:
    """Ordered record of primitive applications, one per produced tensor."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.branch_events: list[tuple[str, Any]] = []

    def variable(self, values, requires_grad: bool = True) -> Tensor:
        return self._register("leaf", _as_array(values).copy(), (), {}, requires_grad)

    def constant(self, values) -> Tensor:
        return self.variable(values, requires_grad=False)

    def _register(self, kind: str, values: np.ndarray, inputs: tuple[Tensor, ...],
                  ctx: dict, requires_grad: bool) -> Tensor:
        node_id = len(self.nodes)
        t = Tensor(values, self, node_id, requires_grad)
        self.nodes.append(Node(kind, tuple(x.node_id for x in inputs), ctx, t))
        return t

    def record_branch(self, tag: str, data: Any) -> None:
        """Note a discrete choice (e.g. a selection index) made while building
        the graph; it becomes part of ``branch_signature``."""
        self.branch_events.append((tag, data))

    def branch_signature(self) -> tuple:
        """Hashable summary of every discrete decision the forward pass took.

        Two evaluations of the same graph builder are comparable gradient-wise
        only if their signatures match (same relu activation patterns, same
        percentile selections). Finite-difference checks use this to detect
        kink and tie crossings.
        """
        items: list[Any] = []
        for node in self.nodes:
            if node.kind == "relu":
                items.append(("relu", node.ctx["mask"].tobytes()))
            elif node.kind == "percentile_select":
                items.append(("percentile", node.ctx["index"]))
        items.extend(self.branch_events)
        return tuple(items)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) into ``grad`` for every tensor on the
        tape. ``root`` must be scalar (one element)."""
        if root.tape is not self:
            raise ValueError("backward: root tensor belongs to a different tape")
        if root.values.size != 1:
            raise ShapeError(
                f"backward requires a scalar root, got shape {root.values.shape}")

        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
        for node in reversed(self.nodes):
            g = grads.get(node.tensor.node_id)
            if g is None:
                continue
            if node.kind == "leaf":
                continue
            for input_id, input_grad in zip(node.input_ids, _VJPS[node.kind](node.ctx, g)):
                if input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        for node in self.nodes:
            t = node.tensor
            if node.kind == "leaf" and not t.requires_grad:
                t.grad = None
            else:
                t.grad = grads.get(t.node_id, np.zeros_like(t.values))


def _check_same_tape(name: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError(f"{name}: operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _coerce(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    tape = _check_same_tape("matmul", a, b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    bv = b.values.T if transpose_b else b.values
    if a.values.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ "
            f"{b.shape}{'^T' if transpose_b else ''}")
    out = a.values @ bv
    ctx = {"a": a.values, "b": b.values, "transpose_b": transpose_b}
    return tape._register("matmul", out, (a, b), ctx,
                          a.requires_grad or b.requires_grad)


def _matmul_vjp(ctx, g):
    a, b = ctx["a"], ctx["b"]
    if ctx["transpose_b"]:
        return g @ b, g.T @ a
    return g @ b.T, a.T @ g


def _elementwise(kind: str, a: Tensor, b) -> Tensor:
    tape = a.tape
    b = _coerce(tape, b)
    _check_same_tape(kind, a, b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from e
    op = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[kind]
    out = op(a.values, b.values)
    ctx = {"a": a.values, "b": b.values,
           "a_shape": a.shape, "b_shape": b.shape, "out_shape": out_shape}
    return tape._register(kind, out, (a, b), ctx,
                          a.requires_grad or b.requires_grad)


def add(a: Tensor, b) -> Tensor:
    return _elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return _elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return _elementwise("mul", a, b)


def _add_vjp(ctx, g):
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(g, ctx["b_shape"])


def _sub_vjp(ctx, g):
    return _unbroadcast(g, ctx["a_shape"]), _unbroadcast(-g, ctx["b_shape"])


def _mul_vjp(ctx, g):
    return (_unbroadcast(g * ctx["b"], ctx["a_shape"]),
            _unbroadcast(g * ctx["a"], ctx["b_shape"]))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._register("scale", a.values * c, (a,), {"c": c}, a.requires_grad)


def _scale_vjp(ctx, g):
    return (g * ctx["c"],)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return a.tape._register("relu", np.where(mask, a.values, 0.0), (a,),
                            {"mask": mask}, a.requires_grad)


def _relu_vjp(ctx, g):
    return (np.where(ctx["mask"], g, 0.0),)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return a.tape._register("exp", out, (a,), {"out": out}, a.requires_grad)


def _exp_vjp(ctx, g):
    return (g * ctx["out"],)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return a.tape._register("log", np.log(a.values), (a,), {"a": a.values},
                            a.requires_grad)


def _log_vjp(ctx, g):
    return (g / ctx["a"],)


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum())
    return a.tape._register("sum", out, (a,), {"shape": a.shape}, a.requires_grad)


def _sum_vjp(ctx, g):
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def tensor_mean(a: Tensor) -> Tensor:
    out = np.asarray(a.values.mean())
    return a.tape._register("mean", out, (a,),
                            {"shape": a.shape, "size": a.values.size},
                            a.requires_grad)


def _mean_vjp(ctx, g):
    return (np.broadcast_to(g / ctx["size"], ctx["shape"]).copy(),)


ROW_NORM_FLOOR = 1e-12


def row_l2_normalize(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"row_l2_normalize expects a 2-D tensor, got {a.shape}")
    norms = np.linalg.norm(a.values, axis=1, keepdims=True)
    if np.any(norms <= ROW_NORM_FLOOR):
        raise DomainError("row_l2_normalize: row norm below 1e-12")
    out = a.values / norms
    return a.tape._register("row_l2_normalize", out, (a,),
                            {"out": out, "norms": norms}, a.requires_grad)


def _row_l2_normalize_vjp(ctx, g):
    y, norms = ctx["out"], ctx["norms"]
    # d/dx (x / |x|) applied row-wise: (g - y <y, g>) / |x|
    inner = np.sum(g * y, axis=1, keepdims=True)
    return ((g - y * inner) / norms,)


def row_l2_normalize_safe(a: Tensor) -> Tensor:
    """Row normalization that passes dead rows through as zeros.

    A ReLU stack with zero biases can zero out an entire row for some
    inputs; the strict primitive treats that as a domain error, while this
    variant maps such rows to the zero vector and gives them zero gradient
    (the subgradient convention at the singularity). Live rows behave
    exactly like ``row_l2_normalize``.
    """
    if a.values.ndim != 2:
        raise ShapeError(f"row_l2_normalize_safe expects a 2-D tensor, got {a.shape}")
    norms = np.linalg.norm(a.values, axis=1, keepdims=True)
    live = norms > ROW_NORM_FLOOR
    divisors = np.where(live, norms, 1.0)
    out = np.where(live, a.values / divisors, 0.0)
    return a.tape._register("row_l2_normalize_safe", out, (a,),
                            {"out": out, "divisors": divisors, "live": live},
                            a.requires_grad)


def _row_l2_normalize_safe_vjp(ctx, g):
    y, divisors, live = ctx["out"], ctx["divisors"], ctx["live"]
    inner = np.sum(g * y, axis=1, keepdims=True)
    return (np.where(live, (g - y * inner) / divisors, 0.0),)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two equal-shape matrices, returned as an
    (n, 1) column so it composes with matmul-produced row sums."""
    tape = _check_same_tape("dot_rows", a, b)
    if a.values.ndim != 2 or a.shape != b.shape:
        raise ShapeError(
            f"dot_rows expects equal-shape 2-D tensors, got {a.shape} and {b.shape}")
    out = np.sum(a.values * b.values, axis=1, keepdims=True)
    return tape._register("dot_rows", out, (a, b), {"a": a.values, "b": b.values},
                          a.requires_grad or b.requires_grad)


def _dot_rows_vjp(ctx, g):
    return g * ctx["b"], g * ctx["a"]


def stop_gradient(a: Tensor) -> Tensor:
    return a.tape._register("stop_gradient", a.values, (a,), {}, False)


def _stop_gradient_vjp(ctx, g):
    return (None,)


def nearest_rank_index(values: np.ndarray, k_percent: float) -> int:
    """Index of the nearest-rank k% percentile element of a flat array.

    The selected value is the ceil(k/100 * n)-th smallest; among equal
    values the lowest original index wins.
    """
    flat = values.ravel()
    n = flat.size
    if n == 0:
        raise ValueError("percentile of an empty vector")
    if not 0.0 < k_percent <= 100.0:
        raise ValueError(f"k_percent must lie in (0, 100], got {k_percent}")
    rank = min(max(math.ceil(k_percent / 100.0 * n), 1), n)
    order = np.argsort(flat, kind="stable")
    value = flat[order[rank - 1]]
    return int(np.flatnonzero(flat == value)[0])


def percentile_select(v: Tensor, k_percent: float) -> tuple[Tensor, int]:
    """Nearest-rank percentile of a vector with a max-style subgradient.

    Returns the selected element as a scalar tensor plus its index in the
    input; gradient flows only through that element.
    """
    index = nearest_rank_index(v.values, k_percent)
    out = np.asarray(v.values.ravel()[index])
    t = v.tape._register("percentile_select", out, (v,),
                         {"index": index, "shape": v.shape}, v.requires_grad)
    return t, index


def _percentile_select_vjp(ctx, g):
    out = np.zeros(ctx["shape"])
    out.ravel()[ctx["index"]] = g
    return (out,)


_VJPS: dict[str, Callable] = {
    "matmul": _matmul_vjp,
    "add": _add_vjp,
    "sub": _sub_vjp,
    "mul": _mul_vjp,
    "scale": _scale_vjp,
    "relu": _relu_vjp,
    "exp": _exp_vjp,
    "log": _log_vjp,
    "sum": _sum_vjp,
    "mean": _mean_vjp,
    "row_l2_normalize": _row_l2_normalize_vjp,
    "row_l2_normalize_safe": _row_l2_normalize_safe_vjp,
    "dot_rows": _dot_rows_vjp,
    "stop_gradient": _stop_gradient_vjp,
    "percentile_select": _percentile_select_vjp,
}

_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "row_l2_normalize": row_l2_normalize,
    "dot_rows": dot_rows,
    "stop_gradient": stop_gradient,
}


def forward_primitive(kind: str, *inputs, **params) -> Tensor:
    """Apply a primitive by name. Raises ``ShapeError``/``DomainError`` with
    the primitive named in the message."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](*inputs, **params)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckResult:
    """Per-coordinate comparison of backward() against central differences."""

    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: np.ndarray

    @property
    def n_skipped(self) -> int:
        return int(self.skipped.sum())

    @property
    def n_checked(self) -> int:
        return int((~self.skipped).sum())


def finite_difference_check(f, x0, eps: float = 1e-5,
                            tol: float = 1e-4) -> GradCheckResult:
    """Compare backward() of ``f`` against central finite differences.

    ``f(tape, x)`` must build a scalar tensor from the leaf ``x``. Coordinates
    where a perturbed evaluation changes the branch signature (a relu kink or
    a percentile tie was crossed) are skipped rather than compared; the result
    records them. Relative errors use the denominator
    max(|analytic|, |numeric|, 1e-8). Results above ``tol`` are reported in
    ``max_rel_error``, never raised.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x0 = _as_array(x0)

    tape = Tape()
    x = tape.variable(x0)
    out = f(tape, x)
    if out.values.size != 1:
        raise ShapeError("finite_difference_check: f must build a scalar output")
    base_sig = tape.branch_signature()
    tape.backward(out)
    analytic = x.grad.copy()

    def evaluate(values: np.ndarray) -> tuple[float, tuple]:
        t = Tape()
        y = f(t, t.variable(values, requires_grad=False))
        return float(y.values), t.branch_signature()

    numeric = np.full(x0.size, np.nan)
    skipped = np.zeros(x0.size, dtype=bool)
    flat = x0.ravel()
    for i in range(x0.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        f_plus, sig_plus = evaluate(bumped.reshape(x0.shape))
        bumped[i] = flat[i] - eps
        f_minus, sig_minus = evaluate(bumped.reshape(x0.shape))
        if sig_plus != base_sig or sig_minus != base_sig:
            skipped[i] = True
            continue
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    rel = np.abs(a - numeric) / denom
    rel[skipped] = np.nan
    max_rel = float(np.nanmax(rel)) if (~skipped).any() else 0.0
    return GradCheckResult(max_rel, rel, analytic, numeric, skipped)
