"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are define-by-run: each operation returns a `Node` holding the forward
value plus vector-Jacobian products against its inputs, and `backward` walks
the graph once from a scalar root, accumulating gradients into every node
that requires them. Graphs are rebuilt on every forward pass; parameters are
the only state carried across passes.

A central-difference checker (`finite_difference_check`) serves as the
independent oracle for every gradient in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    GradientCheckError,
    NonSmoothPointError,
    ShapeError,
)

Array = np.ndarray


def as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in a computation graph.

    `value` is always a float64 ndarray (scalars have shape ()). `grad`
    accumulates additively across backward passes until reset to None.
    Forward values never depend on whether gradients were requested.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "attrs", "name", "_vjps")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf", name: str | None = None):
        self.value = as_array(value)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.attrs: dict = {}
        self.name = name
        self._vjps: tuple = ()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or self.op
        return f"Node({tag}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, op="param", name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _result(value, op: str, vjps, attrs: dict | None = None) -> Node:
    node = Node(value, requires_grad=any(p.requires_grad for p, _ in vjps), op=op)
    if node.requires_grad or vjps:
        # Parent links are kept even for non-differentiable nodes that sit on
        # a differentiable path, so graph walks (tie detection) see them.
        node._vjps = tuple(vjps)
    if attrs:
        node.attrs.update(attrs)
    return node


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    va, vb = a.value, b.value
    if va.ndim not in (1, 2) or vb.ndim not in (1, 2):
        raise ShapeError("matmul", (va.shape, vb.shape), "operands must be 1-d or 2-d")
    if va.shape[-1] != vb.shape[0]:
        raise ShapeError("matmul", (va.shape, vb.shape), "inner dimensions differ")
    out = va @ vb

    def vjp_a(g):
        if va.ndim == 2 and vb.ndim == 2:
            return g @ vb.T
        if va.ndim == 1 and vb.ndim == 2:
            return vb @ g
        if va.ndim == 2 and vb.ndim == 1:
            return np.outer(g, vb)
        return g * vb

    def vjp_b(g):
        if va.ndim == 2 and vb.ndim == 2:
            return va.T @ g
        if va.ndim == 1 and vb.ndim == 2:
            return np.outer(va, g)
        if va.ndim == 2 and vb.ndim == 1:
            return va.T @ g
        return g * va

    return _result(out, "matmul", [(a, vjp_a), (b, vjp_b)])


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    va, vb = a.value, b.value
    try:
        out = va + vb
    except ValueError:
        raise ShapeError("add", (va.shape, vb.shape), "shapes do not broadcast") from None
    return _result(
        out,
        "add",
        [(a, lambda g: _unbroadcast(g, va.shape)), (b, lambda g: _unbroadcast(g, vb.shape))],
    )


def scale(a, factor: float) -> Node:
    a = _wrap(a)
    factor = float(factor)
    return _result(a.value * factor, "scale", [(a, lambda g: g * factor)])


def negate(a) -> Node:
    a = _wrap(a)
    return _result(-a.value, "negate", [(a, lambda g: -g)])


def exp(a) -> Node:
    a = _wrap(a)
    out = np.exp(a.value)
    return _result(out, "exp", [(a, lambda g: g * out)])


def log(a) -> Node:
    a = _wrap(a)
    va = a.value
    if np.any(va < 0.0):
        raise ShapeError("log", (va.shape,), "negative input")
    with np.errstate(divide="ignore"):
        out = np.log(va)

    def vjp(g):
        # Zero upstream gradient contributes zero even where the input is 0
        # (1/0 = inf there); keeps inactive hinge branches NaN-free at exact
        # zero distances. A nonzero upstream at 0 is a declared singularity.
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(g == 0.0, 0.0, g / va)

    return _result(out, "log", [(a, vjp)])


def relu(a) -> Node:
    a = _wrap(a)
    va = a.value
    return _result(np.maximum(va, 0.0), "relu", [(a, lambda g: g * (va > 0.0))])


def square(a) -> Node:
    a = _wrap(a)
    va = a.value
    return _result(va * va, "square", [(a, lambda g: 2.0 * va * g)])


def _reduce_extreme(a, axis, op_name: str) -> Node:
    a = _wrap(a)
    va = a.value
    if va.size == 0:
        raise ShapeError(op_name, (va.shape,), "empty input")
    if op_name == "reduce_max":
        out = va.max(axis=axis)
        arg = va.argmax(axis=axis)  # numpy breaks ties to the lowest index
    else:
        out = va.min(axis=axis)
        arg = va.argmin(axis=axis)
    if axis is None:
        tie = int((va == out).sum()) > 1
    else:
        tie = bool(((va == np.expand_dims(out, axis)).sum(axis=axis) > 1).any())

    def vjp(g):
        gi = np.zeros_like(va)
        if axis is None:
            gi.flat[arg] = g
        else:
            np.put_along_axis(gi, np.expand_dims(arg, axis), np.expand_dims(as_array(g), axis), axis)
        return gi

    return _result(out, op_name, [(a, vjp)], attrs={"arg_index": arg, "tie": tie})


def reduce_max(a, axis: int | None = None) -> Node:
    """Maximum over all entries (axis=None) or along one axis.

    The winning index is exposed in `attrs["arg_index"]`; gradient is routed
    only to the winner, with ties broken to the lowest index.
    """
    return _reduce_extreme(a, axis, "reduce_max")


def reduce_min(a, axis: int | None = None) -> Node:
    return _reduce_extreme(a, axis, "reduce_min")


def reduce_sum(a, axis: int | None = None) -> Node:
    a = _wrap(a)
    va = a.value
    out = va.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(va.shape, g)
        return np.broadcast_to(np.expand_dims(g, axis), va.shape).copy()

    return _result(out, "sum", [(a, vjp)])


def pairwise_sq_dist(e, r, num_classes: int | None = None, modes_per_class: int | None = None) -> Node:
    """Squared Euclidean distances from one vector to a set of target vectors.

    `e` must be 1-d. `r` may be a single vector (scalar output), an (M, dim)
    matrix, an (N, K, dim) tensor, or a flat (1, N*K*dim) weight row when
    `num_classes`/`modes_per_class` are given; the last two produce (N, K).
    """
    e, r = _wrap(e), _wrap(r)
    ve, vr = e.value, r.value
    if ve.ndim != 1:
        raise ShapeError("pairwise_sq_dist", (ve.shape, vr.shape), "query must be 1-d")
    dim = ve.shape[0]
    if vr.ndim == 1:
        if vr.shape[0] != dim:
            raise ShapeError("pairwise_sq_dist", (ve.shape, vr.shape))
        targets = vr.reshape(1, dim)
        out_shape: tuple = ()
    elif vr.ndim == 3:
        if vr.shape[2] != dim:
            raise ShapeError("pairwise_sq_dist", (ve.shape, vr.shape))
        targets = vr.reshape(-1, dim)
        out_shape = vr.shape[:2]
    elif vr.ndim == 2:
        if num_classes is not None and modes_per_class is not None and vr.shape == (
            1,
            num_classes * modes_per_class * dim,
        ):
            targets = vr.reshape(-1, dim)
            out_shape = (num_classes, modes_per_class)
        elif vr.shape[1] == dim:
            targets = vr
            out_shape = (vr.shape[0],)
        else:
            raise ShapeError("pairwise_sq_dist", (ve.shape, vr.shape))
    else:
        raise ShapeError("pairwise_sq_dist", (ve.shape, vr.shape))

    diff = targets - ve
    out = (diff * diff).sum(axis=1).reshape(out_shape)

    def vjp_e(g):
        gf = as_array(g).reshape(-1, 1)
        return (-2.0 * diff * gf).sum(axis=0)

    def vjp_r(g):
        gf = as_array(g).reshape(-1, 1)
        return (2.0 * diff * gf).reshape(vr.shape)

    return _result(out, "pairwise_sq_dist", [(e, vjp_e), (r, vjp_r)])


def l2_normalize(a, epsilon: float = 1e-12) -> Node:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    a = _wrap(a)
    va = a.value
    if va.ndim not in (1, 2):
        raise ShapeError("l2_normalize", (va.shape,), "expected 1-d or 2-d input")
    norms = np.sqrt((va * va).sum(axis=-1, keepdims=True))
    if np.any(norms < epsilon):
        raise DegenerateVectorError(
            f"l2_normalize: norm {float(norms.min()):.3e} below epsilon {epsilon:.1e}"
        )
    out = va / norms

    def vjp(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        return (g - radial * out) / norms

    return _result(out, "l2_normalize", [(a, vjp)])


@dataclass
class BatchNormState:
    """Running statistics and mode for one batch-norm layer."""

    running_mean: Array
    running_var: Array
    momentum: float = 0.9
    epsilon: float = 1e-5
    mode: str = "train"  # "train" | "eval"

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.9, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(num_features),
            running_var=np.ones(num_features),
            momentum=float(momentum),
            epsilon=float(epsilon),
        )


def batch_norm(x, gamma, beta, state: BatchNormState, update_stats: bool = True) -> Node:
    """Batch normalization over axis 0 with learnable per-feature affine.

    Train mode normalizes with batch statistics (batch size >= 2) and, when
    `update_stats`, advances the running estimates. Eval mode uses only the
    stored statistics, independent of batch content.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    vx, vg, vb = x.value, gamma.value, beta.value
    if vx.ndim != 2:
        raise ShapeError("batch_norm", (vx.shape,), "expected (batch, features)")
    nfeat = vx.shape[1]
    if vg.shape != (nfeat,) or vb.shape != (nfeat,):
        raise ShapeError("batch_norm", (vx.shape, vg.shape, vb.shape), "affine shape mismatch")

    if state.mode == "train":
        batch = vx.shape[0]
        if batch < 2:
            raise ShapeError("batch_norm", (vx.shape,), "train mode needs batch size >= 2")
        mean = vx.mean(axis=0)
        var = vx.var(axis=0)
        inv = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (vx - mean) * inv
        if update_stats:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mean
            state.running_var = m * state.running_var + (1.0 - m) * var

        def vjp_x(g):
            dxhat = g * vg
            return (inv / batch) * (
                batch * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )

    elif state.mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (vx - state.running_mean) * inv

        def vjp_x(g):
            return g * vg * inv

    else:
        raise ValueError(f"batch_norm: unknown mode '{state.mode}'")

    out = vg * xhat + vb
    return _result(
        out,
        "batch_norm",
        [
            (x, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=0)),
            (beta, lambda g: g.sum(axis=0)),
        ],
    )


_OP_KINDS = (
    "matmul",
    "add",
    "scale",
    "exp",
    "log",
    "negate",
    "relu",
    "square",
    "reduce_max",
    "reduce_min",
    "sum",
    "pairwise_sq_dist",
    "l2_normalize",
    "batch_norm",
)


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Node:
    """Uniform dispatcher over the supported primitive kinds."""
    attrs = dict(attrs or {})
    if kind not in _OP_KINDS:
        raise ValueError(f"unsupported op kind '{kind}'; expected one of {_OP_KINDS}")
    ins = [_wrap(x) for x in inputs]
    if kind == "matmul":
        return matmul(*ins)
    if kind == "add":
        return add(*ins)
    if kind == "scale":
        return scale(ins[0], attrs["factor"])
    if kind == "exp":
        return exp(ins[0])
    if kind == "log":
        return log(ins[0])
    if kind == "negate":
        return negate(ins[0])
    if kind == "relu":
        return relu(ins[0])
    if kind == "square":
        return square(ins[0])
    if kind == "reduce_max":
        return reduce_max(ins[0], axis=attrs.get("axis"))
    if kind == "reduce_min":
        return reduce_min(ins[0], axis=attrs.get("axis"))
    if kind == "sum":
        return reduce_sum(ins[0], axis=attrs.get("axis"))
    if kind == "pairwise_sq_dist":
        return pairwise_sq_dist(
            ins[0], ins[1], attrs.get("num_classes"), attrs.get("modes_per_class")
        )
    if kind == "l2_normalize":
        return l2_normalize(ins[0], epsilon=attrs.get("epsilon", 1e-12))
    return batch_norm(ins[0], ins[1], ins[2], attrs["state"], attrs.get("update_stats", True))


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # parents precede consumers


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into `.grad` of every requires_grad node.

    Repeated calls without clearing gradients accumulate additively.
    """
    if root.value.shape != ():
        raise ValueError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _topo_order(root)
    grads: dict[int, Array] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, vjp in node._vjps:
            if not parent.requires_grad:
                continue
            contrib = as_array(vjp(g))
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def graph_has_tie(root: Node) -> bool:
    """True when any reachable max/min reduction sat exactly on a tie."""
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.attrs.get("tie"):
            return True
        stack.extend(p for p, _ in node._vjps)
    return False


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_check(
    f: Callable[[list[Node]], Node],
    params: Sequence[Node],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients of `f(params)` against central differences.

    Returns the maximum over all coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    `f` must rebuild its graph on every call and be side-effect free.
    Raises NonSmoothPointError when the nominal evaluation hits an exact tie
    in a max/min reduction, and GradientCheckError when any evaluation or
    analytic gradient is NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    root = f(params)
    if not isinstance(root, Node) or root.value.shape != ():
        raise ValueError("f must return a scalar Node")
    if math.isnan(float(root.value)):
        raise GradientCheckError("nominal evaluation is NaN")
    if graph_has_tie(root):
        raise NonSmoothPointError("objective is at an exact max/min tie; gradient check skipped")

    zero_grads(params)
    backward(root)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        aflat = analytic[pi].reshape(-1)
        for ci in range(p.value.size):
            idx = np.unravel_index(ci, p.value.shape)
            name = p.name or f"param{pi}"
            if math.isnan(aflat[ci]):
                raise GradientCheckError(f"analytic gradient NaN at {name}[{ci}]")
            orig = p.value[idx]
            p.value[idx] = orig + step
            plus = float(f(params).value)
            p.value[idx] = orig - step
            minus = float(f(params).value)
            p.value[idx] = orig
            if math.isnan(plus) or math.isnan(minus):
                raise GradientCheckError(f"NaN objective while perturbing {name}[{ci}]")
            numeric = (plus - minus) / (2.0 * step)
            rel = abs(aflat[ci] - numeric) / max(1.0, abs(aflat[ci]), abs(numeric))
            worst = max(worst, rel)
    return worst
