"""Reverse-mode automatic differentiation on a tape of dense numpy arrays.

A :class:`Tape` records every operation applied to :class:`Node` objects in
execution order (a Wengert list).  ``gradient`` replays the list backwards,
accumulating vector-Jacobian products; ``jacobian`` runs the same sweep seeded
with an identity block so full Jacobians of vector outputs cost one pass of
matrix-shaped adjoints instead of one pass per row.

Values are always float64 ndarrays (0-d for scalars).  Domain failures (tan at
a pole, sqrt of a negative, norm gradient at zero radius, division by zero)
raise :class:`EvaluationError` instead of propagating NaN.

The free functions (``sin``, ``matmul``, ...) dispatch on type: applied to
plain ndarrays they compute with numpy directly, applied to nodes they record.
Code written against them runs in both numeric and differentiable mode.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "EvaluationError", "Tape", "Node", "gradient", "jacobian",
    "sin", "cos", "tan", "exp", "sqrt", "tanh", "logistic",
    "maximum", "minimum", "vsum", "dot", "matvec", "matmul", "norm",
    "square", "softmax", "reshape", "concat", "stack", "swapaxes",
    "linear_solve", "CustomOp",
]


class EvaluationError(Exception):
    """A primitive was evaluated outside its differentiable domain."""


def _asarray(x):
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(g, lead, shape):
    """Reduce adjoint ``g`` (lead axes + broadcast shape) to lead + ``shape``."""
    extra = (g.ndim - lead) - len(shape)
    for _ in range(extra):
        g = g.sum(axis=lead)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[lead + i] != 1:
            g = g.sum(axis=lead + i, keepdims=True)
    return g


def _expand(g, lead, axis, shape):
    """Inverse of a sum over ``axis``: insert the axes back and broadcast."""
    if axis is None:
        out = np.broadcast_to(g.reshape(g.shape + (1,) * len(shape)),
                              g.shape + tuple(shape))
        return out
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    g2 = g
    for a in sorted(axes):
        g2 = np.expand_dims(g2, lead + a)
    return np.broadcast_to(g2, g2.shape[:lead] + tuple(shape))


class Node:
    """One tape entry: an operation, its parents, and the computed value."""

    __slots__ = ("tape", "idx", "op", "parents", "ctx", "value")

    # keep numpy from absorbing us into object arrays; defer to __r*__ instead
    __array_ufunc__ = None

    def __init__(self, tape, idx, op, parents, ctx, value):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def _wrap(self, other):
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ValueError("nodes belong to different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, o):
        return self.tape._record("add", (self, self._wrap(o)), None)

    def __radd__(self, o):
        return self.tape._record("add", (self._wrap(o), self), None)

    def __sub__(self, o):
        return self.tape._record("sub", (self, self._wrap(o)), None)

    def __rsub__(self, o):
        return self.tape._record("sub", (self._wrap(o), self), None)

    def __mul__(self, o):
        return self.tape._record("mul", (self, self._wrap(o)), None)

    def __rmul__(self, o):
        return self.tape._record("mul", (self._wrap(o), self), None)

    def __truediv__(self, o):
        return self.tape._record("div", (self, self._wrap(o)), None)

    def __rtruediv__(self, o):
        return self.tape._record("div", (self._wrap(o), self), None)

    def __neg__(self):
        return self.tape._record("neg", (self,), None)

    def __matmul__(self, o):
        return matmul(self, self._wrap(o))

    def __rmatmul__(self, o):
        return matmul(self._wrap(o), self)

    def __getitem__(self, key):
        return self.tape._record("getitem", (self,), key)


# ---------------------------------------------------------------------------
# forward rules: op -> f(parent_values, ctx) -> value

def _fwd_div(vals, ctx):
    a, b = vals
    if np.any(b == 0.0):
        raise EvaluationError("division by zero")
    return a / b


def _fwd_tan(vals, ctx):
    (x,) = vals
    if np.any(np.abs(np.cos(x)) < 1e-12):
        raise EvaluationError("tan evaluated at a pole")
    return np.tan(x)


def _fwd_sqrt(vals, ctx):
    (x,) = vals
    if np.any(x < 0.0):
        raise EvaluationError("sqrt of a negative argument")
    return np.sqrt(x)


def _fwd_norm(vals, ctx):
    (x,) = vals
    return np.sqrt(np.sum(x * x, axis=ctx))


def _fwd_logistic(vals, ctx):
    (x,) = vals
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fwd_softmax(vals, ctx):
    (x,) = vals
    m = np.max(x, axis=ctx, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=ctx, keepdims=True)


def _fwd_matmul(vals, ctx):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects stacked matrices; use dot/matvec")
    return np.matmul(a, b)


def _fwd_linear_solve(vals, ctx):
    a, b = vals
    try:
        return np.linalg.solve(a, b[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise EvaluationError(f"singular matrix in linear_solve: {e}") from e


def _fwd_getitem(vals, key):
    return vals[0][key]


def _fwd_concat(vals, axis):
    return np.concatenate(vals, axis=axis)


_FORWARD = {
    "const": None,
    "var": None,
    "add": lambda v, c: v[0] + v[1],
    "sub": lambda v, c: v[0] - v[1],
    "mul": lambda v, c: v[0] * v[1],
    "div": _fwd_div,
    "neg": lambda v, c: -v[0],
    "sin": lambda v, c: np.sin(v[0]),
    "cos": lambda v, c: np.cos(v[0]),
    "tan": _fwd_tan,
    "exp": lambda v, c: np.exp(v[0]),
    "sqrt": _fwd_sqrt,
    "tanh": lambda v, c: np.tanh(v[0]),
    "logistic": _fwd_logistic,
    "maximum": lambda v, c: np.maximum(v[0], c),
    "minimum": lambda v, c: np.minimum(v[0], c),
    "sum": lambda v, c: np.sum(v[0], axis=c),
    "dot": lambda v, c: np.dot(v[0], v[1]),
    "matvec": lambda v, c: v[0] @ v[1],
    "matmul": _fwd_matmul,
    "norm": _fwd_norm,
    "square": lambda v, c: v[0] * v[0],
    "softmax": _fwd_softmax,
    "reshape": lambda v, c: v[0].reshape(c),
    "getitem": _fwd_getitem,
    "concat": _fwd_concat,
    "stack": lambda v, c: np.stack(v, axis=c),
    "swapaxes": lambda v, c: np.swapaxes(v[0], c[0], c[1]),
    "linear_solve": _fwd_linear_solve,
}


# ---------------------------------------------------------------------------
# backward rules: (node, adjoint g, lead axis count) -> [(parent, grad), ...]
# Every rule must accept adjoints with `lead` extra leading axes so one sweep
# can carry a whole identity block (see `jacobian`).

def _bwd_add(n, g, lead):
    a, b = n.parents
    return [(a, _unbroadcast(g, lead, a.shape)), (b, _unbroadcast(g, lead, b.shape))]


def _bwd_sub(n, g, lead):
    a, b = n.parents
    return [(a, _unbroadcast(g, lead, a.shape)), (b, _unbroadcast(-g, lead, b.shape))]


def _bwd_mul(n, g, lead):
    a, b = n.parents
    return [(a, _unbroadcast(g * b.value, lead, a.shape)),
            (b, _unbroadcast(g * a.value, lead, b.shape))]


def _bwd_div(n, g, lead):
    a, b = n.parents
    gb = -g * a.value / (b.value * b.value)
    return [(a, _unbroadcast(g / b.value, lead, a.shape)),
            (b, _unbroadcast(gb, lead, b.shape))]


def _bwd_sqrt(n, g, lead):
    (a,) = n.parents
    if np.any(a.value == 0.0):
        raise EvaluationError("sqrt gradient at zero argument")
    return [(a, g / (2.0 * n.value))]


def _bwd_norm(n, g, lead):
    (a,) = n.parents
    if np.any(n.value == 0.0):
        raise EvaluationError("norm gradient at zero radius")
    axis = n.ctx
    r = _expand(g / n.value, lead, axis, a.shape)
    return [(a, r * a.value)]


def _bwd_sum(n, g, lead):
    (a,) = n.parents
    return [(a, _expand(g, lead, n.ctx, a.shape))]


def _bwd_dot(n, g, lead):
    a, b = n.parents
    return [(a, g[..., None] * b.value), (b, g[..., None] * a.value)]


def _bwd_matvec(n, g, lead):
    m, v = n.parents
    return [(m, g[..., :, None] * v.value), (v, g @ m.value)]


def _bwd_matmul(n, g, lead):
    a, b = n.parents
    ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
    gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
    return [(a, _unbroadcast(ga, lead, a.shape)), (b, _unbroadcast(gb, lead, b.shape))]


def _bwd_softmax(n, g, lead):
    (a,) = n.parents
    s = n.value
    axis = n.ctx % len(a.shape) + lead
    inner = np.sum(g * s, axis=axis, keepdims=True)
    return [(a, s * (g - inner))]


def _bwd_getitem(n, g, lead):
    (a,) = n.parents
    out = np.zeros(g.shape[:lead] + a.shape, dtype=np.float64)
    key = n.ctx if isinstance(n.ctx, tuple) else (n.ctx,)
    full = (slice(None),) * lead + key
    if any(isinstance(k, np.ndarray) or isinstance(k, list) for k in key):
        np.add.at(out, full, g)
    else:
        out[full] += g
    return [(a, out)]


def _bwd_concat(n, g, lead):
    axis = n.ctx % (g.ndim - lead) + lead
    sizes = [p.shape[n.ctx] for p in n.parents]
    offs = np.cumsum([0] + sizes)
    grads = []
    for p, lo, hi in zip(n.parents, offs[:-1], offs[1:]):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(lo, hi)
        grads.append((p, g[tuple(sl)]))
    return grads


def _bwd_stack(n, g, lead):
    axis = n.ctx % (len(n.shape)) + lead
    grads = []
    for i, p in enumerate(n.parents):
        sl = [slice(None)] * g.ndim
        sl[axis] = i
        grads.append((p, g[tuple(sl)]))
    return grads


def _bwd_linear_solve(n, g, lead):
    # A is constant by contract; only b receives a gradient: b_bar = A^-T g.
    a, b = n.parents
    at = np.swapaxes(a.value, -1, -2)
    gb = np.linalg.solve(at, g[..., None])[..., 0]
    return [(b, gb)]


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "neg": lambda n, g, lead: [(n.parents[0], -g)],
    "sin": lambda n, g, lead: [(n.parents[0], g * np.cos(n.parents[0].value))],
    "cos": lambda n, g, lead: [(n.parents[0], -g * np.sin(n.parents[0].value))],
    "tan": lambda n, g, lead: [(n.parents[0], g * (1.0 + n.value * n.value))],
    "exp": lambda n, g, lead: [(n.parents[0], g * n.value)],
    "sqrt": _bwd_sqrt,
    "tanh": lambda n, g, lead: [(n.parents[0], g * (1.0 - n.value * n.value))],
    "logistic": lambda n, g, lead: [(n.parents[0], g * n.value * (1.0 - n.value))],
    # subgradient 0 at the kink: strict comparison drops x == c
    "maximum": lambda n, g, lead: [(n.parents[0], g * (n.parents[0].value > n.ctx))],
    "minimum": lambda n, g, lead: [(n.parents[0], g * (n.parents[0].value < n.ctx))],
    "sum": _bwd_sum,
    "dot": _bwd_dot,
    "matvec": _bwd_matvec,
    "matmul": _bwd_matmul,
    "norm": _bwd_norm,
    "square": lambda n, g, lead: [(n.parents[0], 2.0 * g * n.parents[0].value)],
    "softmax": _bwd_softmax,
    "reshape": lambda n, g, lead: [(n.parents[0],
                                    g.reshape(g.shape[:lead] + n.parents[0].shape))],
    "getitem": _bwd_getitem,
    "concat": _bwd_concat,
    "stack": _bwd_stack,
    "swapaxes": lambda n, g, lead: [(n.parents[0],
                                     np.swapaxes(g, n.ctx[0] + lead if n.ctx[0] >= 0 else n.ctx[0],
                                                 n.ctx[1] + lead if n.ctx[1] >= 0 else n.ctx[1]))],
    "linear_solve": _bwd_linear_solve,
}


class CustomOp:
    """Extension point for composite primitives (e.g. an implicit map).

    Subclasses provide ``forward(values, ctx) -> value`` and
    ``vjp(values, value, g, lead, ctx) -> [grad-per-parent or None]``; the vjp
    must accept ``lead`` extra leading adjoint axes like built-in rules.
    """

    name = "custom"

    def forward(self, values, ctx):
        raise NotImplementedError

    def vjp(self, values, value, g, lead, ctx):
        raise NotImplementedError


class Tape:
    """Append-only record of operations; supports replay with fresh leaf values."""

    def __init__(self):
        self.nodes = []

    def _append(self, op, parents, ctx, value):
        node = Node(self, len(self.nodes), op, parents, ctx, value)
        self.nodes.append(node)
        return node

    def _record(self, op, parents, ctx):
        value = _FORWARD[op]([p.value for p in parents], ctx)
        return self._append(op, parents, ctx, _asarray(value))

    def var(self, value):
        """A differentiable leaf."""
        return self._append("var", (), None, _asarray(value).copy())

    def const(self, value):
        """A non-differentiable leaf."""
        return self._append("const", (), None, _asarray(value))

    def custom(self, op: CustomOp, parents, ctx=None):
        parents = tuple(parents)
        value = op.forward([p.value for p in parents], ctx)
        return self._append(op, parents, ctx, _asarray(value))

    def replay(self):
        """Recompute all non-leaf values in order after leaf values changed."""
        for n in self.nodes:
            if n.op == "var" or n.op == "const":
                continue
            vals = [p.value for p in n.parents]
            if isinstance(n.op, CustomOp):
                n.value = _asarray(n.op.forward(vals, n.ctx))
            else:
                n.value = _asarray(_FORWARD[n.op](vals, n.ctx))

    def set_value(self, node, value):
        v = _asarray(value)
        if v.shape != node.value.shape:
            raise ValueError(f"shape mismatch: {v.shape} vs {node.value.shape}")
        node.value = v


def _sweep(output: Node, seed: np.ndarray, lead: int, inputs):
    tape = output.tape
    adjoint = {output.idx: seed}
    wanted = {id(n) for n in inputs}
    for node in reversed(tape.nodes[: output.idx + 1]):
        g = adjoint.pop(node.idx, None)
        if g is None:
            continue
        if node.op == "var" or node.op == "const":
            if id(node) in wanted:
                adjoint[node.idx] = g
            continue
        if isinstance(node.op, CustomOp):
            vals = [p.value for p in node.parents]
            pgrads = node.op.vjp(vals, node.value, g, lead, node.ctx)
            pairs = [(p, pg) for p, pg in zip(node.parents, pgrads) if pg is not None]
        else:
            pairs = _BACKWARD[node.op](node, g, lead)
        for parent, pg in pairs:
            if parent.op == "const":
                continue
            prev = adjoint.get(parent.idx)
            adjoint[parent.idx] = pg if prev is None else prev + pg
    out = []
    for n in inputs:
        g = adjoint.get(n.idx)
        if g is None:
            g = np.zeros(seed.shape[:lead] + n.shape, dtype=np.float64)
        out.append(g)
    return out


def gradient(output: Node, inputs):
    """Gradients of a scalar output with respect to each input node."""
    if output.value.shape != ():
        raise ValueError("gradient requires a scalar output; "
                         f"got shape {output.value.shape}")
    single = isinstance(inputs, Node)
    nodes = [inputs] if single else list(inputs)
    grads = _sweep(output, np.ones(()), 0, nodes)
    return grads[0] if single else grads


def jacobian(output: Node, input_node: Node):
    """Dense Jacobian d(output)/d(input) of shape (output.size, input.size).

    One backward sweep seeded with an identity block; adjoints carry a leading
    output axis, so the cost is a handful of matrix products rather than one
    sweep per output row.
    """
    n_out = int(np.prod(output.value.shape)) if output.value.shape else 1
    seed = np.eye(n_out, dtype=np.float64).reshape((n_out,) + output.value.shape)
    (g,) = _sweep(output, seed, 1, [input_node])
    n_in = int(np.prod(input_node.shape)) if input_node.shape else 1
    return g.reshape(n_out, n_in)


# ---------------------------------------------------------------------------
# dual-mode functions: numpy arrays compute, nodes record

def _dispatch(op, x, ctx=None):
    if isinstance(x, Node):
        return x.tape._record(op, (x,), ctx)
    return _asarray(_FORWARD[op]([_asarray(x)], ctx))


def sin(x):
    return _dispatch("sin", x)


def cos(x):
    return _dispatch("cos", x)


def tan(x):
    return _dispatch("tan", x)


def exp(x):
    return _dispatch("exp", x)


def sqrt(x):
    return _dispatch("sqrt", x)


def tanh(x):
    return _dispatch("tanh", x)


def logistic(x):
    return _dispatch("logistic", x)


def square(x):
    return _dispatch("square", x)


def maximum(x, c):
    """Elementwise max with a constant; subgradient 0 where x == c."""
    return _dispatch("maximum", x, float(c) if np.isscalar(c) else _asarray(c))


def minimum(x, c):
    return _dispatch("minimum", x, float(c) if np.isscalar(c) else _asarray(c))


def vsum(x, axis=None):
    return _dispatch("sum", x, axis)


def norm(x, axis=None):
    """Euclidean norm; gradient is undefined (and reported) at zero radius."""
    return _dispatch("norm", x, axis)


def softmax(x, axis=-1):
    return _dispatch("softmax", x, axis)


def reshape(x, shape):
    return _dispatch("reshape", x, tuple(shape))


def swapaxes(x, a, b):
    return _dispatch("swapaxes", x, (a, b))


def _binary(op, a, b):
    if isinstance(a, Node) or isinstance(b, Node):
        tape = a.tape if isinstance(a, Node) else b.tape
        an = a if isinstance(a, Node) else tape.const(a)
        bn = b if isinstance(b, Node) else tape.const(b)
        return tape._record(op, (an, bn), None)
    return _asarray(_FORWARD[op]([_asarray(a), _asarray(b)], None))


def dot(a, b):
    return _binary("dot", a, b)


def matvec(m, v):
    return _binary("matvec", m, v)


def matmul(a, b):
    return _binary("matmul", a, b)


def concat(parts, axis=0):
    nodes = [p for p in parts if isinstance(p, Node)]
    if nodes:
        tape = nodes[0].tape
        parents = tuple(p if isinstance(p, Node) else tape.const(p) for p in parts)
        value = _FORWARD["concat"]([p.value for p in parents], axis)
        return tape._append("concat", parents, axis, value)
    return np.concatenate([_asarray(p) for p in parts], axis=axis)


def stack(parts, axis=0):
    nodes = [p for p in parts if isinstance(p, Node)]
    if nodes:
        tape = nodes[0].tape
        parents = tuple(p if isinstance(p, Node) else tape.const(p) for p in parts)
        value = _FORWARD["stack"]([p.value for p in parents], axis)
        return tape._append("stack", parents, axis, value)
    return np.stack([_asarray(p) for p in parts], axis=axis)


def linear_solve(a, b):
    """Solve a @ x = b where ``a`` is held constant (no gradient into a)."""
    if isinstance(b, Node):
        tape = b.tape
        an = a if isinstance(a, Node) else tape.const(a)
        return tape._record("linear_solve", (an, b), None)
    if isinstance(a, Node):
        return a.tape._record("linear_solve", (a, a.tape.const(b)), None)
    return _asarray(_fwd_linear_solve([_asarray(a), _asarray(b)], None))
