"""Small reverse-mode autodiff over numpy arrays.

Every op's adjoint is written with the same ops, so differentiating a
gradient (reverse-over-reverse) reuses the machinery unchanged. Hessian-vector
products and mixed second-order products are built that way, matrix-free.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Node", "Tape", "FlatVector", "Program",
    "AutodiffError", "NumericOverflowError", "MalformedProgramError", "SupportMismatchError",
    "leaf", "const", "gather", "scatter", "spmm", "scale", "add", "mul", "rowscale", "rowdot",
    "sigmoid", "log", "reciprocal", "log_sigmoid", "neg", "sum_all", "expand",
    "grad", "no_record", "evaluate", "gradient", "hvp", "mixed_vhp", "SecondOrder",
]


class AutodiffError(Exception):
    pass


class NumericOverflowError(AutodiffError, FloatingPointError):
    pass


class MalformedProgramError(AutodiffError, ValueError):
    pass


class SupportMismatchError(AutodiffError, ValueError):
    pass


_ids = itertools.count()
_local = threading.local()


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.recording = True
    return _local


@contextmanager
def no_record():
    """Ops inside this block produce constants (no graph links)."""
    st = _state()
    prev = st.recording
    st.recording = False
    try:
        yield
    finally:
        st.recording = prev


class Node:
    __slots__ = ("id", "op", "inputs", "params", "value", "name")

    def __init__(self, op, inputs, params, value, name=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.params = params
        self.value = value
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node#{self.id}<{self.op}{'' if self.name is None else ' ' + self.name} {self.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Tape:
    """Records the nodes created while it is active.

    Nodes are appended in creation order, so inputs always precede the
    node that consumes them.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: Optional[Node] = None
        self.leaves: dict[str, Node] = {}
        self.supports: dict[str, np.ndarray] = {}

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False

    def replay(self) -> np.ndarray:
        """Recompute every recorded node from the leaf values; returns the output value."""
        if self.output is None:
            raise MalformedProgramError("tape has no output")
        values = {}
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                values[node.id] = node.value
                continue
            args = [values.get(x.id, x.value) for x in node.inputs]
            values[node.id] = _FORWARD[node.op](node.params, *args)
        return values.get(self.output.id, self.output.value)


def _check_finite(op, value, inputs):
    if not np.all(np.isfinite(value)):
        names = ", ".join(repr(x) for x in inputs)
        raise NumericOverflowError(f"non-finite value produced by op '{op}' (inputs: {names})")


def _make(op, inputs, params=None):
    value = _FORWARD[op](params, *[x.value for x in inputs])
    _check_finite(op, value, inputs)
    st = _state()
    if not st.recording:
        return Node("const", (), None, value)
    node = Node(op, tuple(inputs), params, value)
    if st.tapes:
        st.tapes[-1].nodes.append(node)
    return node


def _register(node):
    st = _state()
    if st.tapes:
        st.tapes[-1].nodes.append(node)
    return node


def leaf(value, name=None) -> Node:
    value = np.asarray(value, dtype=np.float64)
    _check_finite("leaf", value, ())
    return _register(Node("leaf", (), None, value, name))


def const(value) -> Node:
    return _register(Node("const", (), None, np.asarray(value, dtype=np.float64)))


# -- forward rules -------------------------------------------------------------

def _scatter_fwd(p, x):
    rows, n = p
    out = np.zeros((n,) + x.shape[1:])
    if _strictly_increasing(rows):
        out[rows] = x
    elif x.ndim == 2:
        sel = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
        out = np.asarray(sel @ x)
    else:
        np.add.at(out, rows, x)
    return out


def _strictly_increasing(rows):
    return len(rows) < 2 or bool(np.all(rows[1:] > rows[:-1]))


_FORWARD: dict[str, Callable] = {
    "gather": lambda p, x: x[p],
    "scatter": _scatter_fwd,
    "spmm": lambda p, x: np.asarray(p[0] @ x),
    "scale": lambda p, x: p * x,
    "add": lambda p, a, b: a + b,
    "mul": lambda p, a, b: a * b,
    "rowscale": lambda p, s, x: s[:, None] * x,
    "rowdot": lambda p, a, b: np.einsum("ij,ij->i", a, b),
    "sigmoid": lambda p, x: 0.5 * (1.0 + np.tanh(0.5 * x)),
    "log": lambda p, x: np.log(x),
    "reciprocal": lambda p, x: 1.0 / x,
    "log_sigmoid": lambda p, x: -np.logaddexp(0.0, -x),
    "neg": lambda p, x: -x,
    "sum": lambda p, x: np.asarray(x.sum()),
    "expand": lambda p, s: np.full(p, float(s)),
}


# -- ops -------------------------------------------------------------------------

def gather(x: Node, rows) -> Node:
    rows = np.asarray(rows, dtype=np.int64)
    n = x.shape[0]
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise MalformedProgramError(f"gather row id out of range [0, {n})")
    return _make("gather", (x,), rows)


def scatter(x: Node, rows, n: int) -> Node:
    """Adjoint of gather: add rows of x into a zero array with n rows."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise MalformedProgramError(f"scatter row id out of range [0, {n})")
    return _make("scatter", (x,), (rows, n))


def spmm(matrix, x: Node, transpose=None) -> Node:
    """Constant (sparse or dense) matrix times x. The matrix is never differentiated.

    ``transpose`` may supply a precomputed ``matrix.T`` (pass ``matrix``
    itself when it is symmetric) so adjoint passes avoid re-transposing.
    """
    if matrix.shape[1] != x.shape[0]:
        raise MalformedProgramError(f"spmm shape mismatch {matrix.shape} @ {x.shape}")
    if transpose is None:
        transpose = matrix.T
    return _make("spmm", (x,), (matrix, transpose))


def scale(x: Node, c: float) -> Node:
    return _make("scale", (x,), float(c))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise MalformedProgramError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _make("add", (a, b))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    return _make("mul", (a, b))


def rowscale(s: Node, x: Node) -> Node:
    """Scale row r of matrix x by s[r]."""
    if s.shape != x.shape[:1] or len(x.shape) != 2:
        raise MalformedProgramError(f"rowscale shape mismatch {s.shape} vs {x.shape}")
    return _make("rowscale", (s, x))


def rowdot(a: Node, b: Node) -> Node:
    _same_shape("rowdot", a, b)
    return _make("rowdot", (a, b))


def sigmoid(x: Node) -> Node:
    return _make("sigmoid", (x,))


def log(x: Node) -> Node:
    return _make("log", (x,))


def reciprocal(x: Node) -> Node:
    return _make("reciprocal", (x,))


def log_sigmoid(x: Node) -> Node:
    """ln sigma(x), stable for large |x|."""
    return _make("log_sigmoid", (x,))


def neg(x: Node) -> Node:
    return _make("neg", (x,))


def sum_all(x: Node) -> Node:
    return _make("sum", (x,))


def expand(s: Node, shape) -> Node:
    if s.shape != ():
        raise MalformedProgramError("expand takes a scalar")
    return _make("expand", (s,), tuple(shape))


# -- adjoint rules (g is the output adjoint, a Node) ------------------------------------

def _vjp_spmm(node, g):
    matrix, transpose = node.params
    return (spmm(transpose, g, matrix),)


def _vjp_sigmoid(node, g):
    (x,) = node.inputs
    # s'(x) = s(x) s(-x)
    return (mul(g, mul(node, sigmoid(neg(x)))),)


def _vjp_reciprocal(node, g):
    return (neg(mul(g, mul(node, node))),)


_VJP: dict[str, Callable] = {
    "gather": lambda node, g: (scatter(g, node.params, node.inputs[0].shape[0]),),
    "scatter": lambda node, g: (gather(g, node.params[0]),),
    "spmm": _vjp_spmm,
    "scale": lambda node, g: (scale(g, node.params),),
    "add": lambda node, g: (g, g),
    "mul": lambda node, g: (mul(g, node.inputs[1]), mul(g, node.inputs[0])),
    "rowscale": lambda node, g: (rowdot(g, node.inputs[1]), rowscale(node.inputs[0], g)),
    "rowdot": lambda node, g: (rowscale(g, node.inputs[1]), rowscale(g, node.inputs[0])),
    "sigmoid": _vjp_sigmoid,
    "log": lambda node, g: (mul(g, reciprocal(node.inputs[0])),),
    "reciprocal": _vjp_reciprocal,
    "log_sigmoid": lambda node, g: (mul(g, sigmoid(neg(node.inputs[0]))),),
    "neg": lambda node, g: (neg(g),),
    "sum": lambda node, g: (expand(g, node.inputs[0].shape),),
    "expand": lambda node, g: (sum_all(g),),
}


def grad(output: Node, wrt: Sequence[Node], seed=None, create_graph: bool = False):
    """Vector-Jacobian product of ``output`` against each node in ``wrt``.

    ``seed`` defaults to 1 for scalar outputs. With ``create_graph`` the
    returned adjoints are graph nodes that can be differentiated again;
    otherwise they are plain arrays. Inputs the output does not depend on
    get exact zeros.
    """
    if seed is None:
        if output.shape != ():
            raise MalformedProgramError("seed required for non-scalar output")
        seed = np.asarray(1.0)
    if not isinstance(seed, Node):
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise MalformedProgramError(f"seed shape {seed.shape} != output shape {output.shape}")
        seed = const(seed)

    targets = {x.id for x in wrt}
    # which nodes lie on a path from some wrt node to the output
    relevant: dict[int, bool] = {}
    order: list[Node] = []
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            relevant[node.id] = node.id in targets or any(relevant[x.id] for x in node.inputs)
            order.append(node)
            continue
        if node.id in relevant:
            continue
        relevant[node.id] = False
        stack.append((node, True))
        for x in node.inputs:
            if x.id not in relevant:
                stack.append((x, False))

    adjoint: dict[int, Node] = {}
    ctx = _nullctx() if create_graph else no_record()
    with ctx:
        adjoint[output.id] = seed
        for node in sorted((n for n in order if relevant[n.id]), key=lambda n: -n.id):
            g = adjoint.get(node.id)
            if g is None or not node.inputs:
                continue
            parts = _VJP[node.op](node, g)
            for x, gx in zip(node.inputs, parts):
                if not relevant[x.id]:
                    continue
                prev = adjoint.get(x.id)
                adjoint[x.id] = gx if prev is None else add(prev, gx)

    out = []
    for x in wrt:
        g = adjoint.get(x.id)
        if create_graph:
            out.append(g if g is not None else const(np.zeros(x.shape)))
        else:
            out.append(g.value.copy() if g is not None else np.zeros(x.shape))
    return out


@contextmanager
def _nullctx():
    yield


# -- flat vectors over parameter rows ------------------------------------------------

@dataclass(eq=False)
class FlatVector:
    """Coordinates over a set of parameter rows (``support``, in order)."""

    values: np.ndarray
    support: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.support is None:
            self.support = np.arange(self.values.shape[0] if self.values.ndim else 1)
        self.support = np.asarray(self.support, dtype=np.int64)
        if self.values.ndim and self.values.shape[0] != self.support.shape[0]:
            raise SupportMismatchError("values and support disagree in length")
        if not np.all(np.isfinite(self.values)):
            raise NumericOverflowError("FlatVector with non-finite coordinates")

    def _check(self, other: "FlatVector"):
        if self.support is not other.support and not np.array_equal(self.support, other.support):
            raise SupportMismatchError("FlatVectors over different supports")

    def __add__(self, other):
        self._check(other)
        return FlatVector(self.values + other.values, self.support)

    def __sub__(self, other):
        self._check(other)
        return FlatVector(self.values - other.values, self.support)

    def __mul__(self, c: float):
        return FlatVector(self.values * c, self.support)

    __rmul__ = __mul__

    def __neg__(self):
        return FlatVector(-self.values, self.support)

    def dot(self, other: "FlatVector") -> float:
        self._check(other)
        return float(np.vdot(self.values, other.values))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    @classmethod
    def zeros_like(cls, other: "FlatVector") -> "FlatVector":
        return cls(np.zeros_like(other.values), other.support)


# -- program-level API ------------------------------------------------------------------

# A program maps (theta node, delta node or None) to a scalar loss node.
Program = Callable[[Node, Optional[Node]], Node]


def _as_flat(x) -> FlatVector:
    if x is None or isinstance(x, FlatVector):
        return x
    return FlatVector(np.asarray(x, dtype=np.float64))


def evaluate(program: Program, params, offset=None):
    """Run ``program`` at (params, offset); returns (loss, tape).

    ``params`` and ``offset`` are FlatVectors (or arrays, taken to span
    all their rows). The tape's leaves are named ``theta`` and ``delta``.
    """
    params = _as_flat(params)
    offset = _as_flat(offset)
    with Tape() as tape:
        theta = leaf(params.values, "theta")
        tape.leaves["theta"] = theta
        tape.supports["theta"] = params.support
        delta = None
        if offset is not None:
            if not np.isin(offset.support, params.support).all():
                raise SupportMismatchError("offset support is not inside the parameter support")
            delta = leaf(offset.values, "delta")
            tape.leaves["delta"] = delta
            tape.supports["delta"] = offset.support
        out = program(theta, delta)
    if not isinstance(out, Node) or out.shape != ():
        raise MalformedProgramError("program must return a scalar node")
    tape.output = out
    return float(out.value), tape


def gradient(tape: Tape, wrt: str = "theta", rows=None) -> FlatVector:
    """d(output)/d(leaf ``wrt``), optionally restricted to a subset of its rows."""
    if tape.output is None or tape.output.shape != ():
        raise MalformedProgramError("tape output must be scalar")
    if wrt not in tape.leaves:
        raise SupportMismatchError(f"tape has no parameter leaf '{wrt}'")
    node = tape.leaves[wrt]
    support = tape.supports[wrt]
    (g,) = grad(tape.output, [node])
    if rows is None:
        return FlatVector(g, support)
    rows = np.asarray(rows, dtype=np.int64)
    pos = {int(r): k for k, r in enumerate(support)}
    missing = [int(r) for r in rows if int(r) not in pos]
    if missing:
        raise SupportMismatchError(f"rows {missing[:5]} not in the '{wrt}' support")
    return FlatVector(g[[pos[int(r)] for r in rows]], rows)


class SecondOrder:
    """First-order graph at (theta, delta), kept for repeated second-order products.

    The delta-gradient is built once with ``create_graph``; each Hessian-vector
    or mixed product is then one more reverse pass over it.
    """

    def __init__(self, program: Program, params, offset):
        params = _as_flat(params)
        offset = _as_flat(offset)
        if offset is None:
            raise MalformedProgramError("second-order products need an offset (delta) leaf")
        self.loss, self.tape = evaluate(program, params, offset)
        self.theta_support = params.support
        self.delta_support = offset.support
        theta, delta = self.tape.leaves["theta"], self.tape.leaves["delta"]
        with self.tape:
            self._g_theta, self._g_delta = grad(self.tape.output, [theta, delta], create_graph=True)

    @property
    def grad_theta(self) -> FlatVector:
        return FlatVector(self._g_theta.value, self.theta_support)

    @property
    def grad_delta(self) -> FlatVector:
        return FlatVector(self._g_delta.value, self.delta_support)

    def _check(self, v: FlatVector):
        if not np.array_equal(v.support, self.delta_support):
            raise SupportMismatchError("v must span the perturbation support")

    def hvp(self, v: FlatVector) -> FlatVector:
        """(d^2 L / d delta d delta^T) v."""
        self._check(v)
        (out,) = grad(self._g_delta, [self.tape.leaves["delta"]], seed=v.values)
        return FlatVector(out, self.delta_support)

    def mixed_vhp(self, v: FlatVector) -> FlatVector:
        """Gradient w.r.t. theta of <dL/d delta, v>."""
        self._check(v)
        (out,) = grad(self._g_delta, [self.tape.leaves["theta"]], seed=v.values)
        return FlatVector(out, self.theta_support)


def hvp(program: Program, params, offset, v) -> FlatVector:
    return SecondOrder(program, params, offset).hvp(_as_flat(v))


def mixed_vhp(program: Program, params, offset, v) -> FlatVector:
    return SecondOrder(program, params, offset).mixed_vhp(_as_flat(v))
