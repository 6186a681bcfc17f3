"""Reverse-mode automatic differentiation over dense float64 arrays.

A Graph records operations symbolically; forward() evaluates every node
under a binding of parameter values, backward() accumulates adjoints in
reverse topological order (the construction order is already topological).
Separate runs use separate value workspaces, so one graph can serve many
binding sets.

Conventions that matter for reproducibility:
  - everything is float64, scalars are shape-() arrays;
  - the max reduction routes its subgradient to the first maximal element
    in row-major order, elementwise maximum routes ties to its first input;
  - the integer-root op clamps its base to `eps` inside the backward
    partial only, so forward values stay exact at 0;
  - any non-finite forward value raises GraphError immediately.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "Node",
    "forward",
    "backward",
    "finite_diff_check",
]


class GraphError(Exception):
    """Structural or numerical failure in graph construction/evaluation."""


class _Rec:
    __slots__ = ("op", "inputs", "attrs", "shape")

    def __init__(self, op: str, inputs: tuple[int, ...], attrs: dict, shape: tuple[int, ...]):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape


class Node:
    """Lightweight handle to one graph node."""

    __slots__ = ("g", "i")

    def __init__(self, g: "Graph", i: int):
        self.g = g
        self.i = i

    @property
    def shape(self) -> tuple[int, ...]:
        return self.g.recs[self.i].shape

    def _coerce(self, other) -> "Node":
        if isinstance(other, Node):
            if other.g is not self.g:
                raise GraphError("nodes belong to different graphs")
            return other
        return self.g.constant(np.full(self.shape, float(other)))

    def __add__(self, other):
        return self.g.add(self, self._coerce(other))

    def __radd__(self, other):
        return self._coerce(other).__add__(self)

    def __sub__(self, other):
        return self.g.sub(self, self._coerce(other))

    def __rsub__(self, other):
        return self.g.sub(self._coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)) and self.shape != ():
            return self.g.scale(self, float(other))
        return self.g.mul(self, self._coerce(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.g.scale(self, -1.0) if self.shape != () else self.g.sub(self.g.constant(0.0), self)


def _shape_of(value) -> tuple[int, ...]:
    return tuple(np.shape(value))


class Graph:
    """A recorded acyclic expression graph with named parameters."""

    def __init__(self):
        self.recs: list[_Rec] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.recs)

    def _append(self, op: str, inputs: tuple[int, ...], attrs: dict, shape: tuple[int, ...]) -> Node:
        self.recs.append(_Rec(op, inputs, attrs, shape))
        return Node(self, len(self.recs) - 1)

    def _rec(self, node: Node) -> _Rec:
        if node.g is not self:
            raise GraphError("node belongs to a different graph")
        return self.recs[node.i]

    # -- leaves ---------------------------------------------------------

    def constant(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise GraphError("non-finite constant")
        return self._append("constant", (), {"value": arr}, arr.shape)

    def parameter(self, name: str, shape: tuple[int, ...] | int) -> Node:
        if name in self.params:
            raise GraphError(f"duplicate parameter name: {name!r}")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        node = self._append("parameter", (), {"name": name}, shape)
        self.params[name] = node.i
        return node

    # -- arithmetic -----------------------------------------------------

    def _binary_same_shape(self, op: str, a: Node, b: Node) -> Node:
        ra, rb = self._rec(a), self._rec(b)
        if ra.shape != rb.shape:
            raise GraphError(f"{op}: shape mismatch {ra.shape} vs {rb.shape}")
        return self._append(op, (a.i, b.i), {}, ra.shape)

    def add(self, a: Node, b: Node) -> Node:
        return self._binary_same_shape("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._binary_same_shape("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._binary_same_shape("mul", a, b)

    def maximum(self, a: Node, b: Node) -> Node:
        return self._binary_same_shape("maximum", a, b)

    def scale(self, x: Node, k: float | Node) -> Node:
        """k * x where k is a static float or a scalar node."""
        rx = self._rec(x)
        if isinstance(k, Node):
            rk = self._rec(k)
            if rk.shape != ():
                raise GraphError("scale: scaling node must be scalar")
            return self._append("scale", (k.i, x.i), {}, rx.shape)
        return self._append("scale", (x.i,), {"k": float(k)}, rx.shape)

    # -- linear algebra / structure --------------------------------------

    def matvec(self, m: Node, v: Node) -> Node:
        rm, rv = self._rec(m), self._rec(v)
        if len(rm.shape) != 2 or len(rv.shape) != 1 or rm.shape[1] != rv.shape[0]:
            raise GraphError(f"matvec: bad shapes {rm.shape} @ {rv.shape}")
        return self._append("matvec", (m.i, v.i), {}, (rm.shape[0],))

    def matmul(self, a: Node, b: Node) -> Node:
        ra, rb = self._rec(a), self._rec(b)
        if len(ra.shape) != 2 or len(rb.shape) != 2 or ra.shape[1] != rb.shape[0]:
            raise GraphError(f"matmul: bad shapes {ra.shape} @ {rb.shape}")
        return self._append("matmul", (a.i, b.i), {}, (ra.shape[0], rb.shape[1]))

    def transpose(self, a: Node) -> Node:
        ra = self._rec(a)
        if len(ra.shape) != 2:
            raise GraphError("transpose: expects a matrix")
        return self._append("transpose", (a.i,), {}, (ra.shape[1], ra.shape[0]))

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        ra = self._rec(a)
        shape = tuple(shape)
        if int(np.prod(ra.shape or (1,))) != int(np.prod(shape or (1,))):
            raise GraphError(f"reshape: size mismatch {ra.shape} -> {shape}")
        return self._append("reshape", (a.i,), {"shape": shape}, shape)

    # -- reductions -------------------------------------------------------

    def _reduction(self, op: str, a: Node, axis: int | None) -> Node:
        ra = self._rec(a)
        if axis is None:
            out = ()
        else:
            if not (0 <= axis < len(ra.shape)):
                raise GraphError(f"{op}: axis {axis} out of range for {ra.shape}")
            out = ra.shape[:axis] + ra.shape[axis + 1:]
        return self._append(op, (a.i,), {"axis": axis}, out)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        return self._reduction("sum", a, axis)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        return self._reduction("mean", a, axis)

    def max(self, a: Node) -> Node:
        """Reduce to the maximum element; subgradient goes to the first
        maximal element in row-major order."""
        return self._append("max", (a.i,), {}, ())

    # -- elementwise nonlinearities ---------------------------------------

    def pow_int(self, a: Node, q: int) -> Node:
        q = int(q)
        if q == 0:
            raise GraphError("pow_int: exponent must be nonzero")
        return self._append("pow_int", (a.i,), {"q": q}, self._rec(a).shape)

    def root_int(self, a: Node, q: int, eps: float = 1e-12) -> Node:
        """Elementwise x**(1/q). The backward partial clamps the base to
        eps so the root's infinite slope at 0 stays bounded; the forward
        value is never clamped."""
        q = int(q)
        if q == 0:
            raise GraphError("root_int: exponent must be nonzero")
        return self._append("root_int", (a.i,), {"q": q, "eps": float(eps)}, self._rec(a).shape)

    def powf(self, a: Node, p: float) -> Node:
        p = float(p)
        if p < 0:
            raise GraphError("powf: exponent must be non-negative")
        return self._append("powf", (a.i,), {"p": p}, self._rec(a).shape)

    def sigmoid(self, a: Node) -> Node:
        return self._append("sigmoid", (a.i,), {}, self._rec(a).shape)

    def log(self, a: Node, floor: float | None = None) -> Node:
        attrs = {"floor": None if floor is None else float(floor)}
        return self._append("log", (a.i,), attrs, self._rec(a).shape)

    def softmax_ce(self, logits: Node, onehot: Node) -> Node:
        """Mean cross-entropy of row-wise softmax against one-hot targets,
        fused and stabilized by per-row max subtraction."""
        rl, ro = self._rec(logits), self._rec(onehot)
        if rl.shape != ro.shape or len(rl.shape) != 2:
            raise GraphError(f"softmax_ce: bad shapes {rl.shape} vs {ro.shape}")
        return self._append("softmax_ce", (logits.i, onehot.i), {}, ())


# -- evaluation ------------------------------------------------------------


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    s = z - m
    lse = np.log(np.sum(np.exp(s), axis=1, keepdims=True))
    return s - lse


def forward(g: Graph, bindings: dict[str, np.ndarray]) -> list[np.ndarray]:
    """Evaluate every node; returns the per-node value workspace."""
    missing = set(g.params) - set(bindings)
    if missing:
        raise GraphError(f"unbound parameters: {sorted(missing)}")
    extra = set(bindings) - set(g.params)
    if extra:
        raise GraphError(f"unknown parameters bound: {sorted(extra)}")

    vals: list[np.ndarray] = [None] * len(g.recs)  # type: ignore[list-item]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _forward_inner(g, bindings, vals)


def _forward_inner(g: Graph, bindings: dict[str, np.ndarray], vals: list) -> list[np.ndarray]:
    for i, rec in enumerate(g.recs):
        op = rec.op
        if op == "constant":
            v = rec.attrs["value"]
        elif op == "parameter":
            v = np.asarray(bindings[rec.attrs["name"]], dtype=np.float64)
            if v.shape != rec.shape:
                raise GraphError(
                    f"parameter {rec.attrs['name']!r}: bound shape {v.shape}, declared {rec.shape}"
                )
        else:
            a = vals[rec.inputs[0]]
            if op == "add":
                v = a + vals[rec.inputs[1]]
            elif op == "sub":
                v = a - vals[rec.inputs[1]]
            elif op == "mul":
                v = a * vals[rec.inputs[1]]
            elif op == "maximum":
                v = np.maximum(a, vals[rec.inputs[1]])
            elif op == "scale":
                if "k" in rec.attrs:
                    v = rec.attrs["k"] * a
                else:
                    v = a * vals[rec.inputs[1]]
            elif op == "matvec" or op == "matmul":
                v = a @ vals[rec.inputs[1]]
            elif op == "transpose":
                v = a.T
            elif op == "reshape":
                v = a.reshape(rec.attrs["shape"])
            elif op == "sum":
                v = np.sum(a, axis=rec.attrs["axis"])
            elif op == "mean":
                v = np.mean(a, axis=rec.attrs["axis"])
            elif op == "max":
                v = np.max(a)
            elif op == "pow_int":
                q = rec.attrs["q"]
                v = np.power(a, q) if q >= 0 else np.power(a, float(q))
            elif op == "root_int":
                v = np.power(a, 1.0 / rec.attrs["q"])
            elif op == "powf":
                v = np.power(a, rec.attrs["p"])
            elif op == "sigmoid":
                v = _stable_sigmoid(np.asarray(a, dtype=np.float64))
            elif op == "log":
                floor = rec.attrs["floor"]
                v = np.log(a if floor is None else np.maximum(a, floor))
            elif op == "softmax_ce":
                z, y = a, vals[rec.inputs[1]]
                v = -np.sum(_log_softmax(z) * y) / z.shape[0]
            else:  # pragma: no cover
                raise GraphError(f"unknown op {op!r}")
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise GraphError(f"non-finite value at node {i} (op {op!r})")
        vals[i] = v
    return vals


def backward(g: Graph, output: Node, vals: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Adjoints of a scalar output with respect to every parameter."""
    rec_out = g._rec(output)
    if rec_out.shape != ():
        raise GraphError("backward: output must be scalar")
    if len(vals) != len(g.recs):
        raise GraphError("backward: workspace does not match graph")

    grads: list[np.ndarray | None] = [None] * len(g.recs)
    grads[output.i] = np.asarray(1.0)

    def acc(idx: int, delta: np.ndarray) -> None:
        if grads[idx] is None:
            grads[idx] = np.array(delta, dtype=np.float64)
        else:
            grads[idx] = grads[idx] + delta

    for i in range(output.i, -1, -1):
        go = grads[i]
        if go is None:
            continue
        rec = g.recs[i]
        op = rec.op
        if op in ("constant", "parameter"):
            continue
        ins = rec.inputs
        if op == "add":
            acc(ins[0], go)
            acc(ins[1], go)
        elif op == "sub":
            acc(ins[0], go)
            acc(ins[1], -go)
        elif op == "mul":
            acc(ins[0], go * vals[ins[1]])
            acc(ins[1], go * vals[ins[0]])
        elif op == "maximum":
            mask = vals[ins[0]] >= vals[ins[1]]
            acc(ins[0], go * mask)
            acc(ins[1], go * ~mask)
        elif op == "scale":
            if "k" in rec.attrs:
                acc(ins[0], go * rec.attrs["k"])
            else:
                acc(ins[0], np.sum(go * vals[ins[1]]))
                acc(ins[1], go * vals[ins[0]])
        elif op == "matvec":
            m, v = vals[ins[0]], vals[ins[1]]
            acc(ins[0], np.outer(go, v))
            acc(ins[1], m.T @ go)
        elif op == "matmul":
            a, b = vals[ins[0]], vals[ins[1]]
            acc(ins[0], go @ b.T)
            acc(ins[1], a.T @ go)
        elif op == "transpose":
            acc(ins[0], go.T)
        elif op == "reshape":
            acc(ins[0], np.reshape(go, g.recs[ins[0]].shape))
        elif op == "sum":
            axis = rec.attrs["axis"]
            if axis is None:
                acc(ins[0], np.full(g.recs[ins[0]].shape, float(go)))
            else:
                acc(ins[0], np.broadcast_to(np.expand_dims(go, axis), g.recs[ins[0]].shape).copy())
        elif op == "mean":
            axis = rec.attrs["axis"]
            in_shape = g.recs[ins[0]].shape
            n = int(np.prod(in_shape)) if axis is None else in_shape[axis]
            if axis is None:
                acc(ins[0], np.full(in_shape, float(go) / n))
            else:
                acc(ins[0], np.broadcast_to(np.expand_dims(go / n, axis), in_shape).copy())
        elif op == "max":
            a = vals[ins[0]]
            d = np.zeros_like(a)
            d.reshape(-1)[int(np.argmax(a))] = float(go)
            acc(ins[0], d)
        elif op == "pow_int":
            q = rec.attrs["q"]
            acc(ins[0], go * q * np.power(vals[ins[0]], float(q - 1)))
        elif op == "root_int":
            q = rec.attrs["q"]
            base = np.maximum(vals[ins[0]], rec.attrs["eps"])
            acc(ins[0], go * (1.0 / q) * np.power(base, 1.0 / q - 1.0))
        elif op == "powf":
            p = rec.attrs["p"]
            if p == 0.0:
                continue
            base = vals[ins[0]]
            if p < 1.0:
                base = np.maximum(base, 1e-300)
            acc(ins[0], go * p * np.power(base, p - 1.0))
        elif op == "sigmoid":
            s = vals[i]
            acc(ins[0], go * s * (1.0 - s))
        elif op == "log":
            floor = rec.attrs["floor"]
            x = vals[ins[0]]
            if floor is None:
                acc(ins[0], go / x)
            else:
                # exact subgradient of log(max(x, floor)): flat below the floor
                acc(ins[0], np.where(x >= floor, go / np.maximum(x, floor), 0.0))
        elif op == "softmax_ce":
            z, y = vals[ins[0]], vals[ins[1]]
            logp = _log_softmax(z)
            k = z.shape[0]
            acc(ins[0], float(go) * (np.exp(logp) - y) / k)
            acc(ins[1], float(go) * (-logp) / k)
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op!r}")

    out: dict[str, np.ndarray] = {}
    for name, idx in g.params.items():
        gp = grads[idx]
        out[name] = np.zeros(g.recs[idx].shape) if gp is None else np.asarray(gp, dtype=np.float64)
    return out


def finite_diff_check(f, grad, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central
    differences of f, coordinate by coordinate.

    rel err = |analytic - (f(x+h) - f(x-h)) / 2h| / max(1e-8, |analytic|)
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(grad(x), dtype=np.float64)
    if analytic.shape != x.shape:
        raise GraphError("finite_diff_check: gradient shape mismatch")
    worst = 0.0
    flat_x = x.reshape(-1)
    flat_a = analytic.reshape(-1)
    for j in range(flat_x.size):
        orig = flat_x[j]
        flat_x[j] = orig + h
        fp = float(f(x))
        flat_x[j] = orig - h
        fm = float(f(x))
        flat_x[j] = orig
        fd = (fp - fm) / (2.0 * h)
        rel = abs(flat_a[j] - fd) / max(1e-8, abs(flat_a[j]))
        worst = max(worst, rel)
    return worst
