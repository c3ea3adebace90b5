"""Dense float64 tensor graphs with reverse-mode automatic differentiation.

A ``Graph`` is a flat list of operation records built incrementally; node ids
are integers and every node's inputs precede it, so forward evaluation is a
single in-order sweep and backward is the reverse sweep. Values are plain
``numpy.ndarray`` in float64. All reductions are sequential/BLAS-deterministic,
so repeated evaluation of the same graph with the same bindings is
bit-identical.

Gradient correctness is the backbone of everything downstream; every kernel
backward here is validated against ``finite_difference_check``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "NonFiniteError",
    "evaluate",
    "backward",
    "finite_difference_check",
]


class GraphError(ValueError):
    """Shape mismatch, bad preconditions, or malformed graph usage."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN/Inf; carries the offending node for diagnosis."""

    def __init__(self, node_id: int, op: str, name: str | None):
        label = f"node {node_id} ({op}" + (f", {name!r})" if name else ")")
        super().__init__(f"non-finite values produced at {label}")
        self.node_id = node_id
        self.op = op


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x rounds to the exact limit 0.0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    name: str | None = None
    payload: Any = None
    requires_grad: bool = False


@dataclass
class Graph:
    """Operation records plus the set of trainable parameters.

    Build with the kernel methods below (each returns the new node id), then
    run ``evaluate`` and optionally ``backward``. The graph retains forward
    activations between the two calls; a graph instance is single-threaded.
    """

    nodes: list[_Node] = field(default_factory=list)
    _params: dict[str, int] = field(default_factory=dict)
    _inputs: dict[str, int] = field(default_factory=dict)
    _values: list | None = None
    _aux: list | None = None

    # -- leaves ------------------------------------------------------------

    def input(self, name: str) -> int:
        if name in self._inputs:
            raise GraphError(f"duplicate input name {name!r}")
        nid = self._add(_Node("input", (), name=name))
        self._inputs[name] = nid
        return nid

    def parameter(self, name: str, value: np.ndarray) -> int:
        if name in self._params:
            raise GraphError(f"duplicate parameter name {name!r}")
        # contiguous so the pre-existing array can be perturbed through a flat view
        arr = np.ascontiguousarray(value, dtype=np.float64)
        nid = self._add(
            _Node("parameter", (), name=name, payload=arr, requires_grad=True))
        self._params[name] = nid
        return nid

    def constant(self, value) -> int:
        return self._add(_Node("constant", (), payload=_as_f64(value)))

    # -- kernels -----------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        return self._add_op("matmul", a, b)

    def add(self, a: int, b: int) -> int:
        return self._add_op("add", a, b)

    def multiply(self, a: int, b: int) -> int:
        return self._add_op("multiply", a, b)

    def scale(self, a: int, factor: float) -> int:
        return self._add_op("scale", a, payload=float(factor))

    def embedding(self, table: int, indices: np.ndarray) -> int:
        idx = np.asarray(indices)
        if not np.issubdtype(idx.dtype, np.integer):
            raise GraphError("embedding indices must be integers")
        return self._add_op("embedding", table, payload=idx)

    def rmsnorm(self, x: int, gain: int, eps: float = 1e-6) -> int:
        return self._add_op("rmsnorm", x, gain, payload=float(eps))

    def softmax(self, x: int) -> int:
        return self._add_op("softmax", x)

    def silu(self, x: int) -> int:
        return self._add_op("silu", x)

    def gate(self, a: int, b: int) -> int:
        """Elementwise a * silu(b)."""
        return self._add_op("gate", a, b)

    def cross_entropy(self, logits: int, targets: np.ndarray,
                      weights: np.ndarray | None = None) -> int:
        """Scalar sum of weights * token NLL; weights default to 1/N (mean).

        ``targets`` has the shape of ``logits`` minus the class axis;
        ``weights`` must match the target shape.
        """
        tgt = np.asarray(targets)
        if not np.issubdtype(tgt.dtype, np.integer):
            raise GraphError("cross-entropy targets must be integers")
        if weights is None:
            weights = np.full(tgt.shape, 1.0 / max(tgt.size, 1))
        w = _as_f64(weights)
        if w.shape != tgt.shape:
            raise GraphError("cross-entropy weights must match target shape")
        return self._add_op("cross_entropy", logits, payload=(tgt, w))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        return self._add_op("reshape", a, payload=tuple(shape))

    def permute(self, a: int, axes: tuple[int, ...]) -> int:
        return self._add_op("permute", a, payload=tuple(axes))

    # -- introspection -----------------------------------------------------

    @property
    def parameters(self) -> dict[str, int]:
        return dict(self._params)

    def value(self, node: int) -> np.ndarray:
        """Forward value of a node from the latest evaluate() call."""
        if self._values is None or self._values[node] is None:
            raise GraphError("node has no value; run evaluate() first")
        return self._values[node]

    # -- internals ----------------------------------------------------------

    def _add(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _add_op(self, op: str, *inputs: int, payload: Any = None) -> int:
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"{op}: input node {i} does not exist")
        req = any(self.nodes[i].requires_grad for i in inputs)
        return self._add(_Node(op, tuple(inputs), payload=payload, requires_grad=req))


def evaluate(graph: Graph, bindings: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Run the forward sweep; returns the final node's value.

    Pure in (graph, bindings): repeated calls are bit-identical. Intermediate
    activations stay attached to the graph for ``backward``.
    """
    bindings = bindings or {}
    for name in graph._inputs:
        if name not in bindings:
            raise GraphError(f"input {name!r} not bound")
    values: list = [None] * len(graph.nodes)
    aux: list = [None] * len(graph.nodes)
    leaves = ("input", "parameter", "constant")
    for nid, node in enumerate(graph.nodes):
        out = _forward(node, values, bindings, nid, aux)
        # leaves are not kernel outputs; bad leaf data surfaces at the first kernel
        if node.op not in leaves and not np.all(np.isfinite(out)):
            raise NonFiniteError(nid, node.op, node.name)
        values[nid] = out
    graph._values = values  # retained for backward
    graph._aux = aux
    return values[-1]


def _forward(node: _Node, values, bindings, nid: int, aux) -> np.ndarray:
    op = node.op
    if op == "input":
        return _as_f64(bindings[node.name])
    if op in ("parameter", "constant"):
        return node.payload
    if op == "matmul":
        a, b = values[node.inputs[0]], values[node.inputs[1]]
        if a.ndim < 2 or b.ndim < 2:
            raise GraphError(f"matmul operands must be >=2-D at node {nid}")
        if a.shape[-1] != b.shape[-2]:
            raise GraphError(
                f"matmul shape mismatch {a.shape} @ {b.shape} at node {nid}")
        return np.matmul(a, b)
    if op == "add":
        return values[node.inputs[0]] + values[node.inputs[1]]
    if op == "multiply":
        return values[node.inputs[0]] * values[node.inputs[1]]
    if op == "scale":
        return values[node.inputs[0]] * node.payload
    if op == "embedding":
        table = values[node.inputs[0]]
        idx = node.payload
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise GraphError(f"embedding index out of range at node {nid}")
        return table[idx]
    if op == "rmsnorm":
        x, gain = values[node.inputs[0]], values[node.inputs[1]]
        ms = np.mean(x * x, axis=-1, keepdims=True)
        r = 1.0 / np.sqrt(ms + node.payload)
        aux[nid] = r
        return x * r * gain
    if op == "softmax":
        x = values[node.inputs[0]]
        z = x - x.max(axis=-1, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=-1, keepdims=True)
        return z
    if op == "silu":
        x = values[node.inputs[0]]
        s = _sigmoid(x)
        aux[nid] = s
        return x * s
    if op == "gate":
        a, b = values[node.inputs[0]], values[node.inputs[1]]
        s = _sigmoid(b)
        aux[nid] = s
        return a * (b * s)
    if op == "cross_entropy":
        logits = values[node.inputs[0]]
        tgt, w = node.payload
        if logits.shape[:-1] != tgt.shape:
            raise GraphError(
                f"cross-entropy targets {tgt.shape} do not match logits "
                f"{logits.shape} at node {nid}")
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        se = e.sum(axis=-1, keepdims=True)
        nll = (np.log(se[..., 0])
               - np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0])
        e /= se
        aux[nid] = e  # softmax probabilities, reused by backward
        return np.asarray(np.sum(w * nll))
    if op == "reshape":
        return values[node.inputs[0]].reshape(node.payload)
    if op == "permute":
        return np.transpose(values[node.inputs[0]], node.payload)
    raise GraphError(f"unknown op {op!r}")


def backward(graph: Graph, loss_node: int | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients keyed by parameter name.

    Gradients are exact up to floating-point rounding; parameters with no path
    to the loss map to exact-zero tensors.
    """
    if graph._values is None:
        raise GraphError("backward before evaluate")
    values = graph._values
    if loss_node is None:
        loss_node = len(graph.nodes) - 1
    loss = values[loss_node]
    if loss is None:
        raise GraphError("loss node was not evaluated")
    if np.ndim(loss) != 0:
        raise GraphError(f"loss node must be scalar, got shape {np.shape(loss)}")

    aux = graph._aux
    grads: list = [None] * len(graph.nodes)
    grads[loss_node] = np.asarray(1.0)
    for nid in range(loss_node, -1, -1):
        node, g = graph.nodes[nid], grads[nid]
        if g is None or not node.requires_grad:
            continue
        _backprop(graph, nid, node, g, values, grads, aux)
        grads[nid] = None if node.op != "parameter" else g

    out: dict[str, np.ndarray] = {}
    for name, pid in graph._params.items():
        g = grads[pid]
        out[name] = np.zeros_like(values[pid]) if g is None else g
    return out


def _backprop(graph: Graph, nid: int, node: _Node, g, values, grads, aux) -> None:
    def send(src: int, grad: np.ndarray) -> None:
        if not graph.nodes[src].requires_grad:
            return
        if grads[src] is None:
            grads[src] = np.array(grad) if np.isscalar(grad) else grad
        else:
            grads[src] = grads[src] + grad

    op = node.op
    ins = node.inputs
    if op in ("parameter", "constant", "input"):
        return
    if op == "matmul":
        a, b = values[ins[0]], values[ins[1]]
        send(ins[0], _sum_to_shape(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape))
        send(ins[1], _sum_to_shape(np.matmul(np.swapaxes(a, -1, -2), g), b.shape))
    elif op == "add":
        send(ins[0], _sum_to_shape(g, values[ins[0]].shape))
        send(ins[1], _sum_to_shape(g, values[ins[1]].shape))
    elif op == "multiply":
        send(ins[0], _sum_to_shape(g * values[ins[1]], values[ins[0]].shape))
        send(ins[1], _sum_to_shape(g * values[ins[0]], values[ins[1]].shape))
    elif op == "scale":
        send(ins[0], g * node.payload)
    elif op == "embedding":
        gt = np.zeros_like(values[ins[0]])
        np.add.at(gt, node.payload, g)
        send(ins[0], gt)
    elif op == "rmsnorm":
        x, gain = values[ins[0]], values[ins[1]]
        d = x.shape[-1]
        r = aux[nid]
        gg = g * gain
        gx = gg * r - x * (r ** 3) * (np.sum(gg * x, axis=-1, keepdims=True) / d)
        send(ins[0], gx)
        send(ins[1], _sum_to_shape(g * x * r, gain.shape))
    elif op == "softmax":
        p = values[nid]
        send(ins[0], p * (g - np.sum(g * p, axis=-1, keepdims=True)))
    elif op == "silu":
        x = values[ins[0]]
        s = aux[nid]
        send(ins[0], g * (s + x * s * (1.0 - s)))
    elif op == "gate":
        a, b = values[ins[0]], values[ins[1]]
        s = aux[nid]
        send(ins[0], g * b * s)
        send(ins[1], g * a * (s + b * s * (1.0 - s)))
    elif op == "cross_entropy":
        tgt, w = node.payload
        p = aux[nid]
        ws = w * float(g)
        gl = p * ws[..., None]
        gl[(*np.indices(tgt.shape), tgt)] -= ws
        send(ins[0], gl)
    elif op == "reshape":
        send(ins[0], g.reshape(values[ins[0]].shape))
    elif op == "permute":
        inv = tuple(np.argsort(node.payload))
        send(ins[0], np.transpose(g, inv))
    else:
        raise GraphError(f"no backward rule for op {op!r}")


def finite_difference_check(graph: Graph, bindings: dict[str, np.ndarray] | None,
                            loss_node: int | None, parameter: str,
                            epsilon: float, max_coords: int = 64,
                            seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``min(max_coords, size)`` coordinates of the parameter; the
    relative error denominator is |central difference| + 1e-12.
    """
    if epsilon <= 0:
        raise GraphError("epsilon must be positive")
    if parameter not in graph._params:
        raise GraphError(f"unknown parameter {parameter!r}")
    pid = graph._params[parameter]
    arr = graph.nodes[pid].payload
    flat = arr.reshape(-1)

    evaluate(graph, bindings)
    analytic = backward(graph, loss_node).get(parameter)
    analytic_flat = analytic.reshape(-1)

    n = flat.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)

    lnode = loss_node if loss_node is not None else len(graph.nodes) - 1
    max_rel = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + epsilon
        evaluate(graph, bindings)
        lo_hi = float(graph._values[lnode])
        flat[c] = orig - epsilon
        evaluate(graph, bindings)
        lo_lo = float(graph._values[lnode])
        flat[c] = orig
        central = (lo_hi - lo_lo) / (2.0 * epsilon)
        rel = abs(analytic_flat[c] - central) / (abs(central) + 1e-12)
        max_rel = max(max_rel, rel)
    # restore forward state for the unperturbed graph
    evaluate(graph, bindings)
    return max_rel
