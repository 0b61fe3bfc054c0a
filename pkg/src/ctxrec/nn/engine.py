"""Reverse-mode automatic differentiation over numpy arrays.

The operator set is deliberately small: exactly what the models in this
package compose. Values are float64 throughout. Trainable weights live in
``Parameter`` objects whose ``.grad`` buffers accumulate across backward
passes; intermediate nodes are ``Var`` objects forming a DAG. Recurrent
encoders register as single fused nodes (see ``layers.BiLstm``) so an entire
sequence pass costs one node instead of one per gate.
"""

from __future__ import annotations

import numpy as np


class Parameter:
    """A named trainable tensor with a dense gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


class Var:
    """A node in the computation record: a value plus how to push grads back."""

    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd


def constant(value) -> Var:
    """A leaf carrying non-trainable input data."""
    return Var(value)


def _accum(var: Var, g: np.ndarray) -> None:
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += g


def backward(root: Var, seed: float = 1.0) -> None:
    """Reverse-mode sweep from a scalar loss node.

    Visits each node once in reverse topological order, so shared subgraphs
    (e.g. one session encoding feeding many per-prefix losses) receive their
    full accumulated gradient before propagating further.
    """
    if root.value.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {root.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.asarray(float(seed))
    for node in reversed(order):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


# ---------------------------------------------------------------------------
# plain numpy helpers (also used outside the graph)

def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax; entries positive and summing to 1 within 1e-12."""
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise ValueError("softmax received NaN logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


PROB_FLOOR = 1e-12


def cross_entropy(probabilities: np.ndarray, true_index: int) -> float:
    """Negative log-likelihood of the true class, clamped at 1e-12."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= true_index < probabilities.shape[-1]:
        raise IndexError(f"true_index {true_index} out of range "
                         f"for {probabilities.shape[-1]} classes")
    return float(-np.log(max(float(probabilities[true_index]), PROB_FLOOR)))


# ---------------------------------------------------------------------------
# graph-building operators

def lookup(table: Parameter, ids) -> Var:
    """Gather rows of an embedding table; gradient is sparse over those rows."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise IndexError(f"lookup index out of range for table {table.name} "
                         f"with {table.value.shape[0]} rows")
    out = Var(table.value[ids])

    def bwd(g):
        np.add.at(table.grad, ids, g)

    out.bwd = bwd
    return out


def param_vector(param: Parameter) -> Var:
    """Expose a parameter vector directly as a graph node."""
    out = Var(param.value)

    def bwd(g):
        param.grad += g

    out.bwd = bwd
    return out


def as_row_matrix(param: Parameter) -> Var:
    """A (d,) parameter viewed as a (1, d) sequence of length one."""
    out = Var(param.value[None, :])

    def bwd(g):
        param.grad += g[0]

    out.bwd = bwd
    return out


def broadcast_param(param: Parameter, lead_shape: tuple) -> Var:
    """A (d,) parameter broadcast to lead_shape + (d,)."""
    out = Var(np.broadcast_to(param.value, tuple(lead_shape) + param.value.shape))

    def bwd(g):
        param.grad += g.reshape(-1, param.value.shape[0]).sum(axis=0)

    out.bwd = bwd
    return out


def dense(weight: Parameter, bias: Parameter | None, x: Var) -> Var:
    """Affine map along the last axis: y = x @ W.T + b."""
    din = weight.value.shape[1]
    if x.value.shape[-1] != din:
        raise ValueError(f"dense {weight.name}: input dim {x.value.shape[-1]} "
                         f"!= expected {din}")
    y = x.value @ weight.value.T
    if bias is not None:
        y = y + bias.value

    def bwd(g):
        gm = g.reshape(-1, weight.value.shape[0])
        xm = x.value.reshape(-1, din)
        weight.grad += gm.T @ xm
        if bias is not None:
            bias.grad += gm.sum(axis=0)
        _accum(x, (g @ weight.value).reshape(x.value.shape))

    return Var(y, (x,), bwd)


def concat(parts: list[Var], axis: int = -1) -> Var:
    widths = [p.value.shape[axis] for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=axis)

    def bwd(g):
        offset = 0
        for p, w in zip(parts, widths):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + w)
            _accum(p, g[tuple(sl)])
            offset += w

    return Var(out_val, tuple(parts), bwd)


def relu(x: Var) -> Var:
    mask = x.value > 0

    def bwd(g):
        _accum(x, g * mask)

    return Var(np.where(mask, x.value, 0.0), (x,), bwd)


def sigmoid(x: Var) -> Var:
    y = stable_sigmoid(x.value)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return Var(y, (x,), bwd)


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return Var(y, (x,), bwd)


def logsigmoid(x: Var) -> Var:
    y = -np.logaddexp(0.0, -x.value)

    def bwd(g):
        _accum(x, g * stable_sigmoid(-x.value))

    return Var(y, (x,), bwd)


def mean_axis(x: Var, axis: int) -> Var:
    n = x.value.shape[axis]

    def bwd(g):
        _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.value.shape))

    return Var(x.value.mean(axis=axis), (x,), bwd)


def index_rows(x: Var, ids) -> Var:
    """Gather along axis 0 of an intermediate node (e.g. deduped embeddings)."""
    ids = np.asarray(ids, dtype=np.intp)

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        np.add.at(x.grad, ids, g)

    return Var(x.value[ids], (x,), bwd)


def l2_normalize_rows(x: Var, eps: float = 1e-12) -> Var:
    """Normalize along the last axis to unit L2 norm (norm clamped at eps)."""
    norms = np.linalg.norm(x.value, axis=-1, keepdims=True)
    clamped = np.maximum(norms, eps)
    y = x.value / clamped
    free = norms > eps  # where the clamp is inactive the projection term applies

    def bwd(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, np.where(free, (g - y * proj) / clamped, g / clamped))

    return Var(y, (x,), bwd)


def dot_last(a: Var, b: Var) -> Var:
    out = (a.value * b.value).sum(axis=-1)

    def bwd(g):
        ge = np.expand_dims(g, -1)
        _accum(a, ge * b.value)
        _accum(b, ge * a.value)

    return Var(out, (a, b), bwd)


def flatten(x: Var) -> Var:
    shape = x.value.shape

    def bwd(g):
        _accum(x, g.reshape(shape))

    return Var(x.value.reshape(-1), (x,), bwd)


def vsum(x: Var) -> Var:
    def bwd(g):
        _accum(x, np.broadcast_to(g, x.value.shape))

    return Var(x.value.sum(), (x,), bwd)


def scale(x: Var, factor: float) -> Var:
    def bwd(g):
        _accum(x, g * factor)

    return Var(x.value * factor, (x,), bwd)


def add(a: Var, b: Var) -> Var:
    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return Var(a.value + b.value, (a, b), bwd)


def add_n(parts: list[Var], weights: list[float] | None = None) -> Var:
    """Weighted sum of scalar nodes (batch-loss assembly)."""
    w = weights if weights is not None else [1.0] * len(parts)
    total = sum(float(p.value) * wi for p, wi in zip(parts, w))

    def bwd(g):
        for p, wi in zip(parts, w):
            _accum(p, g * wi)

    return Var(np.asarray(total), tuple(parts), bwd)


def softmax_cross_entropy(logits: Var, true_index: int) -> tuple[Var, np.ndarray]:
    """Fused softmax + negative log-likelihood; returns (loss node, probs)."""
    probs = softmax(logits.value)
    if not 0 <= true_index < probs.shape[-1]:
        raise IndexError(f"true_index {true_index} out of range")
    loss = -np.log(max(float(probs[true_index]), PROB_FLOOR))

    def bwd(g):
        d = probs.copy()
        d[true_index] -= 1.0
        _accum(logits, g * d)

    return Var(np.asarray(loss), (logits,), bwd), probs
