"""Small deterministic reverse-mode autodiff engine.

Tensors are float64 numpy arrays plus an optional gradient buffer. Every
differentiable op appends a node to the active :class:`Tape`; ``backward``
walks the tape in reverse recording order. Gradients accumulate into leaf
tensors (``+=``) so several losses can be backpropagated before an update,
and :func:`zero_grad_group` can wipe one parameter group in between.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, DataError, DimensionError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "ParamGroup",
    "tensor",
    "matmul",
    "transpose",
    "add",
    "add_bias",
    "scale",
    "concat",
    "relu",
    "total",
    "softmax_cross_entropy",
    "detach",
    "backward",
    "zero_grad_group",
    "sgd_step",
    "current_tape",
]


class Tensor:
    """Dense float64 array that may take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, kept to what the model actually uses
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape of the current
    thread. Outside any ``with`` block ops go to a per-thread default tape,
    which callers may :meth:`clear` between steps.
    """

    nodes: list = field(default_factory=list)
    # test hook: called with the node id as backward visits it
    on_visit: Optional[Callable[[int, Node], None]] = None

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, rule) -> Tensor:
        output.node_id = len(self.nodes)
        output.tape = self
        self.nodes.append(Node(op, tuple(inputs), output, rule))
        return output

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node_id = None
            node.output.tape = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
    return _local.stack


def current_tape() -> Tape:
    return _stack()[-1]


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule) -> Tensor:
    out = Tensor(out_data)
    if _needs_grad(*inputs):
        out.requires_grad = True
        current_tape().record(op, inputs, out, rule)
    return out


def _check_2d(t: Tensor, what: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {t.shape}")


# --------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul lhs")
    _check_2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, rule)


def transpose(a: Tensor) -> Tensor:
    _check_2d(a, "transpose input")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add, the only broadcast the engine supports."""
    _check_2d(x, "add_bias input")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"bias of shape {b.shape} does not fit rows of {x.shape}")

    def rule(g):
        return g, g.sum(axis=0)

    return _emit("add_bias", (x, b), x.data + b.data, rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), c * x.data, lambda g: (c * g,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors column-wise in argument order."""
    parts = list(parts)
    if not parts:
        raise UsageError("concat needs at least one tensor")
    for p in parts:
        _check_2d(p, "concat part")
    n = parts[0].shape[0]
    if any(p.shape[0] != n for p in parts):
        raise UsageError(f"concat parts disagree on rows: {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

    return _emit("concat", parts, np.concatenate([p.data for p in parts], axis=1), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # gradient is 0 at exactly 0
    # np.maximum propagates NaN, so a diverged input still trips the loss check
    return _emit("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer labels under softmax(logits).

    ``reduction`` is ``"mean"`` (default, batch average) or ``"sum"``.
    """
    _check_2d(logits, "logits")
    y = np.asarray(labels)
    n, K = logits.shape
    if n < 1:
        raise DataError("cross-entropy needs at least one row")
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {y.dtype}")
    if y.min() < 0 or y.max() >= K:
        raise DataError(f"label out of range [0, {K}): min={y.min()}, max={y.max()}")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(n), y]
    denom = n if reduction == "mean" else 1
    probs = np.exp(shifted - log_z[:, None])

    def rule(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (float(g) / denom),)

    return _emit("softmax_cross_entropy", (logits,), np.array(nll.sum() / denom), rule)


def detach(x: Tensor) -> Tensor:
    """Same values as ``x``; no gradient ever flows back through it."""
    out = Tensor(x.data.copy())
    if x.requires_grad:
        # kept on the tape as an explicit boundary; the output never needs grad
        current_tape().record("detach", (x,), out, lambda g: (None,))
        out.requires_grad = False
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    tape = loss.tape
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if tape.on_visit is not None:
            tape.on_visit(nid, node)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None or inp.tape is not tape:
                _accumulate(inp, gi)
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + gi
            else:
                pending[inp.node_id] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# --------------------------------------------------------- parameter groups


@dataclass
class ParamGroup:
    """Named set of parameters that share an update policy."""

    name: str
    tensors: list = field(default_factory=list)
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = [np.zeros_like(t.data) for t in self.tensors]

    def add(self, t: Tensor) -> Tensor:
        t.requires_grad = True
        self.tensors.append(t)
        self.velocity.append(np.zeros_like(t.data))
        return t

    def grad_norm(self) -> float:
        sq = sum(float(np.sum(t.grad**2)) for t in self.tensors if t.grad is not None)
        return float(np.sqrt(sq))

    def clear_grads(self) -> None:
        for t in self.tensors:
            t.grad = None


def zero_grad_group(group: ParamGroup) -> None:
    """Set every existing gradient buffer in ``group`` to exactly zero."""
    for t in group.tensors:
        if t.grad is not None:
            t.grad[...] = 0.0


def sgd_step(groups: Sequence[ParamGroup], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """SGD with heavy-ball momentum and L2 weight decay, then clear grads.

    Parameters whose gradient was never populated (``grad is None``) are
    skipped entirely, velocity and decay included.
    """
    if not lr >= 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ConfigError(f"weight_decay must be non-negative, got {weight_decay}")
    for group in groups:
        for p, v in zip(group.tensors, group.velocity):
            if p.grad is None:
                continue
            d = p.grad + weight_decay * p.data if weight_decay else p.grad
            v *= momentum
            v += d
            p.data -= lr * v
            p.grad = None
