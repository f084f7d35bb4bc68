"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :func:`backward`
orders the recorded nodes topologically and walks them in reverse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""

    def __init__(self, layer: str, *shapes, detail: str = ""):
        self.layer = layer
        self.shapes = shapes
        parts = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{layer}: incompatible shapes {parts}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Create an op output, recording it in the graph only when a parent needs gradients."""
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class Graph:
    """Operation records reachable from a loss, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def order(self) -> dict[int, int]:
        return {t.id: i for i, t in enumerate(self.nodes)}

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        # iterative DFS with three colours so that cycles are detected, not looped on
        white, grey, black = 0, 1, 2
        colour: dict[int, int] = {}
        nodes: list[Tensor] = []
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                colour[t.id] = black
                nodes.append(t)
                continue
            c = colour.get(t.id, white)
            if c == black:
                continue
            if c == grey:
                raise GraphError(f"cycle detected at node {t.id} ({t.op})")
            colour[t.id] = grey
            stack.append((t, True))
            for p in t._parents:
                pc = colour.get(p.id, white)
                if pc == grey:
                    raise GraphError(f"cycle detected at node {p.id} ({p.op})")
                if pc == white and p.requires_grad:
                    stack.append((p, False))
        return cls(nodes)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> Graph:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor upstream of ``loss``.

    Gradients add onto whatever ``grad`` already holds, so callers that reuse
    leaves across steps must zero them first.
    """
    if loss.data.size != 1 and grad is None:
        raise ShapeError("backward", loss.shape, (), detail="loss must be scalar")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires gradients")
    graph = Graph.from_output(loss)
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending: dict[int, np.ndarray] = {loss.id: seed}
    for node in reversed(graph.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node.grad is not None or node.name is not None:
            # named intermediates keep their gradient for inspection
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"backward[{node.op}]", pg.shape, parent.shape)
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg
    return graph
