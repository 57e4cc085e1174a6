"""Tensors, parameters and the reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape everything runs as plain
numpy with no bookkeeping, which is the evaluation fast path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Param(Tensor):
    """A named trainable tensor whose gradient accumulates across backward calls."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.grad is None or self.grad.shape != self.data.shape or self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype})"


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    output: Tensor
    inputs: tuple
    vjp: VJP


class TapeError(ValueError):
    pass


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in creation order, which is
    a valid topological order, and :meth:`backward` replays them in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, output: Tensor, inputs: tuple, vjp: VJP) -> None:
        output._node = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(output, inputs, vjp))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf
        tensor that requires a gradient.

        The recorded graph is released afterwards unless ``retain_graph``;
        tensors and nodes reference each other, so dropping the nodes here
        frees activations without waiting for the cycle collector.
        """
        if loss._tape is not self or loss._node is None or loss._node >= len(self.nodes):
            raise TapeError("loss was not produced on this tape")
        if seed is None:
            if loss.data.size != 1:
                raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {loss._node: np.asarray(seed, dtype=loss.dtype)}
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._tape is self and inp._node is not None:
                    prev = grads.get(inp._node)
                    grads[inp._node] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)
        if not retain_graph:
            self.release()

    def release(self) -> None:
        for node in self.nodes:
            node.output._tape = None
            node.output._node = None
        self.nodes.clear()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
