"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tape`` records every primitive applied while it is active (entered as a
context manager). Entries are appended in execution order, so the tape is
topologically sorted by construction; ``Tape.gradients`` replays it backwards
exactly once per node.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatibly shaped inputs."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (non-scalar loss, mutated tape, ...)."""


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    """The innermost open tape, or None outside any recording context."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense multi-dimensional array of 64-bit reals.

    ``node`` / ``tape`` link the tensor to the recording that produced it;
    both are None for constants and for tensors created outside a tape.
    """

    __slots__ = ("data", "node", "tape", "_entry")

    def __init__(self, data, *, _node=None, _tape=None, _entry=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = _node
        self.tape = _tape
        self._entry = _entry

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar delegates to the primitive registry.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.negate(self)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.negate(as_tensor(other)))

    def __rsub__(self, other):
        from . import ops

        return ops.add(as_tensor(other), ops.negate(self))

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Parameter:
    """A trainable tensor with a gradient accumulator and optimizer state.

    The gradient buffer always has the same shape as the value and must be
    zeroed (``zero_grad``) at the start of each training step.
    """

    __slots__ = ("value", "grad", "state", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.state: dict = {}
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def tensor(self) -> Tensor:
        """View this parameter as a tensor, watched on the active tape.

        Repeated calls under one tape return tensors sharing a single node,
        which is what makes weight sharing between network paths exact: all
        uses accumulate into the same gradient slot.
        """
        tape = active_tape()
        if tape is None:
            return Tensor(self.value)
        return tape.watch_parameter(self)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.value.shape})"


class _Entry:
    __slots__ = ("in_ids", "backward", "op_name")

    def __init__(self, in_ids, backward, op_name):
        self.in_ids = in_ids
        self.backward = backward
        self.op_name = op_name


class Tape:
    """Ordered record of primitive applications for gradient replay."""

    __slots__ = ("_entries", "_param_nodes", "_node_params")

    def __init__(self):
        self._entries: list[_Entry] = []
        self._param_nodes: dict[int, Tensor] = {}
        self._node_params: dict[int, Parameter] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def operation_names(self) -> list[str]:
        return [e.op_name for e in self._entries]

    def _append(self, data: np.ndarray, entry: _Entry) -> Tensor:
        node = len(self._entries)
        self._entries.append(entry)
        return Tensor(data, _node=node, _tape=self, _entry=entry)

    def watch(self, value) -> Tensor:
        """Record an input leaf so gradients with respect to it are kept."""
        t = as_tensor(value)
        return self._append(t.data, _Entry((), None, "leaf"))

    def watch_parameter(self, param: Parameter) -> Tensor:
        cached = self._param_nodes.get(id(param))
        if cached is not None:
            return cached
        t = self._append(param.value, _Entry((), None, "parameter"))
        self._param_nodes[id(param)] = t
        self._node_params[t.node] = param
        return t

    def record(
        self,
        op_name: str,
        inputs: Sequence[Tensor],
        out_data: np.ndarray,
        backward: Callable[[np.ndarray], Iterable[np.ndarray | None]],
    ) -> Tensor:
        """Record one primitive application and return its output tensor."""
        in_ids = tuple(t.node if t.tape is self else None for t in inputs)
        if all(i is None for i in in_ids):
            return Tensor(out_data)
        return self._append(out_data, _Entry(in_ids, backward, op_name))

    def gradients(
        self, loss: Tensor, *, accumulate_parameters: bool = True
    ) -> dict[int, np.ndarray]:
        """Reverse replay from ``loss``; returns node id -> gradient array.

        Every recorded node reachable from the loss gets an entry; watched
        parameters additionally have the result added to their ``grad``
        buffer when ``accumulate_parameters`` is set.
        """
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss was not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.node >= len(self._entries) or self._entries[loss.node] is not loss._entry:
            raise TapeError("tape was mutated after the forward pass")

        grads: list[np.ndarray | None] = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(loss.data)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            if g is None:
                continue
            entry = self._entries[i]
            if entry.backward is None:
                continue
            input_grads = entry.backward(g)
            for in_id, gin in zip(entry.in_ids, input_grads):
                if in_id is None or gin is None:
                    continue
                if grads[in_id] is None:
                    # Own the buffer: backward functions may return views.
                    grads[in_id] = np.array(gin, dtype=np.float64)
                else:
                    grads[in_id] += gin

        result = {i: g for i, g in enumerate(grads) if g is not None}
        if accumulate_parameters:
            for node, param in self._node_params.items():
                g = result.get(node)
                if g is not None:
                    param.grad += g
        return result


def record(op_name, inputs, out_data, backward) -> Tensor:
    """Record on the active tape, or return a plain tensor when not tracing."""
    tape = active_tape()
    if tape is None:
        return Tensor(out_data)
    return tape.record(op_name, inputs, out_data, backward)


def stop_gradient(x) -> Tensor:
    """Detach ``x`` from any tape: the pullback through it is exactly zero."""
    t = as_tensor(x)
    return Tensor(t.data)
