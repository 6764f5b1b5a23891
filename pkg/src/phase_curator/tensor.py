"""Dense tensors with a reverse-mode gradient tape.

The tensor is a thin wrapper over a contiguous row-major numpy array in f32
or f64. Operations (see `ops`) record nodes onto the active `Tape`; a
backward pass walks the recorded nodes once, in reverse, and accumulates
gradients into the `.grad` buffers of every tensor it touches.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (wrong tape, repeated backward, ...)."""


_ALLOWED_DTYPES = (np.float32, np.float64)

# When enabled, every op asserts its output is finite. Off by default:
# it forces a full scan of every result.
_check_finite = False


def set_debug_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def debug_checks_enabled() -> bool:
    return _check_finite


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class TapeNode:
    """One recorded op: output, inputs, and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tape_stack: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Single-owner record of ops in topological order.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        if popped is not self:
            raise TapeError("tape stack corrupted: exited a tape that was not innermost")

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every tensor on the tape.

    `loss` must be a scalar produced by an op recorded on `tape`. Calling
    backward twice on the same tape is an error; leaf gradients would
    silently double.
    """
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss tensor was not produced on this tape (detached from the graph)")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass; build a new tape")
    tape._consumed = True

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        input_grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None:
                continue
            if tensor.requires_grad or tape.produced(tensor):
                tensor.accumulate_grad(np.asarray(grad, dtype=tensor.data.dtype))
