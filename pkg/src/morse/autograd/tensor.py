"""Dense tensors with a tape-based reverse-mode gradient engine.

Recording is opt-in: operations are only recorded while a :class:`Tape` is
active in the current context. The active tape lives in a ``ContextVar`` so
independent runs in separate threads never share recording state.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "morse_active_tape", default=None
)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from its inputs."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in ops.
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

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its name and AdamW moment buffers."""

    __slots__ = ("name", "exp_avg", "exp_avg_sq", "step")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def reset_state(self) -> None:
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def astype(self, dtype) -> None:
        """Cast value and optimizer buffers in place."""
        self.data = self.data.astype(dtype)
        self.exp_avg = self.exp_avg.astype(dtype)
        self.exp_avg_sq = self.exp_avg_sq.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; every op whose inputs require gradients is
    appended while the tape is active. :meth:`backward` replays the record
    in exact reverse order and then clears it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str):
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward_fn, op))

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is None:
                    leaves[key] = inp
        if loss._tape is None and loss.requires_grad:
            # loss itself is a leaf
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads[key]
            if g.shape != leaf.data.shape:
                raise RuntimeError(f"gradient shape {g.shape} != tensor shape {leaf.data.shape}")
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
        self.clear()


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Parameters listed in ``params`` that the loss does not reach receive a
    zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced under an active Tape")
    tape.backward(loss, params)


def record(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, enforcing finiteness and recording it if needed."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn, op)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)
