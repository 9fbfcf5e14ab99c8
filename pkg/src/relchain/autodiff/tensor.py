"""Dense float64 tensors with a reverse-mode tape."""

from __future__ import annotations

import contextlib
import threading

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as they are created, so the list is already in
    topological order.  A tape is consumed by ``backward``; recording onto a
    consumed tape starts a fresh pass.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, t: "Tensor") -> None:
        if self.consumed:
            self.reset()
        t.node.tape = self
        t.node.index = len(self.nodes)
        self.nodes.append(t)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("parents", "backward", "op", "tape", "index")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.op = op
        self.tape = None
        self.index = -1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, key):
        return ops.getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return ops.reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return ops.reduce_max(self, axis, keepdims)

    @property
    def T(self):
        return ops.transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a name and the initializer that produced it."""

    __slots__ = ("init",)

    def __init__(self, data, name: str, init: str = "custom"):
        super().__init__(data, requires_grad=True, name=name)
        self.init = init

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, init={self.init!r})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    """Wrap an op's output; records a tape node when any parent needs grads."""
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(parents, backward_fn, op)
        _state.tape.record(out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = loss.node.tape
    if tape.consumed:
        raise TapeError("tape already consumed by an earlier backward; reset it and rerun the forward pass")
    idx = loss.node.index
    if idx >= len(tape.nodes) or tape.nodes[idx] is not loss:
        raise TapeError("loss is not on its tape (was the tape reset?)")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes[: idx + 1]):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g
        node = t.node
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if p.node is None:
                if p.grad is None:
                    p.grad = np.array(gp, dtype=np.float64, copy=True)
                else:
                    p.grad += gp
            else:
                key = id(p)
                pending[key] = pending[key] + gp if key in pending else gp
    tape.consumed = True


def grad(t: Tensor) -> Tensor:
    """Gradient of ``t`` from the last backward pass (zeros if unreached)."""
    return Tensor(np.zeros_like(t.data) if t.grad is None else t.grad)


from relchain.autodiff import ops  # noqa: E402  (operators above need the module)
