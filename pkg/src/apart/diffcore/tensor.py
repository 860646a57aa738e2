"""Dense tensors with a reverse-mode tape.

Every op that consumes a tensor with ``requires_grad`` appends a node to the
tape. Node ids grow monotonically, so sorting reachable nodes by descending id
replays the tape in reverse topological order, which also fixes the gradient
accumulation order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPES = {"f64": np.float64, "f32": np.float32}
_state = threading.local()
_default_precision = "f64"
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class NonFiniteError(ValueError):
    """Raised when a primitive sees NaN or infinite values."""


def get_precision() -> str:
    return getattr(_state, "precision", _default_precision)


def set_precision(mode: str) -> None:
    """Set the numeric mode globally: ``"f64"`` for checks, ``"f32"`` for runs."""
    global _default_precision
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _default_precision = mode
    _state.precision = mode


@contextmanager
def precision(mode: str):
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    prev = getattr(_state, "precision", None)
    _state.precision = mode
    try:
        yield
    finally:
        if prev is None:
            del _state.precision
        else:
            _state.precision = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_dtype():
    return _DTYPES[get_precision()]


class Node:
    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=get_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"],
                 backward: Callable) -> "Tensor":
        if not np.isfinite(data).all():
            shapes = ", ".join(str(p.shape) for p in parents)
            raise NonFiniteError(f"{op}: non-finite output for inputs of shape {shapes}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        out._node = Node(op, parents, backward) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._node = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __pow__(self, exponent):
        from . import functional as F
        return F.power(self, exponent)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients are overwritten, not accumulated across calls, so replaying the
    same tape twice yields identical buffers. Tensors listed in ``leaves`` that
    the loss does not reach get an all-zero gradient.
    """
    if not isinstance(loss, Tensor) or loss._node is None:
        raise ValueError("backward() needs a tensor produced by a taped computation")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    nodes: dict[int, Node] = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        for parent in node.inputs:
            if parent._node is not None and parent._node.id not in nodes:
                stack.append(parent._node)

    node_grads: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaf_refs: dict[int, Tensor] = {}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g_out = node_grads.pop(nid, None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for parent, g in zip(node.inputs, in_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent._node is not None:
                key = parent._node.id
                if key in node_grads:
                    node_grads[key] = node_grads[key] + g
                else:
                    node_grads[key] = g
            else:
                key = id(parent)
                leaf_refs[key] = parent
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + g
                else:
                    leaf_grads[key] = g

    for key, leaf in leaf_refs.items():
        leaf.grad = np.asarray(leaf_grads[key], dtype=leaf.data.dtype).reshape(leaf.shape)
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in leaf_refs:
                leaf.grad = np.zeros_like(leaf.data)
