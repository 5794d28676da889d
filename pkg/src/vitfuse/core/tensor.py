"""Reverse-mode autodiff tensor.

A Tensor wraps a numpy array (float32 by default, float64 for gradient
checking) and records the operations that produced it. Calling
``backward()`` on a scalar walks the recorded graph in reverse and
accumulates gradients into leaf tensors that require them.

Gradient buffers are additive across backward passes: two identical
passes leave exactly twice the gradient of one.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class autograd_off:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype != np.float64:
                arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        """Wrap an already-typed ndarray without copying or casting."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        return t

    # ------------------------------------------------------------------
    # basic introspection

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # gradient machinery

    def zero_grad(self) -> None:
        """Reset the gradient buffer to exact zeros (kept allocated)."""
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad.

        ``self`` must be a scalar (single element). Intermediate node
        gradients are local to the pass; only leaf buffers persist, so
        repeated passes over the same graph add up.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        visited = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: persist the accumulated gradient
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # operator sugar (implementations live in ops.py)

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops

        return ops.pow_const(self, exponent)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        from . import ops

        return ops.transpose(self, axes)


def _scalar_error(t: Tensor):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Coerce a python scalar / ndarray / Tensor into a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def result_tensor(data: np.ndarray, parents: Iterable[Tensor], vjp: Callable) -> Tensor:
    """Build an op result, recording the graph edge only when needed."""
    parents = tuple(parents)
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


class Parameter:
    """A named model weight; frozen parameters never receive gradients."""

    __slots__ = ("tensor", "frozen", "name")

    def __init__(self, tensor: Tensor, frozen: bool = False, name: str = ""):
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self.tensor = tensor
        self.frozen = bool(frozen)
        self.name = name
        self.tensor.requires_grad = not self.frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    def numel(self) -> int:
        return self.tensor.size

    def __repr__(self) -> str:
        kind = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name or '?'}, shape={self.shape}, {kind})"


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
