"""
Tape-free reverse-mode automatic differentiation over numpy arrays.

Each differentiable operation is a ``Function`` subclass with a numpy
``forward`` and a ``backward`` returning one gradient per tensor input.
``Function.apply`` links the output tensor to the function instance, so the
graph is rebuilt on every forward pass and walked in reverse topological order
by ``Tensor.backward``.
"""
import contextlib
import threading
from typing import Iterable

import numpy as np

from usr.errors import NumericError, DimensionError

DTYPE = np.float64

_grad_mode = threading.local()


@contextlib.contextmanager
def no_grad():
    """
    Disable graph construction inside the block (per thread)
    """
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


class Tensor:
    """
    n-dimensional array with a gradient slot
    """

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.array(data, dtype=dtype) if not isinstance(data, np.ndarray) or data.dtype != dtype \
            else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        from usr.ops import Add
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from usr.ops import Sub
        return Sub.apply(self, other)

    def __rsub__(self, other):
        from usr.ops import Sub
        return Sub.apply(other, self)

    def __mul__(self, other):
        from usr.ops import Mul
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from usr.ops import Mul
        return Mul.apply(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError('division is only defined by a constant')
        from usr.ops import Mul
        return Mul.apply(self, 1.0 / other)

    def __matmul__(self, other):
        from usr.ops import MatMul
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        from usr.ops import Index
        return Index.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        from usr.ops import Sum
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from usr.ops import Mean
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from usr.ops import Reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        from usr.ops import Permute
        return Permute.apply(self, axes=axes)

    def exp(self):
        from usr.ops import Exp
        return Exp.apply(self)

    def abs(self):
        from usr.ops import Abs
        return Abs.apply(self)

    # -- reverse pass ------------------------------------------------------------

    def _topological_order(self) -> list['Tensor']:
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray = None):
        """
        Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad
        """
        if not self.requires_grad:
            raise NumericError('backward() called on a tensor that does not require grad')
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f'backward() without a gradient needs a scalar, got shape {self.shape}')
            grad = np.ones_like(self.data)

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f'{node._ctx.__class__.__name__} produced a non-finite gradient')
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """
    Base class of differentiable operations

    Positional arguments are tensors (constants are wrapped), keyword arguments
    are static configuration and never receive gradients.
    """

    def __init__(self):
        self.parents: tuple[Tensor, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError()

    def backward(self, grad: np.ndarray) -> Iterable[np.ndarray | None]:
        raise NotImplementedError()

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f'{cls.__name__} received non-finite input')
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if not np.all(np.isfinite(out.data)):
            raise NumericError(f'{cls.__name__} produced non-finite values')
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            fn.parents = tensors
            out.requires_grad = True
            out._ctx = fn
        return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """
    Sum ``grad`` down to ``shape`` undoing numpy broadcasting
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad
