"""
Reverse-mode automatic differentiation over NumPy arrays.

Every :class:`Tensor` produced by an operation is a node of an implicit tape:
it keeps its parents and a backward function mapping the output cotangent to
one cotangent per parent. Backward functions are written with Tensor
operations, so differentiating with ``create_graph=True`` records a second
graph that can itself be differentiated.
"""
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from mdp_core.exceptions import ShapeMismatchError, UnsupportedOpError

logger = logging.getLogger(__name__)

_grad_enabled = True

ArrayLike = Union['Tensor', np.ndarray, float, int]
BackwardFn = Callable[['Tensor'], Tuple[Optional['Tensor'], ...]]


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def enable_grad(enabled: bool = True):
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def as_tensor(value: ArrayLike) -> 'Tensor':
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """
    A float64 array that optionally records how it was computed.

    Attributes:
        data (np.ndarray): The value.
        requires_grad (bool): Whether gradients flow to or through this tensor.
        op (str): Name of the operation that produced the tensor (``'leaf'`` for inputs).
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = 'leaf'
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence['Tensor'], backward: Optional[BackwardFn],
                op: str) -> 'Tensor':
        """Create the output node of ``op``; it is recorded only if a parent needs gradients."""
        out = cls(data)
        out.op = op
        if _grad_enabled and any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def relu(self) -> 'Tensor':
        return relu(self)

    def square(self) -> 'Tensor':
        return mul(self, self)


def unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``grad`` over the axes NumPy broadcasting added or stretched to reach its shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = tensor_sum(grad, axis=tuple(range(extra)))
    stretched = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if stretched:
        grad = tensor_sum(grad, axis=stretched, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        'add',
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(neg(g), b.shape)),
        'sub',
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (neg(g),), 'neg')


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(mul(g, b), a.shape), unbroadcast(mul(g, a), b.shape)),
        'mul',
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data / b.data, (a, b),
        lambda g: (
            unbroadcast(div(g, b), a.shape),
            unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
        'div',
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul needs (n, k) @ (k, m), got {a.shape} @ {b.shape}.")
    return Tensor.from_op(
        a.data @ b.data, (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        'matmul',
    )


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a 2-D tensor, got shape {a.shape}.")
    return Tensor.from_op(a.data.T, (a,), lambda g: (transpose(g),), 'transpose')


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = Tensor.from_op(np.exp(a.data), (a,), None, 'exp')
    out._backward = lambda g: (mul(g, out),)
    return out


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (div(g, a),), 'log')


def relu(a: ArrayLike) -> Tensor:
    """Rectifier; the derivative at 0 is taken to be 0."""
    a = as_tensor(a)
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return Tensor.from_op(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), 'relu')


def _normalise_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_to(g: Tensor, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> Tensor:
    """Broadcast a reduced cotangent back over the reduced axes."""
    if not keepdims:
        kept = list(shape)
        for ax in axes:
            kept[ax] = 1
        g = reshape(g, tuple(kept))
    return broadcast_to(g, shape)


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalise_axis(axis, a.ndim)
    return Tensor.from_op(
        a.data.sum(axis=axes, keepdims=keepdims), (a,),
        lambda g: (_expand_to(g, a.shape, axes, keepdims),),
        'sum',
    )


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalise_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return div(tensor_sum(a, axis=axes, keepdims=keepdims), float(count))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),), 'reshape')


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(
        np.broadcast_to(a.data, shape).copy(), (a,),
        lambda g: (unbroadcast(g, a.shape),),
        'broadcast_to',
    )


def logsumexp(a: ArrayLike, axis: int = -1, alpha: float = 1.0, keepdims: bool = False) -> Tensor:
    """
    ``alpha * log(sum(exp(a / alpha)))`` along ``axis`` with max-shift stabilisation.

    The backward pass multiplies by ``softmax(a / alpha)``, itself built from
    Tensor operations so that second derivatives are available.
    """
    a = as_tensor(a)
    axes = _normalise_axis(axis, a.ndim)
    peak = a.data.max(axis=axes, keepdims=True)
    value = peak + alpha * np.log(np.exp((a.data - peak) / alpha).sum(axis=axes, keepdims=True))
    data = value if keepdims else np.squeeze(value, axis=axes)

    out = Tensor.from_op(data, (a,), None, 'logsumexp')

    def backward(g: Tensor):
        expanded_out = _expand_to(out, a.shape, axes, keepdims)
        weights = exp(div(sub(a, expanded_out), alpha))
        return (mul(_expand_to(g, a.shape, axes, keepdims), weights),)

    out._backward = backward
    return out


def softmax(a: ArrayLike, axis: int = -1, alpha: float = 1.0) -> Tensor:
    """``exp((a - logsumexp(a)) / alpha)`` along ``axis``."""
    a = as_tensor(a)
    return exp(div(sub(a, logsumexp(a, axis=axis, alpha=alpha, keepdims=True)), alpha))


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    encoded = np.zeros(indices.shape + (depth,))
    np.put_along_axis(encoded, indices[..., None], 1.0, axis=-1)
    return encoded


def gather(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Select ``a[..., indices]`` along the last axis, one index per leading position."""
    a = as_tensor(a)
    mask = Tensor(one_hot(indices, a.shape[-1]))
    if mask.shape != a.shape:
        raise ShapeMismatchError(f"gather indices of shape {np.shape(indices)} do not fit tensor {a.shape}.")
    return tensor_sum(mul(a, mask), axis=-1)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Element-wise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = Tensor((a.data <= b.data).astype(np.float64))
    return add(mul(a, pick_a), mul(b, sub(1.0, pick_a)))


def topological_order(outputs: Iterable[Tensor]) -> List[Tensor]:
    """
    Nodes reachable from ``outputs`` that record gradients, parents before children.

    Iterative depth-first search, so deep graphs do not hit the recursion limit.
    """
    order: List[Tensor] = []
    visited = set()
    for root in outputs:
        if not root.requires_grad or id(root) in visited:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward_pass(outputs: Sequence[Tensor], grad_outputs: Sequence[Tensor]) -> dict:
    """
    Propagate cotangents from ``outputs`` to every node and return ``{id(node): cotangent}``.

    Raises:
        UnsupportedOpError: If a recorded node has no backward function.
    """
    grads = {}
    for out, g in zip(outputs, grad_outputs):
        if out.requires_grad:
            grads[id(out)] = grads[id(out)] + g if id(out) in grads else g

    for node in reversed(topological_order(outputs)):
        g = grads.get(id(node))
        if g is None or not node._parents:
            continue
        if node._backward is None:
            logger.error("Node %r has no backward rule.", node)
            raise UnsupportedOpError(f"Operation '{node.op}' has no vector-Jacobian product rule.")
        parent_grads = node._backward(g)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = add(grads[key], parent_grad) if key in grads else parent_grad
    return grads
