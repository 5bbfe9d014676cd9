"""Function-level differentiation helpers built on the Tensor tape."""
from typing import Callable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from mdp_core.exceptions import ShapeMismatchError

from .tensor import Tensor, as_tensor, backward_pass, enable_grad, tensor_sum

logger = logging.getLogger(__name__)

TensorOrSeq = Union[Tensor, Sequence[Tensor]]


def _as_list(value) -> Tuple[list, bool]:
    if isinstance(value, (list, tuple)):
        return list(value), True
    return [value], False


def grad(outputs: TensorOrSeq, inputs: TensorOrSeq, grad_outputs=None,
         create_graph: bool = False) -> List[Tensor]:
    """
    Reverse-mode gradients of ``outputs`` with respect to ``inputs``.

    Args:
        outputs (TensorOrSeq): One tensor or a sequence of tensors.
        inputs (TensorOrSeq): Leaf or intermediate tensors to differentiate with respect to.
        grad_outputs: Cotangents matching ``outputs``; may be omitted only for scalar outputs.
        create_graph (bool): Record the backward computation so the result can be
            differentiated again.

    Returns:
        List[Tensor]: One gradient per input; zeros for inputs the outputs do not depend on.

    Raises:
        ShapeMismatchError: If a cotangent does not match its output's shape.
        UnsupportedOpError: If the graph contains a node without a backward rule.
    """
    outputs, _ = _as_list(outputs)
    inputs, _ = _as_list(inputs)
    if grad_outputs is None:
        for out in outputs:
            if out.size != 1:
                raise ShapeMismatchError(f"grad_outputs is required for non-scalar output of shape {out.shape}.")
        grad_outputs = [Tensor(np.ones_like(out.data)) for out in outputs]
    else:
        grad_outputs = [as_tensor(g) for g in _as_list(grad_outputs)[0]]
        for out, g in zip(outputs, grad_outputs):
            if out.shape != g.shape:
                raise ShapeMismatchError(f"Cotangent shape {g.shape} does not match output shape {out.shape}.")

    with enable_grad(create_graph):
        grads = backward_pass(outputs, grad_outputs)

    results = []
    for tensor in inputs:
        g = grads.get(id(tensor))
        results.append(g if g is not None else Tensor(np.zeros_like(tensor.data)))
    return results


def vjp(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], cotangent: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Evaluate ``fn(*inputs)`` and pull ``cotangent`` back to every input.

    Returns:
        Tuple[np.ndarray, List[np.ndarray]]: The output value and one gradient array per input.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with enable_grad(True):
        out = fn(*leaves)
    grads = grad(out, leaves, grad_outputs=np.asarray(cotangent, dtype=np.float64))
    return out.data, [g.data for g in grads]


def _inner_product(tensors: Sequence[Tensor], vectors: Sequence[np.ndarray]) -> Tensor:
    total = Tensor(0.0)
    for tensor, vector in zip(tensors, vectors):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != tensor.shape:
            raise ShapeMismatchError(f"Probe vector of shape {vector.shape} does not match {tensor.shape}.")
        total = total + tensor_sum(tensor * Tensor(vector))
    return total


def mixed_second_order_product(loss_fn: Callable[[List[Tensor], List[Tensor]], Tensor],
                               theta: Sequence[np.ndarray], w: Sequence[np.ndarray],
                               v: Sequence[np.ndarray]) -> List[np.ndarray]:
    """
    Compute ``v^T d^2 L / (d theta d w)`` as the theta-gradient of ``<v, dL/dw>``.

    Args:
        loss_fn: Maps (theta tensors, w tensors) to a scalar tensor.
        theta (Sequence[np.ndarray]): Point in theta space, as a list of arrays.
        w (Sequence[np.ndarray]): Point in w space, as a list of arrays.
        v (Sequence[np.ndarray]): Probe vector shaped like ``w``.

    Returns:
        List[np.ndarray]: Arrays shaped like ``theta``; zeros if ``L`` does not couple theta and w.

    ReLU kinks follow the zero-subgradient convention.
    """
    theta_leaves = [Tensor(np.array(t, dtype=np.float64), requires_grad=True) for t in theta]
    w_leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in w]
    with enable_grad(True):
        loss = loss_fn(theta_leaves, w_leaves)
        grads_w = grad(loss, w_leaves, create_graph=True)
        probe = _inner_product(grads_w, v)
    return [g.data for g in grad(probe, theta_leaves)]


def hessian_vector_product(loss_fn: Callable[[List[Tensor], List[Tensor]], Tensor],
                           theta: Sequence[np.ndarray], w: Sequence[np.ndarray],
                           v: Sequence[np.ndarray]) -> List[np.ndarray]:
    """``(d^2 L / d w^2) v`` by double reverse mode, arrays shaped like ``w``."""
    theta_consts = [Tensor(np.array(t, dtype=np.float64)) for t in theta]
    w_leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in w]
    with enable_grad(True):
        loss = loss_fn(theta_consts, w_leaves)
        grads_w = grad(loss, w_leaves, create_graph=True)
        probe = _inner_product(grads_w, v)
    return [g.data for g in grad(probe, w_leaves)]


def flatten_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten_like(vector: np.ndarray, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Split a flat vector into arrays with the shapes of ``like``."""
    out, offset = [], 0
    for array in like:
        size = int(np.size(array))
        out.append(np.asarray(vector[offset:offset + size]).reshape(np.shape(array)))
        offset += size
    if offset != len(vector):
        raise ShapeMismatchError(f"Flat vector of length {len(vector)} does not match total size {offset}.")
    return out
