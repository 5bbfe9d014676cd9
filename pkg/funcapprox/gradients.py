"""
Model-parameter gradients of the three agents.

The OMD gradient differentiates the outer Bellman error through the inner
optimum ``w*(theta)``:

    dL_true/dtheta = -(dL_true/dw)^T (d^2L/dw^2)^-1 d^2L/(dtheta dw),

evaluated at the current online weights. By default the inverse Hessian is
replaced by the identity; otherwise ``H x = dL_true/dw`` is solved by
conjugate gradients with Hessian-vector products.
"""
from typing import Callable, List, Sequence
import logging

import numpy as np

from autodiff.functional import flatten_arrays, grad, hessian_vector_product, mixed_second_order_product, unflatten_like
from autodiff.solvers import conjugate_gradient
from autodiff.tensor import Tensor, enable_grad
from mdp_core.exceptions import NumericalError

from .losses import inner_loss, mle_model_loss, outer_loss, vep_model_loss
from .models import AgentConfig, Batch
from .networks import ModelNetworks, QNetworkPair

logger = logging.getLogger(__name__)

DEFAULT_CG_TOL = 1e-6
DEFAULT_CG_MAX_ITER = 50


def _leaves(arrays: Sequence[np.ndarray]) -> List[Tensor]:
    return [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]


def loss_gradient(loss_fn: Callable[[List[Tensor]], Tensor], params: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Gradient of a scalar loss built from ``params`` leaves."""
    leaves = _leaves(params)
    with enable_grad(True):
        loss = loss_fn(leaves)
    return [g.data for g in grad(loss, leaves)]


def check_finite(arrays: Sequence[np.ndarray], label: str) -> None:
    for index, array in enumerate(arrays):
        if not np.all(np.isfinite(array)):
            raise NumericalError(f"{label} has non-finite entries in parameter array {index}.")


def implicit_model_gradient(inner_fn: Callable[[List[Tensor], List[Tensor]], Tensor],
                            outer_fn: Callable[[List[Tensor]], Tensor],
                            theta: Sequence[np.ndarray], w: Sequence[np.ndarray],
                            use_identity_inverse: bool = True, cg_tol: float = DEFAULT_CG_TOL,
                            cg_max_iter: int = DEFAULT_CG_MAX_ITER) -> List[np.ndarray]:
    """
    Implicit gradient of ``outer_fn(w*(theta))`` where ``w*`` minimises ``inner_fn(theta, .)``.

    Args:
        inner_fn: Inner loss ``L(theta, w)`` on lists of Tensors.
        outer_fn: Outer loss ``L_true(w)``.
        theta (Sequence[np.ndarray]): Model parameters.
        w (Sequence[np.ndarray]): Inner parameters, assumed near the inner optimum.
        use_identity_inverse (bool): Skip the inverse-Hessian solve.
        cg_tol (float): Relative residual target of the Hessian solve.
        cg_max_iter (int): Iteration cap of the Hessian solve.

    Returns:
        List[np.ndarray]: Arrays shaped like ``theta``.

    Raises:
        NumericalError: If the outer gradient or the result is not finite.
        SolverError: If the Hessian solve meets a zero-curvature direction.
    """
    theta = [np.asarray(t, dtype=np.float64) for t in theta]
    w = [np.asarray(x, dtype=np.float64) for x in w]
    outer_grad = loss_gradient(outer_fn, w)
    check_finite(outer_grad, "Outer-loss gradient")

    if use_identity_inverse:
        probe = outer_grad
    else:
        def hessian_apply(vector: np.ndarray) -> np.ndarray:
            return flatten_arrays(hessian_vector_product(inner_fn, theta, w, unflatten_like(vector, w)))

        result = conjugate_gradient(hessian_apply, flatten_arrays(outer_grad), tol=cg_tol, max_iter=cg_max_iter)
        logger.debug("Inner Hessian solve: %d iterations, residual %.3e", result.iterations, result.residual_norm)
        probe = unflatten_like(result.x, w)

    gradient = [-g for g in mixed_second_order_product(inner_fn, theta, w, probe)]
    check_finite(gradient, "Model gradient")
    return gradient


def omd_model_gradient(model: ModelNetworks, q_pair: QNetworkPair, model_batch: Batch, real_batch: Batch,
                       config: AgentConfig) -> List[np.ndarray]:
    """
    OMD gradient for the model networks.

    ``model_batch`` supplies the (s, a) pairs fed to the model; ``real_batch``
    the transitions of the outer Bellman error. Both losses use the
    double-Q composed targets.
    """
    def inner_fn(theta_leaves, w_leaves):
        return inner_loss(model, q_pair, model_batch.states, model_batch.actions, config.alpha, config.gamma,
                          model_params=theta_leaves, q_params=w_leaves)

    def outer_fn(w_leaves):
        return outer_loss(q_pair, real_batch, config.alpha, config.gamma, q_params=w_leaves)

    return implicit_model_gradient(
        inner_fn, outer_fn, model.parameters(), q_pair.online_parameters(),
        use_identity_inverse=config.use_identity_inverse,
    )


def mle_model_gradient(model: ModelNetworks, batch: Batch) -> List[np.ndarray]:
    """Gradient of next-state MSE plus reward MSE."""
    def loss_fn(leaves):
        dynamics_loss, reward_loss = mle_model_loss(model, batch, model_params=leaves)
        return dynamics_loss + reward_loss

    gradient = loss_gradient(loss_fn, model.parameters())
    check_finite(gradient, "MLE gradient")
    return gradient


def vep_model_gradient(model: ModelNetworks, batch: Batch, policies: Sequence[int],
                       value_fns: Sequence[List[np.ndarray]], gamma: float) -> List[np.ndarray]:
    gradient = loss_gradient(
        lambda leaves: vep_model_loss(model, batch, policies, value_fns, gamma, model_params=leaves),
        model.parameters(),
    )
    check_finite(gradient, "VEP gradient")
    return gradient
