"""
Linear and root solvers with implicit differentiation.

``root_solve`` records a single tape node whose value is the root ``w*`` of
``f(theta, w) = 0``. Its backward pass never differentiates through the
solver iterations: the implicit function theorem gives

    d w*/d theta = -(df/dw)^-1 df/dtheta,

so a cotangent ``g`` is pulled back as ``vjp_theta(-x)`` with
``(df/dw)^T x = g``. With ``use_identity_inverse`` the solve is skipped and
``x = g``.
"""
from typing import Callable, List, Optional, Sequence, Union
import logging

import numpy as np
from django.conf import settings

from mdp_core.exceptions import ConvergenceError, NumericalError, ShapeMismatchError, SolverError

from .functional import grad
from .models import CGResult, RootSolveConfig
from .tensor import Tensor, as_tensor, enable_grad, no_grad

logger = logging.getLogger(__name__)

LinearOperator = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]

BREAKDOWN_TOL = 1e-14


def conjugate_gradient(operator: LinearOperator, b: np.ndarray, tol: float = 1e-10,
                       max_iter: int = 1000) -> CGResult:
    """
    Solve ``A x = b`` by conjugate gradients, touching ``A`` only through products.

    ``A`` must be symmetric positive-definite on the Krylov space explored; that
    is the caller's responsibility. The solve stops once ``||b - A x|| <= tol ||b||``.

    Args:
        operator (LinearOperator): A square matrix or a callable computing ``A @ x``.
        b (np.ndarray): Right-hand side vector.
        tol (float): Relative residual target.
        max_iter (int): Iteration cap; hitting it is reported, not raised.

    Returns:
        CGResult: Solution, iteration count, final residual norm and a convergence flag.

    Raises:
        SolverError: If a search direction has (numerically) zero curvature.
    """
    if callable(operator):
        apply = operator
    else:
        matrix = np.asarray(operator, dtype=np.float64)
        if matrix.shape != (len(b), len(b)):
            raise ShapeMismatchError(f"Matrix of shape {matrix.shape} does not fit a right-hand side of length {len(b)}.")
        apply = matrix.__matmul__

    b = np.asarray(b, dtype=np.float64).ravel()
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(x, 0, 0.0, True)

    threshold = tol * b_norm
    residual = b.copy()
    direction = residual.copy()
    residual_sq = float(residual @ residual)
    iterations = 0
    converged = False

    for iterations in range(1, max_iter + 1):
        applied = np.asarray(apply(direction), dtype=np.float64).ravel()
        curvature = float(direction @ applied)
        if not np.isfinite(curvature) or abs(curvature) <= BREAKDOWN_TOL * float(direction @ direction):
            logger.error("CG breakdown at iteration %d: curvature %.3e", iterations, curvature)
            raise SolverError(f"Conjugate gradient broke down (zero curvature) at iteration {iterations}.",
                              iterations=iterations - 1)
        step = residual_sq / curvature
        x += step * direction
        residual -= step * applied
        new_residual_sq = float(residual @ residual)
        if np.sqrt(new_residual_sq) <= threshold:
            converged = True
            break
        direction = residual + (new_residual_sq / residual_sq) * direction
        residual_sq = new_residual_sq

    residual_norm = float(np.linalg.norm(b - np.asarray(apply(x)).ravel()))
    if converged:
        logger.debug("CG converged in %d iterations, residual %.3e", iterations, residual_norm)
    else:
        logger.warning("CG stopped after %d iterations with residual %.3e", iterations, residual_norm)
    return CGResult(x, iterations, residual_norm, converged)


def _pack(tensors: List[Tensor], is_sequence: bool):
    return list(tensors) if is_sequence else tensors[0]


def _transpose_jacobian_operator(residual_fn, theta_arrays: List[np.ndarray], is_sequence: bool,
                                 w_star: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``x -> (df/dw)^T x`` at ``(theta, w*)`` on flat vectors, reusing one recorded graph."""
    w_leaf = Tensor(w_star.copy(), requires_grad=True)
    with enable_grad(True):
        residual = residual_fn(_pack([Tensor(t) for t in theta_arrays], is_sequence), w_leaf)

    def apply(x: np.ndarray) -> np.ndarray:
        return grad(residual, [w_leaf], grad_outputs=x.reshape(w_star.shape))[0].data.ravel()

    return apply


def _solve_transpose_jacobian(residual_fn, theta_arrays, is_sequence, w_star, g, config: RootSolveConfig) -> np.ndarray:
    apply = _transpose_jacobian_operator(residual_fn, theta_arrays, is_sequence, w_star)
    rhs = g.ravel()

    if config.linear_solver == 'dense':
        columns = [apply(unit) for unit in np.eye(rhs.size)]
        jacobian_t = np.stack(columns, axis=1)
        try:
            x = np.linalg.solve(jacobian_t, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Dense transpose-Jacobian solve failed: {exc}") from exc
        return x.reshape(w_star.shape)

    result = conjugate_gradient(apply, rhs, tol=config.cg_tol, max_iter=config.cg_max_iter)
    if not result.converged:
        raise SolverError(
            f"Transpose-Jacobian CG did not converge (residual {result.residual_norm:.3e}).",
            iterations=result.iterations,
        )
    return result.x.reshape(w_star.shape)


def _pullback_theta(residual_fn, theta_arrays, is_sequence, w_star, cotangent) -> List[np.ndarray]:
    leaves = [Tensor(t.copy(), requires_grad=True) for t in theta_arrays]
    with enable_grad(True):
        residual = residual_fn(_pack(leaves, is_sequence), Tensor(w_star))
    return [g.data for g in grad(residual, leaves, grad_outputs=cotangent)]


def root_solve(residual_fn: Callable, w0, theta, solver: Callable, config: Optional[RootSolveConfig] = None,
               residual_tol: Optional[float] = None) -> Tensor:
    """
    Differentiable root ``w*`` of ``residual_fn(theta, w) = 0``.

    Args:
        residual_fn (Callable): ``(theta, w) -> Tensor`` shaped like ``w``, built from Tensor ops.
            ``theta`` is passed in the same form it was given (one tensor or a list).
        w0: Initial point for ``solver``; receives a zero gradient.
        theta: A tensor or a sequence of tensors the root depends on.
        solver (Callable): ``(w0_array, theta_arrays) -> w*`` on plain arrays.
        config (Optional[RootSolveConfig]): Backward mode; project defaults when omitted.
        residual_tol (Optional[float]): Required ``||f(theta, w*)||_inf``;
            defaults to ``settings.OMD_IFT_RESIDUAL_TOL``.

    Returns:
        Tensor: ``w*``, recorded on the tape with parents ``theta`` and ``w0``.

    Raises:
        ConvergenceError: If the solver's output leaves a residual above ``residual_tol``.
        SolverError: If the exact-mode CG solve fails during backward.

    The backward pass yields constant cotangents, so the node supports first-order
    differentiation only.
    """
    config = config or RootSolveConfig.from_settings()
    residual_tol = settings.OMD_IFT_RESIDUAL_TOL if residual_tol is None else residual_tol

    is_sequence = isinstance(theta, (list, tuple))
    thetas = [as_tensor(t) for t in (theta if is_sequence else [theta])]
    theta_arrays = [t.data for t in thetas]
    w0_tensor = as_tensor(w0)

    with no_grad():
        w_star = np.array(solver(w0_tensor.data.copy(), _pack(theta_arrays, is_sequence)), dtype=np.float64)
        residual = residual_fn(_pack([Tensor(t) for t in theta_arrays], is_sequence), Tensor(w_star)).data

    if residual.shape != w_star.shape:
        raise ShapeMismatchError(f"Residual shape {residual.shape} differs from root shape {w_star.shape}.")
    residual_norm = float(np.max(np.abs(residual))) if residual.size else 0.0
    if not np.isfinite(residual_norm) or residual_norm > residual_tol:
        logger.error("root_solve: solver returned residual %.3e > %.1e", residual_norm, residual_tol)
        raise ConvergenceError(
            f"Root solver did not converge: residual {residual_norm:.3e} exceeds {residual_tol:.1e}.",
            residual=residual_norm,
            iterations=-1,
        )

    def backward(g: Tensor):
        cotangent = g.data
        if config.use_identity_inverse:
            x = cotangent
        else:
            x = _solve_transpose_jacobian(residual_fn, theta_arrays, is_sequence, w_star, cotangent, config)
        theta_grads = _pullback_theta(residual_fn, theta_arrays, is_sequence, w_star, -x)
        return tuple(Tensor(tg) for tg in theta_grads) + (Tensor(np.zeros_like(w0_tensor.data)),)

    return Tensor.from_op(w_star, tuple(thetas) + (w0_tensor,), backward, 'root_solve')
