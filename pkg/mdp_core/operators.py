"""
Soft and hard Bellman operators, fixed-point solvers, policies and closed-form returns.

Every function here is pure: inputs are never mutated and results are fresh
arrays or immutable domain objects.
"""
from typing import Optional, Tuple, Union
import logging

import numpy as np
from django.conf import settings

from .exceptions import ConvergenceError, DomainError, NumericalError, ShapeMismatchError
from .models import QTable, SoftmaxPolicy, TabularMDP, check_stochastic_rows

logger = logging.getLogger(__name__)

QLike = Union[QTable, np.ndarray]
PolicyLike = Union[SoftmaxPolicy, np.ndarray]


def _q_values(q: QLike) -> np.ndarray:
    if isinstance(q, QTable):
        return q.values
    return np.asarray(q, dtype=np.float64)


def _policy_probs(policy: PolicyLike) -> np.ndarray:
    if isinstance(policy, SoftmaxPolicy):
        return policy.probs
    return np.asarray(policy, dtype=np.float64)


def check_alpha(alpha: float) -> float:
    """Return ``alpha`` as a float, rejecting non-positive or NaN temperatures."""
    alpha = float(alpha)
    if not alpha > 0.0:
        logger.error("Rejected temperature alpha=%s", alpha)
        raise DomainError(f"alpha must be > 0, got {alpha!r}. Use a small alpha such as 1e-6 for hard-max.")
    return alpha


def check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 <= gamma < 1.0:
        logger.error("Rejected discount gamma=%s", gamma)
        raise DomainError(f"gamma must lie in [0, 1), got {gamma!r}.")
    return gamma


def check_operator_shapes(dynamics: np.ndarray, rewards: np.ndarray, q: Optional[np.ndarray] = None) -> None:
    """Raise :class:`ShapeMismatchError` unless the (S, A, S), (S, A) and (S, A) shapes agree."""
    if dynamics.ndim != 3 or dynamics.shape[0] != dynamics.shape[2]:
        raise ShapeMismatchError(f"dynamics must have shape (S, A, S), got {dynamics.shape}.")
    if rewards.shape != dynamics.shape[:2]:
        raise ShapeMismatchError(f"rewards shape {rewards.shape} does not match dynamics {dynamics.shape}.")
    if q is not None and q.shape != dynamics.shape[:2]:
        raise ShapeMismatchError(f"Q shape {q.shape} does not match dynamics {dynamics.shape}.")


def stable_logsumexp(x: np.ndarray, alpha: float = 1.0, axis: int = -1) -> Union[float, np.ndarray]:
    """
    Compute ``alpha * log(sum(exp(x / alpha)))`` with max-shift stabilisation.

    Args:
        x (np.ndarray): Values; reduced along ``axis``.
        alpha (float): Temperature, strictly positive.
        axis (int): Axis to reduce. A 1-D input yields a Python float.

    Returns:
        Union[float, np.ndarray]: The soft maximum of ``x``.

    Raises:
        DomainError: If ``x`` is empty along ``axis``, contains NaN, or ``alpha <= 0``.
    """
    alpha = check_alpha(alpha)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DomainError("stable_logsumexp needs a nonempty vector.")
    if np.isnan(x).any():
        raise DomainError("stable_logsumexp received NaN input.")

    peak = x.max(axis=axis, keepdims=True)
    total = np.exp((x - peak) / alpha).sum(axis=axis, keepdims=True)
    result = np.squeeze(peak + alpha * np.log(total), axis=axis)
    if result.ndim == 0:
        return float(result)
    return result


def soft_value(q: QLike, alpha: float) -> np.ndarray:
    """State values ``V(s) = alpha * logsumexp(Q(s, .) / alpha)``."""
    return stable_logsumexp(_q_values(q), alpha, axis=-1)


def _soft_backup(dynamics: np.ndarray, rewards: np.ndarray, q: np.ndarray,
                 gamma: float, alpha: float) -> np.ndarray:
    return rewards + gamma * (dynamics @ stable_logsumexp(q, alpha, axis=-1))


def _hard_backup(dynamics: np.ndarray, rewards: np.ndarray, q: np.ndarray, gamma: float) -> np.ndarray:
    return rewards + gamma * (dynamics @ q.max(axis=-1))


def soft_bellman_apply(dynamics: np.ndarray, rewards: np.ndarray, q: QLike,
                       gamma: float, alpha: float) -> QTable:
    """
    Apply the soft Bellman optimality operator once.

    ``BQ(s, a) = r(s, a) + gamma * sum_s' p(s'|s, a) * alpha * logsumexp(Q(s', .) / alpha)``.
    The same function serves the true operator and the model-induced one.

    Args:
        dynamics (np.ndarray): Row-stochastic (S, A, S) transition tensor.
        rewards (np.ndarray): (S, A) reward table.
        q (QLike): The Q-table the operator is applied to.
        gamma (float): Discount in [0, 1).
        alpha (float): Temperature, strictly positive.

    Returns:
        QTable: The table ``BQ``.

    Raises:
        ShapeMismatchError: If the shapes disagree.
        ValidationError: If ``dynamics`` has a row that is not a distribution.
    """
    dynamics = np.asarray(dynamics, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    values = _q_values(q)
    check_operator_shapes(dynamics, rewards, values)
    check_stochastic_rows(dynamics, 'dynamics')
    return QTable(_soft_backup(dynamics, rewards, values, check_gamma(gamma), check_alpha(alpha)))


def hard_bellman_apply(dynamics: np.ndarray, rewards: np.ndarray, q: QLike, gamma: float) -> QTable:
    """The alpha -> 0 operator ``r + gamma * p . max_a Q``."""
    dynamics = np.asarray(dynamics, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    values = _q_values(q)
    check_operator_shapes(dynamics, rewards, values)
    check_stochastic_rows(dynamics, 'dynamics')
    return QTable(_hard_backup(dynamics, rewards, values, check_gamma(gamma)))


def _iterate_to_fixed_point(backup, q: np.ndarray, gamma: float, tol: float, max_iter: int, label: str) -> np.ndarray:
    """
    Run ``q <- backup(q)`` until the fixed-point residual is provably within ``tol``.

    For a gamma-contraction ``||Q_next - B Q_next|| <= gamma * ||Q_next - Q||``, so the
    loop stops as soon as that bound drops to ``tol`` and returns ``Q_next``.
    """
    if not tol > 0.0:
        raise DomainError(f"tol must be > 0, got {tol!r}.")
    if max_iter < 1:
        raise DomainError(f"max_iter must be >= 1, got {max_iter!r}.")

    residual = np.inf
    for iteration in range(1, max_iter + 1):
        q_next = backup(q)
        step = float(np.max(np.abs(q_next - q)))
        residual = gamma * step
        q = q_next
        if not np.isfinite(step):
            break
        if residual <= tol:
            logger.debug("%s converged in %d iterations (residual bound %.3e).", label, iteration, residual)
            return q

    logger.error("%s did not converge in %d iterations, last residual %.3e.", label, max_iter, residual)
    raise ConvergenceError(
        f"{label} did not reach tol={tol} within {max_iter} iterations (residual {residual:.3e}).",
        residual=residual,
        iterations=max_iter,
    )


def solve_fixed_point(dynamics: np.ndarray, rewards: np.ndarray, gamma: float, alpha: float,
                      tol: Optional[float] = None, max_iter: Optional[int] = None,
                      q_init: Optional[QLike] = None) -> QTable:
    """
    Find the fixed point of the soft Bellman operator by repeated application.

    Args:
        dynamics (np.ndarray): Row-stochastic (S, A, S) transition tensor.
        rewards (np.ndarray): (S, A) reward table.
        gamma (float): Discount in [0, 1).
        alpha (float): Temperature, strictly positive.
        tol (Optional[float]): Sup-norm residual target. Defaults to ``settings.OMD_FIXED_POINT_TOL``.
        max_iter (Optional[int]): Iteration cap. Defaults to ``settings.OMD_FIXED_POINT_MAX_ITER``.
        q_init (Optional[QLike]): Warm start; zeros when omitted.

    Returns:
        QTable: ``Q`` with ``||Q - BQ||_inf <= tol``.

    Raises:
        ConvergenceError: If ``max_iter`` is exhausted first.
    """
    dynamics = np.asarray(dynamics, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    q = np.zeros_like(rewards) if q_init is None else np.array(_q_values(q_init), dtype=np.float64)
    check_operator_shapes(dynamics, rewards, q)
    gamma = check_gamma(gamma)
    alpha = check_alpha(alpha)
    tol = settings.OMD_FIXED_POINT_TOL if tol is None else float(tol)
    max_iter = settings.OMD_FIXED_POINT_MAX_ITER if max_iter is None else int(max_iter)

    q_star = _iterate_to_fixed_point(
        lambda values: _soft_backup(dynamics, rewards, values, gamma, alpha),
        q, gamma, tol, max_iter, 'Soft fixed point',
    )
    return QTable(q_star)


def solve_hard_fixed_point(dynamics: np.ndarray, rewards: np.ndarray, gamma: float,
                           tol: float = 1e-12, max_iter: Optional[int] = None,
                           q_init: Optional[QLike] = None) -> QTable:
    """Value iteration with the hard-max operator; the oracle for optimal returns and bounds."""
    dynamics = np.asarray(dynamics, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    q = np.zeros_like(rewards) if q_init is None else np.array(_q_values(q_init), dtype=np.float64)
    check_operator_shapes(dynamics, rewards, q)
    gamma = check_gamma(gamma)
    max_iter = settings.OMD_FIXED_POINT_MAX_ITER if max_iter is None else int(max_iter)

    q_star = _iterate_to_fixed_point(
        lambda values: _hard_backup(dynamics, rewards, values, gamma),
        q, gamma, float(tol), max_iter, 'Hard fixed point',
    )
    return QTable(q_star)


def softmax_probs(q: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise ``softmax(Q / alpha)`` as a bare array."""
    shifted = (q - q.max(axis=-1, keepdims=True)) / alpha
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def softmax_policy(q: QLike, alpha: float) -> SoftmaxPolicy:
    """
    Build ``pi(a|s) proportional to exp(Q(s, a) / alpha)``.

    Raises:
        DomainError: If ``alpha <= 0`` or ``Q`` contains NaN.
    """
    alpha = check_alpha(alpha)
    values = _q_values(q)
    if np.isnan(values).any():
        raise DomainError("softmax_policy received a Q-table containing NaN.")
    return SoftmaxPolicy(softmax_probs(values, alpha), alpha)


def greedy_policy(q: QLike) -> SoftmaxPolicy:
    """Deterministic arg-max policy; ties go to the lowest action index."""
    values = _q_values(q)
    probs = np.zeros_like(values)
    probs[np.arange(values.shape[0]), np.argmax(values, axis=-1)] = 1.0
    return SoftmaxPolicy(probs)


def policy_matrices(dynamics: np.ndarray, rewards: np.ndarray, probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return the policy-averaged transition matrix ``P_pi`` (S, S) and reward vector ``r_pi`` (S,)."""
    p_pi = np.einsum('sa,sat->st', probs, dynamics)
    r_pi = np.einsum('sa,sa->s', probs, rewards)
    return p_pi, r_pi


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        solution = np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError as exc:
        logger.error("Policy evaluation solve failed: %s", exc)
        raise NumericalError(f"Linear solve failed during policy evaluation: {exc}") from exc
    if not np.all(np.isfinite(solution)):
        raise NumericalError("Policy evaluation produced non-finite values.")
    return solution


def policy_state_values(mdp: TabularMDP, policy: PolicyLike) -> np.ndarray:
    """Exact ``V_pi = (I - gamma P_pi)^-1 r_pi``."""
    p_pi, r_pi = policy_matrices(mdp.transitions, mdp.rewards, _policy_probs(policy))
    return _solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def policy_action_values(mdp: TabularMDP, policy: PolicyLike) -> np.ndarray:
    """Exact ``Q_pi(s, a) = r(s, a) + gamma * p(.|s, a) . V_pi``."""
    return mdp.rewards + mdp.gamma * (mdp.transitions @ policy_state_values(mdp, policy))


def discounted_state_occupancy(mdp: TabularMDP, policy: PolicyLike) -> np.ndarray:
    """Unnormalised discounted visitation ``d = (I - gamma P_pi)^-T rho0``."""
    p_pi, _ = policy_matrices(mdp.transitions, mdp.rewards, _policy_probs(policy))
    return _solve((np.eye(mdp.n_states) - mdp.gamma * p_pi).T, mdp.rho0)


def expected_return(mdp: TabularMDP, policy: PolicyLike) -> float:
    """
    Closed-form expected discounted return ``J = rho0^T (I - gamma P_pi)^-1 r_pi``.

    Args:
        mdp (TabularMDP): The true MDP.
        policy (PolicyLike): A :class:`SoftmaxPolicy` or an (S, A) row-stochastic array.

    Returns:
        float: The expected return from ``rho0``.

    Raises:
        ShapeMismatchError: If the policy table does not have shape (S, A).
        NumericalError: If the linear solve fails.
    """
    probs = _policy_probs(policy)
    if probs.shape != mdp.shape:
        raise ShapeMismatchError(f"Policy shape {probs.shape} does not match MDP {mdp.shape}.")
    return float(mdp.rho0 @ policy_state_values(mdp, probs))


def optimal_return(mdp: TabularMDP) -> float:
    """Return of the greedy policy of the hard-max optimal Q, i.e. the optimal ``J``."""
    q_star = solve_hard_fixed_point(mdp.transitions, mdp.rewards, mdp.gamma)
    return expected_return(mdp, greedy_policy(q_star))
