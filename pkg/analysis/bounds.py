"""
Q*-approximation errors and the bounds that guarantee them.

The bounds are stated for the hard-max Bellman operator and rewards in
``[0, r_max]``. :func:`bound_report` therefore evaluates every fixed point by
hard value iteration after shifting all rewards to be non-negative.
"""
from typing import Optional, Tuple
import logging

import numpy as np

from mdp_core.exceptions import DomainError, ShapeMismatchError
from mdp_core.models import QTable, TabularMDP, TabularModelParams
from mdp_core.operators import (
    check_gamma,
    hard_bellman_apply,
    soft_bellman_apply,
    solve_fixed_point,
    solve_hard_fixed_point,
)

from .models import BoundReport, EquivalenceReport

logger = logging.getLogger(__name__)

HARD_TOL = 1e-12
DETERMINISTIC_TOL = 1e-3


def _values(q) -> np.ndarray:
    return q.values if isinstance(q, QTable) else np.asarray(q, dtype=np.float64)


def _check_model_shape(mdp: TabularMDP, theta: TabularModelParams) -> None:
    if theta.logits.shape != mdp.transitions.shape:
        raise ShapeMismatchError(
            f"Model shape {theta.logits.shape} does not match MDP transitions {mdp.transitions.shape}."
        )


def _apply_operator(dynamics: np.ndarray, rewards: np.ndarray, q: np.ndarray, gamma: float,
                    alpha: Optional[float]) -> np.ndarray:
    if alpha is None:
        return hard_bellman_apply(dynamics, rewards, q, gamma).values
    return soft_bellman_apply(dynamics, rewards, q, gamma, alpha).values


def model_errors(mdp: TabularMDP, theta: TabularModelParams) -> Tuple[float, float]:
    """
    Worst-case dynamics and reward errors of a model.

    Returns:
        Tuple[float, float]: ``eps_p = max_{s,a} ||p - p_theta||_1`` and ``eps_r = max_{s,a} |r - r_theta|``.
    """
    _check_model_shape(mdp, theta)
    eps_p = float(np.max(np.abs(mdp.transitions - theta.dynamics()).sum(axis=-1)))
    eps_r = float(np.max(np.abs(mdp.rewards - theta.model_rewards)))
    return min(eps_p, 2.0), eps_r


def bellman_operator_error(mdp: TabularMDP, theta: TabularModelParams, q_hat, alpha: Optional[float]) -> float:
    """
    ``max_{s,a} |B Q_hat - B^theta Q_hat|`` for the true and the model operator.

    ``alpha=None`` selects the hard-max operators.
    """
    _check_model_shape(mdp, theta)
    q = _values(q_hat)
    true_image = _apply_operator(mdp.transitions, mdp.rewards, q, mdp.gamma, alpha)
    model_image = _apply_operator(theta.dynamics(), theta.model_rewards, q, mdp.gamma, alpha)
    return float(np.max(np.abs(true_image - model_image)))


def _check_errors(gamma: float, **errors: float) -> float:
    gamma = check_gamma(gamma)
    for name, value in errors.items():
        if not value >= 0.0:
            raise DomainError(f"{name} must be >= 0, got {value!r}.")
    return gamma


def theorem_bounds(eps_p: float, eps_r: float, eps_omd: float, gamma: float, r_max: float) -> Tuple[float, float]:
    """
    Bounds on ``||Q* - Q_hat||_inf`` for an MLE-style and an OMD-style model.

    ``bound_mle = eps_r / (1 - gamma) + gamma eps_p r_max / (2 (1 - gamma)^2)`` and
    ``bound_omd = eps_omd / (1 - gamma)``.

    Raises:
        DomainError: If ``gamma`` is outside ``[0, 1)`` or an error term is negative.
    """
    gamma = _check_errors(gamma, eps_p=eps_p, eps_r=eps_r, eps_omd=eps_omd, r_max=r_max)
    horizon = 1.0 - gamma
    bound_mle = eps_r / horizon + gamma * eps_p * r_max / (2.0 * horizon ** 2)
    bound_omd = eps_omd / horizon
    return bound_mle, bound_omd


def lemma_bound(eps_p: float, eps_r: float, gamma: float, r_max: float) -> float:
    """Bound on ``||BQ - B_hat Q||_inf`` for ``Q`` in ``[0, r_max / (1 - gamma)]``."""
    gamma = _check_errors(gamma, eps_p=eps_p, eps_r=eps_r, r_max=r_max)
    return eps_r + gamma * eps_p * r_max / (2.0 * (1.0 - gamma))


def q_star_error(q_star, q_hat) -> float:
    """Sup-norm distance between two Q-tables."""
    a, b = _values(q_star), _values(q_hat)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Q-table shapes differ: {a.shape} vs {b.shape}.")
    return float(np.max(np.abs(a - b)))


def check_value_equivalence(theta_a: TabularModelParams, theta_b: TabularModelParams, q_star, alpha: float,
                            tol: float, *, gamma: float) -> bool:
    """
    Whether two models map ``q_star`` to the same Bellman image within ``tol``.

    Args:
        theta_a (TabularModelParams): First model.
        theta_b (TabularModelParams): Second model.
        q_star: Optimal Q of the true MDP at temperature ``alpha``.
        alpha (float): Temperature of the soft operator.
        tol (float): Sup-norm tolerance on the operator images.
        gamma (float): Discount shared by both models.
    """
    q = _values(q_star)
    image_a = soft_bellman_apply(theta_a.dynamics(), theta_a.model_rewards, q, gamma, alpha).values
    image_b = soft_bellman_apply(theta_b.dynamics(), theta_b.model_rewards, q, gamma, alpha).values
    gap = float(np.max(np.abs(image_a - image_b)))
    logger.debug("Value-equivalence gap %.3e (tol %.1e)", gap, tol)
    return gap <= tol


def _is_deterministic(dynamics: np.ndarray, tol: float = DETERMINISTIC_TOL) -> bool:
    return bool(np.all(dynamics.max(axis=-1) >= 1.0 - tol))


def equivalence_report(mdp: TabularMDP, theta: TabularModelParams, alpha: float, tol: float) -> EquivalenceReport:
    """
    Compare a learned model with the true MDP through their action on the true ``Q*``.

    A model can be ``Q*``-equivalent while its dynamics differ from the true ones,
    for instance a stochastic model of a deterministic MDP paired with adjusted rewards.
    """
    _check_model_shape(mdp, theta)
    q_star = solve_fixed_point(mdp.transitions, mdp.rewards, mdp.gamma, alpha)
    truth = TabularModelParams.from_mdp(mdp)
    equivalent = check_value_equivalence(theta, truth, q_star, alpha, tol, gamma=mdp.gamma)
    gap = bellman_operator_error(mdp, theta, q_star, alpha)
    eps_p, _ = model_errors(mdp, theta)
    return EquivalenceReport(
        equivalent=equivalent,
        max_operator_gap=gap,
        model_deterministic=_is_deterministic(theta.dynamics()),
        mdp_deterministic=_is_deterministic(mdp.transitions),
        max_dynamics_gap=eps_p,
        tol=tol,
    )


def reward_shift_for(*reward_tables: np.ndarray) -> float:
    """Smallest non-negative constant making every reward table non-negative."""
    return float(max(0.0, -min(float(np.min(table)) for table in reward_tables)))


def bound_report(mdp: TabularMDP, theta_mle: TabularModelParams, theta_omd: TabularModelParams) -> BoundReport:
    """
    Evaluate both models against the true MDP and their guaranteed bounds.

    Rewards of the MDP and of both models are shifted by one common constant so
    that the true rewards are non-negative; ``r_max`` is the largest shifted true
    reward. The model reward tables do not enter either quantity: the MLE bound
    only needs ``Q*`` inside ``[0, r_max / (1 - gamma)]``. The shift leaves every
    error term unchanged.

    Returns:
        BoundReport: Errors, bounds and the applied shift.
    """
    _check_model_shape(mdp, theta_mle)
    _check_model_shape(mdp, theta_omd)
    shift = reward_shift_for(mdp.rewards)
    shifted = mdp.with_rewards(mdp.rewards + shift)
    mle = TabularModelParams(theta_mle.logits, theta_mle.model_rewards + shift)
    omd = TabularModelParams(theta_omd.logits, theta_omd.model_rewards + shift)
    r_max = float(np.max(shifted.rewards))

    gamma = shifted.gamma
    q_star = solve_hard_fixed_point(shifted.transitions, shifted.rewards, gamma, tol=HARD_TOL)
    q_mle = solve_hard_fixed_point(mle.dynamics(), mle.model_rewards, gamma, tol=HARD_TOL)
    q_omd = solve_hard_fixed_point(omd.dynamics(), omd.model_rewards, gamma, tol=HARD_TOL)

    eps_p, eps_r = model_errors(shifted, mle)
    eps_omd = bellman_operator_error(shifted, omd, q_omd, alpha=None)
    bound_mle, bound_omd = theorem_bounds(eps_p, eps_r, eps_omd, gamma, r_max)

    report = BoundReport(
        eps_p=eps_p,
        eps_r=eps_r,
        eps_omd=eps_omd,
        q_err_mle=q_star_error(q_star, q_mle),
        q_err_omd=q_star_error(q_star, q_omd),
        bound_mle=bound_mle,
        bound_omd=bound_omd,
        r_max=r_max,
        reward_shift=shift,
    )
    if not (report.mle_bound_holds and report.omd_bound_holds):
        logger.warning("Bound check failed: %s", report)
    return report
