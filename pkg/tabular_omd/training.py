from typing import Optional, Tuple
import logging

import numpy as np

from mdp_core.exceptions import DomainError, NumericalError
from mdp_core.models import QTable, TabularMDP, TabularModelParams
from mdp_core.operators import check_alpha, expected_return, softmax_probs

from .gradients import (
    mle_tabular_gradient,
    mle_tabular_loss,
    omd_gradient_for,
    project_norm_ball,
    solve_model_fixed_point,
)
from .models import TabularAgentKind, TabularTrainResult

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 1000
DEFAULT_LEARNING_RATE = 0.1
DEFAULT_ALPHA = 0.01
# Initial parameters are drawn at INIT_SCALE * alpha, so the first policy is close to uniform.
INIT_SCALE = 0.1


def _evaluate(mdp: TabularMDP, theta: TabularModelParams, alpha: float,
              q_init: Optional[QTable]) -> Tuple[QTable, float, float]:
    """Fixed point of the model, return of its softmax policy on the true MDP, and average KL."""
    q_star = solve_model_fixed_point(theta, mdp.gamma, alpha, q_init=q_init)
    j_value = expected_return(mdp, softmax_probs(q_star.values, alpha))
    avg_kl, _ = mle_tabular_loss(mdp, theta)
    return q_star, j_value, avg_kl


def return_ascent_step(gradient: np.ndarray, learning_rate: float, alpha: float) -> np.ndarray:
    """
    Normalised step of length ``learning_rate * alpha`` along ``gradient``.

    The return gradient scales as ``1 / alpha`` and vanishes where the softmax
    saturates. A step of fixed length in units of the temperature moves the
    policy logits ``Q / alpha`` by ``learning_rate`` whatever the gradient's size.
    A zero gradient gives a zero step.
    """
    norm = float(np.linalg.norm(gradient))
    if norm == 0.0:
        return np.zeros_like(gradient)
    return (learning_rate * alpha / norm) * gradient


def train_tabular(mdp: TabularMDP, kind, kappa: float, steps: int = DEFAULT_STEPS,
                  learning_rate: float = DEFAULT_LEARNING_RATE, alpha: float = DEFAULT_ALPHA,
                  seed: int = 0, inner_noise_sigma: float = 0.0, use_identity_inverse: bool = False,
                  log_every: int = 50) -> TabularTrainResult:
    """
    Fit a tabular model inside the ball ``||theta|| <= kappa`` by projected gradient steps.

    OMD agents ascend their objective (the return of the model's softmax policy, or
    the negated true Bellman error); the MLE agent descends ``avg_kl + reward_mse``.
    The return agent takes normalised steps (:func:`return_ascent_step`); the
    other two take plain steps of ``learning_rate`` times the gradient.
    Every iterate is projected back onto the ball and evaluated on the true MDP.

    Args:
        mdp (TabularMDP): The true environment.
        kind: A :class:`TabularAgentKind` or its value.
        kappa (float): Radius of the parameter ball.
        steps (int): Number of outer updates.
        learning_rate (float): Step size; for the return agent, the step length in units of ``alpha``.
        alpha (float): Softmax temperature of the soft Bellman operator.
        seed (int): Seeds the initial parameters and the inner noise.
        inner_noise_sigma (float): Standard deviation of Gaussian noise added to
            ``Q*`` before the outer gradient is taken.
        use_identity_inverse (bool): Replace the inverse Jacobian of the fixed point by the identity.
        log_every (int): Progress logging interval in steps.

    Returns:
        TabularTrainResult: Final parameters, final fixed point and per-step curves.

    Raises:
        DomainError: On invalid step counts, learning rates, radii or noise levels.
        NumericalError: If a gradient becomes non-finite; ``step`` names the update.
    """
    kind = TabularAgentKind.parse(kind)
    alpha = check_alpha(alpha)
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}.")
    if not learning_rate > 0.0:
        raise DomainError(f"learning_rate must be > 0, got {learning_rate}.")
    if inner_noise_sigma < 0.0:
        raise DomainError(f"inner_noise_sigma must be >= 0, got {inner_noise_sigma}.")

    rng = np.random.default_rng(seed)
    theta = project_norm_ball(
        TabularModelParams.initial(mdp.n_states, mdp.n_actions, rng, scale=INIT_SCALE * alpha), kappa
    )
    q_star, j_value, avg_kl = _evaluate(mdp, theta, alpha, None)
    result = TabularTrainResult(theta_final=theta, q_final=q_star)
    result.j_curve.append((0, j_value))
    result.kl_curve.append((0, avg_kl))
    result.norm_curve.append((0, theta.norm()))

    logger.info("Training %s agent: kappa=%s, steps=%s, lr=%s, alpha=%s, seed=%s, J0=%.6f",
                kind.value, kappa, steps, learning_rate, alpha, seed, j_value)

    omd_gradient = None if kind == TabularAgentKind.MLE else omd_gradient_for(kind)
    for step in range(1, steps + 1):
        if omd_gradient is None:
            gradient = mle_tabular_gradient(mdp, theta)
        else:
            gradient = omd_gradient(
                mdp, theta, alpha,
                q_init=q_star,
                use_identity_inverse=use_identity_inverse,
                noise_sigma=inner_noise_sigma,
                rng=rng,
            )

        if not gradient.is_finite():
            logger.error("Non-finite %s gradient at step %d (theta norm %.4e).", kind.value, step, theta.norm())
            raise NumericalError(f"Gradient became non-finite at step {step}.", step=step)

        if kind == TabularAgentKind.OMD_RETURN:
            update = return_ascent_step(gradient.flatten(), learning_rate, alpha)
        else:
            # Bellman error and the likelihood loss are minimised.
            update = -learning_rate * gradient.flatten()
        updated = theta.flatten() + update
        theta = project_norm_ball(TabularModelParams.from_flat(updated, mdp.n_states, mdp.n_actions), kappa)
        q_star, j_value, avg_kl = _evaluate(mdp, theta, alpha, q_star)

        result.j_curve.append((step, j_value))
        result.kl_curve.append((step, avg_kl))
        result.norm_curve.append((step, theta.norm()))
        if step % log_every == 0 or step == steps:
            logger.info("[%s] step %d/%d: J=%.6f, avg_kl=%.6f, norm=%.4f",
                        kind.value, step, steps, j_value, avg_kl, theta.norm())

    result.theta_final = theta
    result.q_final = q_star
    return result
