"""
Exact gradients of tabular model objectives through the soft Bellman fixed point.

The model-induced fixed point ``Q* = phi(theta)`` solves ``f(theta, Q) = Q - B^theta Q = 0``.
Its sensitivity follows from the implicit function theorem:

    d phi / d theta = (I - M)^-1 dB^theta / d theta,
    M[(s, a), (s', a')] = gamma * p_theta(s'|s, a) * pi(a'|s'),

with ``pi`` the softmax policy of ``Q*`` at temperature ``alpha``.
"""
from typing import Callable, Dict, Optional, Tuple
import logging

import numpy as np
from django.conf import settings

from mdp_core.exceptions import ConvergenceError, DomainError, NumericalError, PreconditionError
from mdp_core.models import QTable, TabularMDP, TabularModelParams
from mdp_core.operators import (
    check_alpha,
    check_gamma,
    discounted_state_occupancy,
    expected_return,
    policy_action_values,
    softmax_probs,
    solve_fixed_point,
    stable_logsumexp,
)

from .models import ObjectiveGradient, TabularAgentKind

logger = logging.getLogger(__name__)

NEUMANN_MAX_ITER = 100000


class FixedPointJacobian:
    """
    Linear-map view of ``d phi / d theta`` at a converged model fixed point.

    Products with the Jacobian never build it unless asked to through
    :meth:`dense`; the adjoint system is solved densely when the number of
    state-action pairs is at most ``dense_limit`` and by a matrix-free Neumann
    series otherwise.

    Attributes:
        theta (TabularModelParams): Model parameters the Jacobian is taken at.
        q_star (np.ndarray): The (S, A) fixed point.
        gamma (float): Discount.
        alpha (float): Temperature.
        use_identity_inverse (bool): Replace ``(I - M)^-1`` by the identity.
    """

    def __init__(self, theta: TabularModelParams, q_star: np.ndarray, gamma: float, alpha: float,
                 use_identity_inverse: bool = False, dense_limit: Optional[int] = None,
                 tol: float = 1e-12):
        self.theta = theta
        self.q_star = np.asarray(q_star, dtype=np.float64)
        self.gamma = gamma
        self.alpha = alpha
        self.use_identity_inverse = use_identity_inverse
        self.dense_limit = settings.OMD_DENSE_JACOBIAN_LIMIT if dense_limit is None else dense_limit
        self.tol = tol

        self.dynamics = theta.dynamics()
        self.policy = softmax_probs(self.q_star, alpha)
        self.values = stable_logsumexp(self.q_star, alpha, axis=-1)
        self.n_states, self.n_actions = self.q_star.shape

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def coupling_matrix(self) -> np.ndarray:
        """Dense ``M`` as an (SA, SA) matrix, rows and columns ordered ``s * A + a``."""
        coupling = self.gamma * np.einsum('sak,kb->sakb', self.dynamics, self.policy)
        return coupling.reshape(self.n_pairs, self.n_pairs)

    def _apply_coupling_transpose(self, u: np.ndarray) -> np.ndarray:
        inflow = np.einsum('sa,sak->k', u, self.dynamics)
        return self.gamma * self.policy * inflow[:, None]

    def _apply_coupling(self, x: np.ndarray) -> np.ndarray:
        return self.gamma * (self.dynamics @ np.sum(self.policy * x, axis=-1))

    def solve_adjoint(self, v: np.ndarray) -> np.ndarray:
        """Solve ``(I - M)^T u = v`` for an (S, A) right-hand side."""
        v = np.asarray(v, dtype=np.float64)
        if self.use_identity_inverse:
            return v.copy()
        if self.n_pairs <= self.dense_limit:
            system = np.eye(self.n_pairs) - self.coupling_matrix()
            try:
                return np.linalg.solve(system.T, v.ravel()).reshape(v.shape)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"Adjoint solve failed: {exc}") from exc
        return self._neumann(v, self._apply_coupling_transpose)

    def solve_forward(self, x: np.ndarray) -> np.ndarray:
        """Solve ``(I - M) y = x`` for an (S, A) right-hand side."""
        x = np.asarray(x, dtype=np.float64)
        if self.use_identity_inverse:
            return x.copy()
        if self.n_pairs <= self.dense_limit:
            system = np.eye(self.n_pairs) - self.coupling_matrix()
            try:
                return np.linalg.solve(system, x.ravel()).reshape(x.shape)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"Forward solve failed: {exc}") from exc
        return self._neumann(x, self._apply_coupling)

    def _neumann(self, rhs: np.ndarray, apply: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        # M has row sums gamma, so the series converges geometrically in the matching norm.
        u = rhs.copy()
        for iteration in range(1, NEUMANN_MAX_ITER + 1):
            u_next = rhs + apply(u)
            change = float(np.max(np.abs(u_next - u)))
            u = u_next
            if change <= self.tol * max(1.0, float(np.max(np.abs(u)))):
                logger.debug("Neumann series converged in %d iterations.", iteration)
                return u
        raise ConvergenceError("Neumann series for the fixed-point Jacobian did not converge.",
                               residual=change, iterations=NEUMANN_MAX_ITER)

    def _logit_sensitivity(self) -> np.ndarray:
        """``dB(s, a)/d logits(s, a, k) = gamma p(k|s, a) (V(k) - E_p V)`` as an (S, A, S) array."""
        expected = self.dynamics @ self.values
        return self.gamma * self.dynamics * (self.values[None, None, :] - expected[:, :, None])

    def vjp(self, v: np.ndarray) -> TabularModelParams:
        """Return ``v^T d phi / d theta`` as a parameter-shaped container."""
        u = self.solve_adjoint(v)
        logits = u[:, :, None] * self._logit_sensitivity()
        return TabularModelParams(logits, u)

    def jvp(self, direction: TabularModelParams) -> np.ndarray:
        """Return ``(d phi / d theta) direction`` as an (S, A) table."""
        operator_change = direction.model_rewards + np.sum(self._logit_sensitivity() * direction.logits, axis=-1)
        return self.solve_forward(operator_change)

    def operator_jacobian(self) -> np.ndarray:
        """Dense ``dB^theta / d theta`` with shape (SA, P), columns in flat-parameter order."""
        sensitivity = self._logit_sensitivity()
        n_logits = self.n_pairs * self.n_states
        jacobian = np.zeros((self.n_pairs, n_logits + self.n_pairs))
        for pair in range(self.n_pairs):
            s, a = divmod(pair, self.n_actions)
            start = pair * self.n_states
            jacobian[pair, start:start + self.n_states] = sensitivity[s, a]
            jacobian[pair, n_logits + pair] = 1.0
        return jacobian

    def dense(self) -> np.ndarray:
        """The full (SA, P) Jacobian; only for instances within ``dense_limit``."""
        if self.n_pairs > self.dense_limit:
            raise DomainError(
                f"Refusing to materialise a Jacobian for {self.n_pairs} state-action pairs "
                f"(limit {self.dense_limit})."
            )
        system = np.eye(self.n_pairs) - (0.0 if self.use_identity_inverse else self.coupling_matrix())
        return np.linalg.solve(system, self.operator_jacobian())


def model_bellman_residual(theta: TabularModelParams, q: np.ndarray, gamma: float, alpha: float) -> np.ndarray:
    """``Q - B^theta Q`` as an (S, A) array."""
    bootstrap = theta.dynamics() @ stable_logsumexp(q, alpha, axis=-1)
    return q - (theta.model_rewards + gamma * bootstrap)


def ift_fixed_point_jacobian(theta: TabularModelParams, q_star, alpha: float, gamma: float,
                             use_identity_inverse: bool = False, check_residual: bool = True,
                             residual_tol: Optional[float] = None) -> FixedPointJacobian:
    """
    Build the implicit Jacobian of the model fixed point.

    Args:
        theta (TabularModelParams): Model parameters.
        q_star: The fixed point of ``B^theta`` (QTable or array).
        alpha (float): Temperature.
        gamma (float): Discount.
        use_identity_inverse (bool): Skip the ``(I - M)^-1`` factor.
        check_residual (bool): Enforce ``||q_star - B^theta q_star||_inf <= residual_tol``.
        residual_tol (Optional[float]): Defaults to ``settings.OMD_IFT_RESIDUAL_TOL``.

    Returns:
        FixedPointJacobian: Products with ``d phi / d theta``.

    Raises:
        PreconditionError: If ``q_star`` is not a converged fixed point.
    """
    values = q_star.values if isinstance(q_star, QTable) else np.asarray(q_star, dtype=np.float64)
    alpha = check_alpha(alpha)
    gamma = check_gamma(gamma)
    if check_residual:
        tolerance = settings.OMD_IFT_RESIDUAL_TOL if residual_tol is None else residual_tol
        residual = float(np.max(np.abs(model_bellman_residual(theta, values, gamma, alpha))))
        if residual > tolerance:
            logger.error("IFT requested at a non-converged point: residual %.3e", residual)
            raise PreconditionError(
                f"q_star is not a fixed point of the model operator (residual {residual:.3e} > {tolerance:.1e})."
            )
    return FixedPointJacobian(theta, values, gamma, alpha, use_identity_inverse=use_identity_inverse)


def solve_model_fixed_point(theta: TabularModelParams, gamma: float, alpha: float,
                            q_init=None, tol: Optional[float] = None) -> QTable:
    """``phi(theta)``: the fixed point of the model-induced soft Bellman operator."""
    return solve_fixed_point(theta.dynamics(), theta.model_rewards, gamma, alpha, tol=tol, q_init=q_init)


def return_gradient_wrt_q(mdp: TabularMDP, q: np.ndarray, alpha: float) -> Tuple[float, np.ndarray]:
    """
    ``J(pi_Q)`` on the true MDP and its gradient with respect to ``Q``.

    ``dJ/dpi(a|s) = d(s) Q^pi(s, a)`` with ``d = (I - gamma P_pi)^-T rho0``,
    chained through the softmax Jacobian.
    """
    policy = softmax_probs(q, alpha)
    occupancy = discounted_state_occupancy(mdp, policy)
    policy_gradient = occupancy[:, None] * policy_action_values(mdp, policy)
    centred = policy_gradient - np.sum(policy * policy_gradient, axis=-1, keepdims=True)
    return expected_return(mdp, policy), policy * centred / alpha


def true_bellman_error(mdp: TabularMDP, q: np.ndarray, alpha: float) -> np.ndarray:
    """``Q - BQ`` under the true soft Bellman operator."""
    return q - (mdp.rewards + mdp.gamma * (mdp.transitions @ stable_logsumexp(q, alpha, axis=-1)))


def bellman_gradient_wrt_q(mdp: TabularMDP, q: np.ndarray, alpha: float) -> Tuple[float, np.ndarray]:
    """``L(Q) = sum (Q - BQ)^2`` for the true operator and ``dL/dQ = 2 (e - M^T e)``."""
    error = true_bellman_error(mdp, q, alpha)
    policy = softmax_probs(q, alpha)
    inflow = np.einsum('sa,sak->k', error, mdp.transitions)
    return float(np.sum(error ** 2)), 2.0 * (error - mdp.gamma * policy * inflow[:, None])


def _objective_through_fixed_point(objective: Callable[[TabularMDP, np.ndarray, float], Tuple[float, np.ndarray]],
                                   mdp: TabularMDP, theta: TabularModelParams, alpha: float,
                                   q_init=None, use_identity_inverse: bool = False,
                                   noise_sigma: float = 0.0, rng: Optional[np.random.Generator] = None,
                                   tol: Optional[float] = None) -> ObjectiveGradient:
    q_star = solve_model_fixed_point(theta, mdp.gamma, alpha, q_init=q_init, tol=tol)
    q_used = q_star.values
    if noise_sigma > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        q_used = q_used + rng.normal(0.0, noise_sigma, size=q_used.shape)

    value, gradient_q = objective(mdp, q_used, alpha)
    jacobian = ift_fixed_point_jacobian(
        theta, q_used, alpha, mdp.gamma,
        use_identity_inverse=use_identity_inverse,
        check_residual=noise_sigma == 0.0,
    )
    return ObjectiveGradient(value, jacobian.vjp(gradient_q), q_star)


def omd_return_gradient(mdp: TabularMDP, theta: TabularModelParams, alpha: float, **options) -> TabularModelParams:
    """
    Exact gradient of ``theta -> J(pi_{phi(theta)})`` on the true MDP.

    Keyword options (``q_init``, ``use_identity_inverse``, ``noise_sigma``, ``rng``, ``tol``)
    are forwarded to the fixed-point solve and the implicit Jacobian.
    """
    return _objective_through_fixed_point(return_gradient_wrt_q, mdp, theta, alpha, **options).gradient


def omd_bellman_gradient(mdp: TabularMDP, theta: TabularModelParams, alpha: float, **options) -> TabularModelParams:
    """Exact gradient of ``theta -> sum (Q - BQ)^2`` at ``Q = phi(theta)``, ``B`` the true operator."""
    return _objective_through_fixed_point(bellman_gradient_wrt_q, mdp, theta, alpha, **options).gradient


def omd_objective_and_gradient(kind: TabularAgentKind, mdp: TabularMDP, theta: TabularModelParams,
                               alpha: float, **options) -> ObjectiveGradient:
    """Objective value, gradient and fixed point for one of the two OMD objectives."""
    if kind == TabularAgentKind.OMD_RETURN:
        return _objective_through_fixed_point(return_gradient_wrt_q, mdp, theta, alpha, **options)
    if kind == TabularAgentKind.OMD_BELLMAN:
        return _objective_through_fixed_point(bellman_gradient_wrt_q, mdp, theta, alpha, **options)
    raise DomainError(f"{kind} is not an OMD objective.")


def omd_gradient_for(kind) -> Callable[..., TabularModelParams]:
    """Gradient function of an OMD agent kind."""
    registry: Dict[TabularAgentKind, Callable[..., TabularModelParams]] = {
        TabularAgentKind.OMD_RETURN: omd_return_gradient,
        TabularAgentKind.OMD_BELLMAN: omd_bellman_gradient,
    }
    kind = TabularAgentKind.parse(kind)
    if kind not in registry:
        raise DomainError(f"{kind} has no implicit gradient; use mle_tabular_gradient.")
    return registry[kind]


def project_norm_ball(theta: TabularModelParams, kappa: float) -> TabularModelParams:
    """
    Rescale ``theta`` onto the ball ``||theta|| <= kappa`` when it lies outside.

    The scale is nudged down one ulp at a time until the rescaled norm is within
    ``kappa``, so projecting a projected point returns it unchanged.

    Raises:
        DomainError: If ``kappa <= 0``.
    """
    if not kappa > 0.0:
        raise DomainError(f"kappa must be > 0, got {kappa!r}.")
    norm = theta.norm()
    if norm <= kappa:
        return theta

    flat = theta.flatten()
    scale = kappa / norm
    projected = flat * scale
    while np.linalg.norm(projected) > kappa:
        scale = np.nextafter(scale, 0.0)
        projected = flat * scale
    return TabularModelParams.from_flat(projected, theta.n_states, theta.n_actions)


def _log_model_dynamics(theta: TabularModelParams) -> np.ndarray:
    logits = theta.logits
    peak = logits.max(axis=-1, keepdims=True)
    with np.errstate(invalid='ignore'):
        return logits - (peak + np.log(np.exp(logits - peak).sum(axis=-1, keepdims=True)))


def mle_tabular_loss(mdp: TabularMDP, theta: TabularModelParams) -> Tuple[float, float]:
    """
    Average KL divergence of the dynamics and mean squared reward error.

    ``avg_kl = (1 / SA) sum_{s,a,s'} p log(p / p_theta)`` with ``0 log 0 = 0``; it is
    ``+inf`` when the model puts zero mass on a transition the true MDP can take.

    Returns:
        Tuple[float, float]: ``(avg_kl, reward_mse)``.
    """
    p = mdp.transitions
    log_model = _log_model_dynamics(theta)
    support = p > 0.0
    with np.errstate(divide='ignore', invalid='ignore'):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - log_model), 0.0)
    if np.isnan(terms).any() or np.isinf(terms).any():
        return float('inf'), float(np.mean((theta.model_rewards - mdp.rewards) ** 2))
    avg_kl = float(max(terms.sum() / (mdp.n_states * mdp.n_actions), 0.0))
    reward_mse = float(np.mean((theta.model_rewards - mdp.rewards) ** 2))
    return avg_kl, reward_mse


def mle_tabular_gradient(mdp: TabularMDP, theta: TabularModelParams) -> TabularModelParams:
    """Gradient of ``avg_kl + reward_mse``: ``(p_theta - p) / SA`` and ``2 (r_theta - r) / SA``."""
    pairs = mdp.n_states * mdp.n_actions
    return TabularModelParams(
        (theta.dynamics() - mdp.transitions) / pairs,
        2.0 * (theta.model_rewards - mdp.rewards) / pairs,
    )
