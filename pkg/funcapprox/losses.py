"""
Bellman and model-fitting losses for the function-approximation agents.

Every loss returns a scalar Tensor so callers can differentiate it; pass
``model_params`` / ``q_params`` as Tensor leaves to differentiate with respect
to them, or leave them as ``None`` to read the networks' current arrays.
"""
from typing import List, Optional, Sequence
import logging

import numpy as np

from autodiff import tensor as T
from autodiff.tensor import Tensor, no_grad
from mdp_core.exceptions import DomainError

from .models import Batch
from .networks import ModelNetworks, QNetworkPair, mlp_forward, q_forward_all

logger = logging.getLogger(__name__)


def _regression_to_targets(q_pair: QNetworkPair, states, actions, targets: Tensor,
                           q_params: Optional[Sequence]) -> Tensor:
    """Mean over online nets of the batch mean of ``(Q_w(s, a) - y)^2``."""
    nets = q_pair.online if q_params is None else q_pair.split_online(list(q_params))
    total = Tensor(0.0)
    for net in nets:
        predicted = T.gather(q_forward_all(net, states), actions)
        total = total + T.mean((predicted - targets).square())
    return total / len(nets)


def soft_target_values(q_pair: QNetworkPair, next_states, alpha: float) -> Tensor:
    """``alpha * logsumexp(min_i Qbar_i(s', .) / alpha)`` per row."""
    return T.logsumexp(q_pair.target_values(next_states), axis=-1, alpha=alpha)


def inner_loss(model: ModelNetworks, q_pair: QNetworkPair, states: np.ndarray, actions: np.ndarray,
               alpha: float, gamma: float, model_params: Optional[Sequence] = None,
               q_params: Optional[Sequence] = None) -> Tensor:
    """
    Bellman error of the online Q-networks under the model.

    Targets are ``r_theta(s, a) + gamma * alpha * logsumexp(Qbar(f_theta(s, a)) / alpha)``
    with ``Qbar`` the element-wise minimum of the target networks. The model
    predicts no termination, so every target bootstraps.

    Args:
        model (ModelNetworks): Dynamics and reward networks.
        q_pair (QNetworkPair): Online and target Q-networks.
        states (np.ndarray): (B, state_dim) states drawn from the replay buffer.
        actions (np.ndarray): (B,) action indices.
        alpha (float): Soft-max temperature.
        gamma (float): Discount.
        model_params (Optional[Sequence]): Overrides the model arrays.
        q_params (Optional[Sequence]): Overrides the flat online Q arrays.

    Returns:
        Tensor: Non-negative scalar.
    """
    next_states, rewards = model.forward(states, actions, model_params)
    targets = rewards + gamma * soft_target_values(q_pair, next_states, alpha)
    return _regression_to_targets(q_pair, states, actions, targets, q_params)


def outer_loss(q_pair: QNetworkPair, batch: Batch, alpha: float, gamma: float,
               q_params: Optional[Sequence] = None) -> Tensor:
    """Bellman error of the online Q-networks on real transitions; terminal targets are ``r``."""
    continuing = 1.0 - np.asarray(batch.dones, dtype=np.float64)
    bootstrap = soft_target_values(q_pair, batch.next_states, alpha) * Tensor(continuing)
    targets = Tensor(np.asarray(batch.rewards, dtype=np.float64)) + gamma * bootstrap
    return _regression_to_targets(q_pair, batch.states, batch.actions, targets, q_params)


def mle_model_loss(model: ModelNetworks, batch: Batch, model_params: Optional[Sequence] = None):
    """
    Regression losses of the model on real transitions.

    Returns:
        Tuple[Tensor, Tensor]: Mean squared next-state error ``mean ||f(s, a) - s'||^2``
        and mean squared reward error.
    """
    next_states, rewards = model.forward(batch.states, batch.actions, model_params)
    dynamics_loss = T.mean(T.tensor_sum((next_states - batch.next_states).square(), axis=-1))
    reward_loss = T.mean((rewards - batch.rewards).square())
    return dynamics_loss, reward_loss


def value_predictions(value_params: Sequence, states) -> Tensor:
    return mlp_forward(value_params, states).reshape(-1)


def vep_model_loss(model: ModelNetworks, batch: Batch, policies: Sequence[int],
                   value_fns: Sequence[List[np.ndarray]], gamma: float,
                   model_params: Optional[Sequence] = None) -> Tensor:
    """
    Squared gap between sampled and model Bellman backups of fixed value functions.

    ``policies`` are deterministic state-independent policies given by their
    action; a transition contributes to policy ``a`` only when it took action
    ``a``. For each value function ``V`` the sampled backup is
    ``r + gamma (1 - done) V(s')`` and the model backup is
    ``r_theta + gamma (1 - done) V(f_theta(s, a))``. The sum of squared gaps is
    divided by ``|V|`` times the number of contributing transitions, so a
    reward offset of ``c`` costs exactly ``c^2``.
    """
    if not policies or not value_fns:
        raise DomainError("VEP needs at least one policy and one value function.")
    next_states, rewards = model.forward(batch.states, batch.actions, model_params)
    continuing = gamma * (1.0 - np.asarray(batch.dones, dtype=np.float64))
    actions = np.asarray(batch.actions)

    mask = np.zeros(len(batch))
    for action in policies:
        mask += (actions == action).astype(np.float64)
    contributing = float(mask.sum())
    if contributing == 0.0:
        logger.debug("No transition in the batch follows any VEP policy")
        return Tensor(0.0)

    total = Tensor(0.0)
    for value_params in value_fns:
        with no_grad():
            sampled = batch.rewards + continuing * value_predictions(value_params, batch.next_states).data
        predicted = rewards + Tensor(continuing) * value_predictions(value_params, next_states)
        total = total + T.tensor_sum((predicted - sampled).square() * Tensor(mask))
    return total / (len(value_fns) * contributing)


def model_mse(model: ModelNetworks, batch: Batch) -> float:
    """Mean squared next-state prediction error on held-out transitions."""
    with no_grad():
        dynamics_loss, _ = mle_model_loss(model, batch)
    return float(dynamics_loss.data)
