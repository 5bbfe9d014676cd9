"""
MLP Q-networks with EMA targets and deterministic model networks on the autodiff tape.

Parameters are kept as plain NumPy arrays ``[W1, b1, W2, b2, ...]`` with
``W`` shaped (fan_in, fan_out); forward passes accept arrays or Tensors so the
same code serves evaluation and differentiation.
"""
from typing import List, Optional, Sequence
import logging

import numpy as np

from autodiff import tensor as T
from autodiff.tensor import Tensor, as_tensor, no_grad
from mdp_core.exceptions import ShapeMismatchError

from .models import MlpSpec

logger = logging.getLogger(__name__)


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> List[np.ndarray]:
    """Fan-in scaled uniform initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    params = []
    for fan_in, fan_out in spec.layer_sizes:
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=fan_out))
    return params


def mlp_forward(params: Sequence, inputs) -> Tensor:
    """Affine layers with ReLU between them and a linear output layer; ``inputs`` is (B, input_dim)."""
    hidden = as_tensor(inputs)
    n_layers = len(params) // 2
    for layer in range(n_layers):
        weights, bias = as_tensor(params[2 * layer]), as_tensor(params[2 * layer + 1])
        if hidden.shape[-1] != weights.shape[0]:
            raise ShapeMismatchError(
                f"Layer {layer} expects inputs of width {weights.shape[0]}, got {hidden.shape[-1]}."
            )
        hidden = T.matmul(hidden, weights) + bias
        if layer < n_layers - 1:
            hidden = T.relu(hidden)
    return hidden


def q_forward_all(params: Sequence, states) -> Tensor:
    """Q-values of every action: (B, A) for a batch of states, (A,) for a single state."""
    states = as_tensor(states)
    if states.ndim == 1:
        return mlp_forward(params, states.reshape(1, -1)).reshape(-1)
    return mlp_forward(params, states)


def q_forward(params: Sequence, state, action: int) -> float:
    """Q-value of one state-action pair."""
    with no_grad():
        return float(q_forward_all(params, state).data[int(action)])


def encode_inputs(states: np.ndarray, actions: np.ndarray, n_actions: int) -> np.ndarray:
    """Concatenate states with one-hot actions."""
    states = np.asarray(states, dtype=np.float64)
    return np.concatenate([states, T.one_hot(actions, n_actions)], axis=-1)


class QNetworkPair:
    """
    Online Q-networks and their exponential-moving-average targets.

    With ``double_q`` two online/target pairs are kept and bootstrap values use
    the element-wise minimum of the two target networks; otherwise one pair.

    Attributes:
        spec (MlpSpec): Shape of every network.
        online (List[List[np.ndarray]]): Parameters of the online networks.
        target (List[List[np.ndarray]]): Parameters of the target networks.
        ema_tau (float): Weight of the online parameters in each target update.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, ema_tau: float, double_q: bool = True):
        self.spec = spec
        self.ema_tau = ema_tau
        self.double_q = double_q
        self.online = [init_mlp(spec, rng) for _ in range(2 if double_q else 1)]
        self.target = [[w.copy() for w in net] for net in self.online]

    @property
    def n_actions(self) -> int:
        return self.spec.output_dim

    @property
    def n_nets(self) -> int:
        return len(self.online)

    def online_parameters(self) -> List[np.ndarray]:
        """All online arrays, net after net."""
        return [w for net in self.online for w in net]

    def set_online_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        self.online = self.split_online(list(arrays))

    def split_online(self, flat: Sequence) -> List[list]:
        """Group a flat parameter list (arrays or Tensors) back into one list per online net."""
        per_net = len(self.online[0])
        if len(flat) != per_net * self.n_nets:
            raise ShapeMismatchError(f"Expected {per_net * self.n_nets} parameter arrays, got {len(flat)}.")
        return [list(flat[i * per_net:(i + 1) * per_net]) for i in range(self.n_nets)]

    def ema_update(self) -> None:
        """``target <- (1 - tau) target + tau online`` for every array."""
        tau = self.ema_tau
        self.target = [
            [(1.0 - tau) * target + tau * online for target, online in zip(target_net, online_net)]
            for target_net, online_net in zip(self.target, self.online)
        ]

    def q_values(self, states, net: int = 0) -> np.ndarray:
        with no_grad():
            return q_forward_all(self.online[net], states).data

    def target_values(self, next_states) -> Tensor:
        """Element-wise minimum over target networks of ``Q_target(s', .)``, differentiable in ``next_states``."""
        values = [q_forward_all(net, next_states) for net in self.target]
        combined = values[0]
        for other in values[1:]:
            combined = T.minimum(combined, other)
        return combined


class ModelNetworks:
    """
    Deterministic dynamics network ``f(s, a) -> s'`` and reward network ``r(s, a)``.

    Both read the state concatenated with a one-hot action. ``parameters()``
    lists the dynamics arrays first and the reward arrays after them.
    """

    def __init__(self, state_dim: int, n_actions: int, hidden_dims, rng: np.random.Generator):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.dynamics_spec = MlpSpec(state_dim + n_actions, state_dim, tuple(hidden_dims))
        self.reward_spec = MlpSpec(state_dim + n_actions, 1, tuple(hidden_dims))
        self.dynamics = init_mlp(self.dynamics_spec, rng)
        self.rewards = init_mlp(self.reward_spec, rng)

    def parameters(self) -> List[np.ndarray]:
        return list(self.dynamics) + list(self.rewards)

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        split = len(self.dynamics)
        arrays = list(arrays)
        if len(arrays) != split + len(self.rewards):
            raise ShapeMismatchError(f"Expected {split + len(self.rewards)} model arrays, got {len(arrays)}.")
        self.dynamics, self.rewards = arrays[:split], arrays[split:]

    def forward(self, states, actions, params: Optional[Sequence] = None):
        """
        Predicted next states (B, state_dim) and rewards (B,) as Tensors.

        ``params`` overrides the stored parameters, e.g. with leaves of a graph.
        """
        params = self.parameters() if params is None else list(params)
        split = len(self.dynamics)
        inputs = encode_inputs(states, actions, self.n_actions)
        next_states = mlp_forward(params[:split], inputs)
        rewards = mlp_forward(params[split:], inputs).reshape(-1)
        return next_states, rewards


def predict_next_states(model: ModelNetworks, states, actions) -> np.ndarray:
    """Next-state predictions of the model along given states and actions."""
    with no_grad():
        next_states, _ = model.forward(np.atleast_2d(states), np.atleast_1d(actions))
    return next_states.data
