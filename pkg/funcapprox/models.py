from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple
import logging

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

RUN_RECORD_COLUMNS = ['step', 'eval_return_mean', 'eval_return_stderr', 'model_mse', 'inner_loss', 'outer_loss']


class AgentKind(str, Enum):
    """How the model networks are fitted."""

    OMD = 'omd'
    MLE = 'mle'
    VEP = 'vep'

    @classmethod
    def parse(cls, value) -> 'AgentKind':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"Unknown agent kind {value!r}; expected one of {[k.value for k in cls]}.")


class ExplorationMode(str, Enum):
    EPSILON_GREEDY = 'epsilon_greedy'
    SOFTMAX = 'softmax'
    GREEDY = 'greedy'


@dataclass(frozen=True)
class MlpSpec:
    """
    Shape of a fully connected ReLU network.

    Attributes:
        input_dim (int): Width of the input layer.
        output_dim (int): Width of the linear output layer.
        hidden_dims (Tuple[int, ...]): Widths of the hidden ReLU layers.
    """

    input_dim: int
    output_dim: int
    hidden_dims: Tuple[int, ...] = (32, 32)
    activation: str = 'relu'

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        for name in ('input_dim', 'output_dim'):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}.")
        for index, width in enumerate(self.hidden_dims):
            if width < 1:
                raise ValidationError(f"hidden_dims[{index}] must be >= 1, got {width}.")
        if self.activation != 'relu':
            raise ValidationError(f"Only ReLU activations are supported, got {self.activation!r}.")

    @property
    def layer_sizes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of every affine layer."""
        widths = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_sizes)


@dataclass(frozen=True)
class Transition:
    """One real environment transition; ``done`` marks a terminal next state."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    """Column-stacked transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        size = len(self.actions)
        if size == 0:
            raise ValidationError("A batch needs at least one transition.")
        for name in ('states', 'rewards', 'next_states', 'dones'):
            if len(getattr(self, name)) != size:
                raise ValidationError(f"Batch column {name} has {len(getattr(self, name))} rows, expected {size}.")

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: List[Transition]) -> 'Batch':
        return cls(
            states=np.array([t.state for t in transitions], dtype=np.float64),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.float64),
            dones=np.array([t.done for t in transitions], dtype=np.float64),
        )


class ReplayBuffer:
    """
    Fixed-capacity ring buffer of transitions with uniform sampling.

    Once full, each insert overwrites the oldest entry.
    """

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValidationError(f"capacity must be >= 1, got {capacity}.")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.position = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        index = self.position
        self.states[index] = transition.state
        self.actions[index] = transition.action
        self.rewards[index] = transition.reward
        self.next_states[index] = transition.next_state
        self.dones[index] = float(transition.done)
        self.position = (self.position + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValidationError("Cannot sample from an empty replay buffer.")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Draw ``batch_size`` transitions uniformly with replacement from the filled region."""
        indices = self.sample_indices(batch_size, rng)
        return Batch(
            states=self.states[indices],
            actions=self.actions[indices],
            rewards=self.rewards[indices],
            next_states=self.next_states[indices],
            dones=self.dones[indices],
        )


@dataclass
class AgentConfig:
    """
    Hyperparameters of one function-approximation run.

    Defaults reproduce the CartPole setting: two hidden layers of 32 units,
    batch 256, discount 0.99, temperature 0.01 and one inner step per model update.
    """

    agent: AgentKind = AgentKind.OMD
    total_steps: int = 200_000
    q_hidden: Tuple[int, ...] = (32, 32)
    model_hidden: Tuple[int, ...] = (32, 32)
    q_learning_rate: float = 1e-3
    model_learning_rate: float = 1e-3
    batch_size: int = 256
    buffer_capacity: int = 100_000
    gamma: float = 0.99
    alpha: float = 0.01
    ema_tau: float = 0.01
    inner_steps: int = 1
    warmup_steps: int = 1_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    exploration: ExplorationMode = ExplorationMode.EPSILON_GREEDY
    epsilon: float = 0.1
    double_q: bool = True
    use_identity_inverse: bool = True
    n_vep_value_fns: int = 5

    def __post_init__(self):
        self.agent = AgentKind.parse(self.agent)
        self.exploration = ExplorationMode(self.exploration)
        self.q_hidden = tuple(self.q_hidden)
        self.model_hidden = tuple(self.model_hidden)
        if not 0.0 < self.ema_tau < 1.0:
            raise ValidationError(f"ema_tau must lie in (0, 1), got {self.ema_tau}.")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}.")
        if not self.alpha > 0.0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}.")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValidationError(f"epsilon must lie in [0, 1], got {self.epsilon}.")
        for name in ('total_steps', 'batch_size', 'buffer_capacity', 'inner_steps', 'eval_interval',
                     'eval_episodes', 'n_vep_value_fns'):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}.")


@dataclass
class RunRecord:
    """Evaluation history of one training run and how it ended."""

    agent: AgentKind
    seed: int
    rows: List[dict] = field(default_factory=list)
    status: str = 'ok'
    message: Optional[str] = None

    def record(self, step: int, eval_return_mean: float, eval_return_stderr: float, model_mse: float,
               inner_loss: float, outer_loss: float) -> None:
        self.rows.append({
            'step': step,
            'eval_return_mean': eval_return_mean,
            'eval_return_stderr': eval_return_stderr,
            'model_mse': model_mse,
            'inner_loss': inner_loss,
            'outer_loss': outer_loss,
        })

    @property
    def final_return(self) -> float:
        return self.rows[-1]['eval_return_mean'] if self.rows else float('nan')

    @property
    def final_model_mse(self) -> float:
        return self.rows[-1]['model_mse'] if self.rows else float('nan')

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=RUN_RECORD_COLUMNS)
