"""Domain types for exact finite MDPs and their learnable tabular models.

All tables are dense, row-major ``[s][a][s']`` float64 arrays. Instances are
immutable after construction: arrays are copied and flagged read-only.
"""
from dataclasses import dataclass, field
from typing import Optional, Tuple
import logging

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    """Return a float64 copy of ``array`` that cannot be written to."""
    frozen = np.array(array, dtype=np.float64, copy=True)
    frozen.setflags(write=False)
    return frozen


def check_stochastic_rows(table: np.ndarray, name: str, tol: float = STOCHASTIC_TOL) -> None:
    """Validate that ``table`` is non-negative and sums to one along its last axis.

    Args:
        table (np.ndarray): Array whose last axis holds probability vectors.
        name (str): Field name used in the error message.
        tol (float): Allowed deviation of every row sum from 1.

    Raises:
        ValidationError: On the first negative entry or the first bad row sum,
            naming its indices.
    """
    negative = np.argwhere(~(table >= 0.0))
    if negative.size:
        index = tuple(int(i) for i in negative[0])
        logger.error("%s%s is negative or NaN: %s", name, list(index), table[index])
        raise ValidationError(f"{name}{list(index)} must be >= 0, got {table[index]!r}.")

    sums = table.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    if bad.size:
        index = tuple(int(i) for i in bad[0])
        logger.error("%s%s sums to %s", name, list(index), sums[index])
        raise ValidationError(f"{name}{list(index)} sums to {sums[index]!r}, expected 1.")


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """An exact finite MDP.

    Attributes:
        transitions (np.ndarray): ``p[s][a][s']`` with shape (S, A, S).
        rewards (np.ndarray): ``r[s][a]`` with shape (S, A).
        gamma (float): Discount in [0, 1).
        rho0 (np.ndarray): Initial state distribution with shape (S,).
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    rho0: np.ndarray

    def __post_init__(self) -> None:
        transitions = np.asarray(self.transitions, dtype=np.float64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        rho0 = np.asarray(self.rho0, dtype=np.float64)

        if transitions.ndim != 3 or transitions.shape[0] != transitions.shape[2]:
            raise ValidationError(f"transitions must have shape (S, A, S), got {transitions.shape}.")
        n_states, n_actions = transitions.shape[:2]
        if n_states < 1 or n_actions < 1:
            raise ValidationError("n_states and n_actions must be positive.")
        if rewards.shape != (n_states, n_actions):
            raise ValidationError(f"rewards must have shape {(n_states, n_actions)}, got {rewards.shape}.")
        if rho0.shape != (n_states,):
            raise ValidationError(f"rho0 must have shape {(n_states,)}, got {rho0.shape}.")
        if not np.all(np.isfinite(rewards)):
            index = [int(i) for i in np.argwhere(~np.isfinite(rewards))[0]]
            raise ValidationError(f"rewards{index} is not finite.")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma!r}.")

        check_stochastic_rows(transitions, 'transitions')
        check_stochastic_rows(rho0, 'rho0')

        object.__setattr__(self, 'transitions', _frozen(transitions))
        object.__setattr__(self, 'rewards', _frozen(rewards))
        object.__setattr__(self, 'rho0', _frozen(rho0))
        object.__setattr__(self, 'gamma', float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_states, self.n_actions

    def with_rewards(self, rewards: np.ndarray) -> 'TabularMDP':
        """Return a copy of the MDP with ``rewards`` swapped in."""
        return TabularMDP(self.transitions, rewards, self.gamma, self.rho0)

    def __str__(self) -> str:
        return f"TabularMDP(S={self.n_states}, A={self.n_actions}, gamma={self.gamma})"


@dataclass(frozen=True, eq=False)
class TabularModelParams:
    """Learnable tabular model: dynamics logits and a reward table.

    The induced dynamics ``p_theta(.|s,a)`` is the softmax of ``logits[s, a, :]``.
    The same container carries gradients with respect to the parameters.

    Attributes:
        logits (np.ndarray): Unconstrained logits with shape (S, A, S).
        model_rewards (np.ndarray): Reward table with shape (S, A).
    """

    logits: np.ndarray
    model_rewards: np.ndarray

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        model_rewards = np.asarray(self.model_rewards, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[0] != logits.shape[2]:
            raise ValidationError(f"logits must have shape (S, A, S), got {logits.shape}.")
        if model_rewards.shape != logits.shape[:2]:
            raise ValidationError(
                f"model_rewards must have shape {logits.shape[:2]}, got {model_rewards.shape}."
            )
        object.__setattr__(self, 'logits', _frozen(logits))
        object.__setattr__(self, 'model_rewards', _frozen(model_rewards))

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    @property
    def size(self) -> int:
        return self.logits.size + self.model_rewards.size

    def dynamics(self) -> np.ndarray:
        """Return ``p_theta`` as an (S, A, S) row-stochastic array."""
        shifted = self.logits - self.logits.max(axis=-1, keepdims=True)
        weights = np.exp(shifted)
        return weights / weights.sum(axis=-1, keepdims=True)

    def flatten(self) -> np.ndarray:
        """Concatenate all logits and all reward entries into one vector."""
        return np.concatenate([self.logits.ravel(), self.model_rewards.ravel()])

    def norm(self) -> float:
        """Euclidean norm of :meth:`flatten`."""
        return float(np.linalg.norm(self.flatten()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.logits)) and np.all(np.isfinite(self.model_rewards)))

    @classmethod
    def from_flat(cls, vector: np.ndarray, n_states: int, n_actions: int) -> 'TabularModelParams':
        """Inverse of :meth:`flatten`."""
        vector = np.asarray(vector, dtype=np.float64)
        n_logits = n_states * n_actions * n_states
        if vector.shape != (n_logits + n_states * n_actions,):
            raise ValidationError(f"Flat parameter vector has shape {vector.shape}.")
        return cls(
            vector[:n_logits].reshape(n_states, n_actions, n_states),
            vector[n_logits:].reshape(n_states, n_actions),
        )

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> 'TabularModelParams':
        return cls(np.zeros((n_states, n_actions, n_states)), np.zeros((n_states, n_actions)))

    @classmethod
    def initial(cls, n_states: int, n_actions: int, rng: np.random.Generator,
                scale: float = 0.1) -> 'TabularModelParams':
        """Draw logits and rewards i.i.d. from Normal(0, scale^2)."""
        logits = rng.normal(0.0, scale, size=(n_states, n_actions, n_states))
        rewards = rng.normal(0.0, scale, size=(n_states, n_actions))
        return cls(logits, rewards)

    @classmethod
    def from_mdp(cls, mdp: TabularMDP, floor_logit: float = -50.0) -> 'TabularModelParams':
        """Parameters reproducing ``mdp`` exactly.

        Zero-probability transitions get ``floor_logit``; exp(-50) vanishes
        against a unit entry in double precision.
        """
        p = mdp.transitions
        with np.errstate(divide='ignore'):
            logits = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)), floor_logit)
        return cls(logits, mdp.rewards)

    def __str__(self) -> str:
        return f"TabularModelParams(S={self.n_states}, A={self.n_actions}, norm={self.norm():.4f})"


@dataclass(frozen=True, eq=False)
class QTable:
    """Action-value table ``Q[s][a]``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"Q-table must be two-dimensional, got shape {values.shape}.")
        if not np.all(np.isfinite(values)):
            index = [int(i) for i in np.argwhere(~np.isfinite(values))[0]]
            logger.error("Q-table entry %s is not finite.", index)
            raise ValidationError(f"Q{index} is not finite.")
        object.__setattr__(self, 'values', _frozen(values))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> 'QTable':
        return cls(np.zeros((n_states, n_actions)))


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Row-stochastic policy ``pi[a|s]`` obtained from a Q-table at temperature ``alpha``.

    Entries may underflow to exactly 0 for very small ``alpha``; rows always sum to 1.
    ``alpha`` is ``None`` for the deterministic greedy policy.
    """

    probs: np.ndarray
    alpha: Optional[float] = field(default=None)

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValidationError(f"Policy table must be two-dimensional, got shape {probs.shape}.")
        check_stochastic_rows(probs, 'probs')
        if self.alpha is not None and not self.alpha > 0.0:
            raise ValidationError(f"alpha must be positive, got {self.alpha!r}.")
        object.__setattr__(self, 'probs', _frozen(probs))
