"""
Cart-pole balancing with the classic benchmark constants and a 500-step episode cap.
"""
from dataclasses import dataclass, replace
from typing import Optional
import logging
import math

import numpy as np

from mdp_core.exceptions import DomainError

logger = logging.getLogger(__name__)

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * HALF_LENGTH
FORCE = 10.0
DT = 0.02

POSITION_LIMIT = 2.4
ANGLE_LIMIT = 12 * 2 * math.pi / 360
MAX_EPISODE_STEPS = 500
INITIAL_STATE_BOUND = 0.05

STATE_DIM = 4
N_ACTIONS = 2


@dataclass(frozen=True)
class CartPoleState:
    """
    Physical state of the cart-pole plus the number of steps taken in the episode.

    Attributes:
        position (float): Cart position in metres.
        velocity (float): Cart velocity in metres per second.
        angle (float): Pole angle in radians, zero when upright.
        angular_velocity (float): Pole angular velocity in radians per second.
        steps (int): Steps taken since the last reset.
    """

    position: float
    velocity: float
    angle: float
    angular_velocity: float
    steps: int = 0

    def to_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity, self.angle, self.angular_velocity], dtype=np.float64)

    @property
    def failed(self) -> bool:
        return abs(self.position) > POSITION_LIMIT or abs(self.angle) > ANGLE_LIMIT

    @classmethod
    def from_array(cls, values, steps: int = 0) -> 'CartPoleState':
        position, velocity, angle, angular_velocity = (float(v) for v in values)
        return cls(position, velocity, angle, angular_velocity, steps)


@dataclass(frozen=True)
class StepResult:
    """
    One environment transition.

    ``done`` ends the episode; ``terminated`` is true only when the pole fell or
    the cart left the track, so a time-limit cut keeps its bootstrap value.
    """

    observation: np.ndarray
    reward: float
    done: bool
    terminated: bool


def integrate(state: CartPoleState, action: int) -> CartPoleState:
    """One explicit Euler step of the cart-pole equations of motion."""
    force = FORCE if action == 1 else -FORCE
    cos_angle = math.cos(state.angle)
    sin_angle = math.sin(state.angle)

    temp = (force + POLE_MASS_LENGTH * state.angular_velocity ** 2 * sin_angle) / TOTAL_MASS
    angular_acc = (GRAVITY * sin_angle - cos_angle * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_angle ** 2 / TOTAL_MASS)
    )
    acc = temp - POLE_MASS_LENGTH * angular_acc * cos_angle / TOTAL_MASS

    return CartPoleState(
        position=state.position + DT * state.velocity,
        velocity=state.velocity + DT * acc,
        angle=state.angle + DT * state.angular_velocity,
        angular_velocity=state.angular_velocity + DT * angular_acc,
        steps=state.steps,
    )


def cartpole_step(state: CartPoleState, action: int):
    """
    Advance the cart-pole by one control step.

    Every step pays 1.0, the terminating one included, so an episode's return
    equals its length and never exceeds ``MAX_EPISODE_STEPS``.

    Args:
        state (CartPoleState): Current state.
        action (int): 0 pushes left, 1 pushes right.

    Returns:
        Tuple[CartPoleState, StepResult]: The next state and the transition seen by the agent.

    Raises:
        DomainError: If ``action`` is not 0 or 1.
    """
    if action not in (0, 1):
        raise DomainError(f"CartPole action must be 0 or 1, got {action!r}.")
    next_state = replace(integrate(state, int(action)), steps=state.steps + 1)
    terminated = next_state.failed
    done = terminated or next_state.steps >= MAX_EPISODE_STEPS
    return next_state, StepResult(next_state.to_array(), 1.0, done, terminated)


class CartPoleEnv:
    """Stateful cart-pole episode runner with its own seeded generator."""

    observation_dim = STATE_DIM
    n_actions = N_ACTIONS

    def __init__(self, seed: Optional[int] = None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.state: Optional[CartPoleState] = None

    def reset(self) -> np.ndarray:
        """Start an episode from a uniform draw in ``[-0.05, 0.05]^4``."""
        values = self.rng.uniform(-INITIAL_STATE_BOUND, INITIAL_STATE_BOUND, size=STATE_DIM)
        self.state = CartPoleState.from_array(values)
        return self.state.to_array()

    def step(self, action: int) -> StepResult:
        if self.state is None:
            raise DomainError("Call reset() before step().")
        self.state, result = cartpole_step(self.state, action)
        return result

    def spawn(self, seed: int) -> 'CartPoleEnv':
        """An independent environment of the same kind, e.g. for evaluation."""
        return CartPoleEnv(seed)

    def __str__(self) -> str:
        return f"CartPoleEnv(seed={self.seed})"
