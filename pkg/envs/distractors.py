from dataclasses import dataclass
from typing import Optional
import logging

import numpy as np
from django.core.exceptions import ValidationError

from .cartpole import StepResult

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistractorConfig:
    """
    Number of standard-normal noise dimensions appended to every observation.

    Attributes:
        n_distractors (int): Non-negative count of extra dimensions.
        seed (Optional[int]): Seed of the noise generator.
    """

    n_distractors: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if int(self.n_distractors) != self.n_distractors or self.n_distractors < 0:
            raise ValidationError(f"n_distractors must be a non-negative integer, got {self.n_distractors!r}.")


class DistractorEnv:
    """
    Wraps an environment and appends fresh Gaussian noise to each observation.

    The base observation occupies the leading dimensions unchanged; rewards and
    episode ends come from the base environment untouched. Noise is redrawn at
    every reset and every step.
    """

    def __init__(self, env, config: DistractorConfig):
        self.env = env
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    @property
    def observation_dim(self) -> int:
        return self.env.observation_dim + self.config.n_distractors

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    def _augment(self, observation: np.ndarray) -> np.ndarray:
        noise = self.rng.standard_normal(self.config.n_distractors)
        return np.concatenate([observation, noise])

    def reset(self) -> np.ndarray:
        return self._augment(self.env.reset())

    def step(self, action: int) -> StepResult:
        result = self.env.step(action)
        return StepResult(self._augment(result.observation), result.reward, result.done, result.terminated)

    def spawn(self, seed: int) -> 'DistractorEnv':
        return DistractorEnv(self.env.spawn(seed), DistractorConfig(self.config.n_distractors, seed + 1))

    def __str__(self) -> str:
        return f"DistractorEnv({self.env}, n_distractors={self.config.n_distractors})"


def wrap_distractors(env, config: DistractorConfig):
    """Return ``env`` augmented with ``config.n_distractors`` noise dimensions."""
    logger.debug("Wrapping %s with %d distractor dimensions", env, config.n_distractors)
    return DistractorEnv(env, config)
