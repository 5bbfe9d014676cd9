"""Tabular MDP generators: seeded random instances, the default 2-state MDP, and file loading."""
from pathlib import Path
from typing import Tuple, Union
import logging

import numpy as np

from mdp_core.models import TabularMDP
from mdp_core.serializers import load_mdp

logger = logging.getLogger(__name__)


def random_tabular_mdp(n_states: int, n_actions: int, seed: int,
                       reward_range: Tuple[float, float] = (0.0, 1.0),
                       gamma: float = 0.9) -> TabularMDP:
    """
    Draw a random MDP with Dirichlet(1) transition rows and uniform rewards.

    Args:
        n_states (int): Number of states, at least 1.
        n_actions (int): Number of actions, at least 1.
        seed (int): Seed of the generator; equal seeds give identical MDPs.
        reward_range (Tuple[float, float]): Bounds of the uniform reward draw.
        gamma (float): Discount of the returned MDP.

    Returns:
        TabularMDP: A valid MDP with a uniform initial distribution.
    """
    rng = np.random.default_rng(seed)
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    low, high = reward_range
    rewards = rng.uniform(low, high, size=(n_states, n_actions))
    return TabularMDP(transitions, rewards, gamma, np.full(n_states, 1.0 / n_states))


def default_two_state_mdp(gamma: float = 0.9) -> TabularMDP:
    """
    The repository's stand-in 2-state, 2-action MDP (not taken from published data).

    In state 0, action 0 pays 0.6 and stays while action 1 pays nothing and
    moves to state 1. In state 1, action 0 pays 1.0 and stays while action 1
    pays 0.2 and moves back. The optimal policy gives up 0.6 once to reach
    the better absorbing loop; a myopic model that ignores the move keeps
    collecting 0.6 instead.
    """
    transitions = np.array([
        [[1.0, 0.0], [0.0, 1.0]],
        [[0.0, 1.0], [1.0, 0.0]],
    ])
    rewards = np.array([
        [0.6, 0.0],
        [1.0, 0.2],
    ])
    return TabularMDP(transitions, rewards, gamma, np.array([0.5, 0.5]))


def mdp_from_spec(source: Union[str, Path, None], seed: int = 0, n_states: int = 5,
                  n_actions: int = 3) -> TabularMDP:
    """
    Resolve an MDP description used in run configs.

    ``'default'`` (or ``None``) is :func:`default_two_state_mdp`, ``'random'``
    draws from :func:`random_tabular_mdp`, anything else is read as a YAML file.
    """
    if source in (None, 'default'):
        return default_two_state_mdp()
    if source == 'random':
        return random_tabular_mdp(n_states, n_actions, seed)
    logger.info("Loading tabular MDP file %s", source)
    return load_mdp(source)
