"""
Model-based training loop shared by the OMD, MLE and VEP agents.

Each environment step adds one real transition to the replay buffer. After
warm-up, every step runs ``inner_steps`` Q-network updates against targets
produced by the model, each followed by an EMA target update, and then one
model update whose gradient depends on the agent kind.
"""
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple, Union
import logging

import numpy as np

from autodiff.tensor import no_grad
from mdp_core.exceptions import NumericalError, SolverError
from mdp_core.operators import softmax_probs

from .checkpoint import agent_sections, save_checkpoint
from .gradients import check_finite, loss_gradient, mle_model_gradient, omd_model_gradient, vep_model_gradient
from .losses import inner_loss, model_mse, outer_loss
from .models import AgentConfig, AgentKind, Batch, ExplorationMode, MlpSpec, ReplayBuffer, RunRecord, Transition
from .networks import ModelNetworks, QNetworkPair, init_mlp
from .optim import Adam

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 10_000


def act(q_pair: QNetworkPair, state: np.ndarray, mode: Union[ExplorationMode, str], rng: np.random.Generator,
        epsilon: float = 0.1, alpha: float = 0.01) -> int:
    """
    Pick an action from the first online Q-network.

    Greedy choices break ties towards the lowest index; ``epsilon_greedy``
    replaces them with a uniform action with probability ``epsilon``;
    ``softmax`` samples from ``softmax(Q / alpha)``.
    """
    mode = ExplorationMode(mode)
    values = q_pair.q_values(np.asarray(state, dtype=np.float64))
    if mode is ExplorationMode.SOFTMAX:
        return int(rng.choice(len(values), p=softmax_probs(values, alpha)))
    if mode is ExplorationMode.EPSILON_GREEDY and rng.random() < epsilon:
        return int(rng.integers(len(values)))
    return int(np.argmax(values))


def evaluate(q_pair: QNetworkPair, env, n_episodes: int) -> Tuple[np.ndarray, Batch]:
    """
    Run greedy episodes on ``env``.

    Returns:
        Tuple[np.ndarray, Batch]: The undiscounted return of each episode and
        every transition seen, for held-out model errors.
    """
    returns, transitions = [], []
    for _ in range(n_episodes):
        observation, total, done = env.reset(), 0.0, False
        while not done:
            action = act(q_pair, observation, ExplorationMode.GREEDY, None)
            result = env.step(action)
            transitions.append(Transition(observation, action, result.reward, result.observation, result.terminated))
            total += result.reward
            done = result.done
            observation = result.observation
        returns.append(total)
    return np.array(returns), Batch.from_transitions(transitions)


def summarise_returns(returns: np.ndarray) -> Tuple[float, float]:
    """Mean and standard error (``ddof=1``); a single episode has zero error."""
    if len(returns) < 2:
        return float(np.mean(returns)), 0.0
    return float(np.mean(returns)), float(np.std(returns, ddof=1) / np.sqrt(len(returns)))


class ModelBasedAgent:
    """
    Networks, optimisers and replay buffer of one run.

    All randomness (initialisation, exploration, minibatches) comes from the
    generator handed in, so a run is a function of its seed.
    """

    def __init__(self, state_dim: int, n_actions: int, config: AgentConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.q_pair = QNetworkPair(MlpSpec(state_dim, n_actions, config.q_hidden), rng, config.ema_tau,
                                   config.double_q)
        self.model = ModelNetworks(state_dim, n_actions, config.model_hidden, rng)
        self.buffer = ReplayBuffer(config.buffer_capacity, state_dim)
        self.q_optimizer = Adam(config.q_learning_rate)
        self.q_state = self.q_optimizer.init(self.q_pair.online_parameters())
        self.model_optimizer = Adam(config.model_learning_rate)
        self.model_state = self.model_optimizer.init(self.model.parameters())
        self.policies = list(range(n_actions))
        self.value_fns = []
        if config.agent is AgentKind.VEP:
            value_spec = MlpSpec(state_dim, 1, config.q_hidden)
            self.value_fns = [init_mlp(value_spec, rng) for _ in range(config.n_vep_value_fns)]
        self.last_batch: Optional[Batch] = None

    def select_action(self, state: np.ndarray, warming_up: bool) -> int:
        if warming_up:
            return int(self.rng.integers(self.q_pair.n_actions))
        return act(self.q_pair, state, self.config.exploration, self.rng, self.config.epsilon, self.config.alpha)

    def update_q(self, batch: Batch) -> None:
        """One optimiser step on the model-induced Bellman error, then the EMA target update."""
        config = self.config
        gradient = loss_gradient(
            lambda leaves: inner_loss(self.model, self.q_pair, batch.states, batch.actions, config.alpha,
                                      config.gamma, q_params=leaves),
            self.q_pair.online_parameters(),
        )
        check_finite(gradient, "Q-network gradient")
        params, self.q_state = self.q_optimizer.update(self.q_pair.online_parameters(), gradient, self.q_state)
        self.q_pair.set_online_parameters(params)
        self.q_pair.ema_update()

    def model_gradient(self, model_batch: Batch, real_batch: Batch):
        kind = self.config.agent
        if kind is AgentKind.OMD:
            return omd_model_gradient(self.model, self.q_pair, model_batch, real_batch, self.config)
        if kind is AgentKind.MLE:
            return mle_model_gradient(self.model, real_batch)
        return vep_model_gradient(self.model, real_batch, self.policies, self.value_fns, self.config.gamma)

    def update_model(self, model_batch: Batch, real_batch: Batch) -> None:
        gradient = self.model_gradient(model_batch, real_batch)
        params, self.model_state = self.model_optimizer.update(self.model.parameters(), gradient, self.model_state)
        self.model.set_parameters(params)

    def learn(self) -> None:
        batch = None
        for _ in range(self.config.inner_steps):
            batch = self.buffer.sample(self.config.batch_size, self.rng)
            self.update_q(batch)
        real_batch = self.buffer.sample(self.config.batch_size, self.rng)
        self.update_model(batch, real_batch)
        self.last_batch = real_batch

    def losses(self) -> Tuple[float, float]:
        """Inner and outer Bellman errors on the most recent real minibatch."""
        if self.last_batch is None:
            return float('nan'), float('nan')
        config, batch = self.config, self.last_batch
        with no_grad():
            inner = inner_loss(self.model, self.q_pair, batch.states, batch.actions, config.alpha, config.gamma)
            outer = outer_loss(self.q_pair, batch, config.alpha, config.gamma)
        return float(inner.data), float(outer.data)


def train_agent(env, agent_kind: Union[AgentKind, str], config: AgentConfig, seed: int,
                checkpoint_path: Optional[Union[str, Path]] = None) -> RunRecord:
    """
    Train one agent and record its evaluation curve.

    Training uses ``env.spawn(seed)``; evaluation uses a separate copy spawned
    with ``seed + 10000`` and the greedy policy of the first online network.
    Evaluations happen every ``eval_interval`` steps and after the last step.

    Args:
        env: Environment prototype exposing ``spawn``, ``reset``, ``step``,
            ``observation_dim`` and ``n_actions``.
        agent_kind (Union[AgentKind, str]): Overrides ``config.agent``.
        config (AgentConfig): Hyperparameters.
        seed (int): Seed of every random stream of the run.
        checkpoint_path (Optional[Union[str, Path]]): Where to write final parameters.

    Returns:
        RunRecord: Status ``'diverged'`` if a gradient became non-finite or a
        linear solve broke down; rows recorded up to that point are kept.
    """
    kind = AgentKind.parse(agent_kind)
    if config.agent is not kind:
        config = replace(config, agent=kind)
    rng = np.random.default_rng(seed)
    train_env = env.spawn(seed)
    eval_env = env.spawn(seed + EVAL_SEED_OFFSET)
    agent = ModelBasedAgent(env.observation_dim, env.n_actions, config, rng)
    record = RunRecord(kind, seed)
    logger.info("Training %s agent on %s for %d steps (seed %d)", kind.value, train_env, config.total_steps, seed)

    observation = train_env.reset()
    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            warming_up = step <= config.warmup_steps
            action = agent.select_action(observation, warming_up)
            result = train_env.step(action)
            agent.buffer.add(Transition(observation, action, result.reward, result.observation, result.terminated))
            observation = train_env.reset() if result.done else result.observation

            if not warming_up:
                agent.learn()

            if step % config.eval_interval == 0 or step == config.total_steps:
                returns, held_out = evaluate(agent.q_pair, eval_env, config.eval_episodes)
                mean_return, stderr = summarise_returns(returns)
                inner, outer = agent.losses()
                mse = model_mse(agent.model, held_out)
                record.record(step, mean_return, stderr, mse, inner, outer)
                logger.info("[%s seed=%d] step %d: return %.1f +/- %.1f, model MSE %.4g",
                            kind.value, seed, step, mean_return, stderr, mse)
    except (NumericalError, SolverError) as exc:
        record.status = 'diverged'
        record.message = f"step {step}: {exc}"
        logger.error("[%s seed=%d] diverged at step %d: %s", kind.value, seed, step, exc)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, agent_sections(agent.q_pair, agent.model))
    return record
