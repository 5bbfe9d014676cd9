"""
Named experiments.

Each experiment turns a :class:`RunConfig` into jobs (sweep cell x agent x seed),
runs one job at a time through its runner and reduces the job's table to the
summary metrics that are averaged over seeds.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Tuple
import logging

import numpy as np
import pandas as pd

from analysis.bounds import bellman_operator_error, bound_report, equivalence_report, lemma_bound, model_errors
from envs.cartpole import CartPoleEnv
from envs.distractors import DistractorConfig, wrap_distractors
from envs.tabular import mdp_from_spec, random_tabular_mdp
from funcapprox.agent import act, train_agent
from funcapprox.checkpoint import load_checkpoint, restore_agent
from funcapprox.models import AgentConfig, AgentKind, ExplorationMode, MlpSpec
from funcapprox.networks import ModelNetworks, QNetworkPair, predict_next_states
from mdp_core.models import TabularModelParams
from mdp_core.operators import optimal_return
from tabular_omd.models import TabularAgentKind
from tabular_omd.training import train_tabular

from .models import JobOutput, JobSpec, RunConfig

logger = logging.getLogger(__name__)

TRACE_SEED_OFFSET = 20_000

TABULAR_AGENTS = tuple(kind.value for kind in TabularAgentKind)
OMD_TABULAR_AGENTS = (TabularAgentKind.OMD_RETURN.value, TabularAgentKind.OMD_BELLMAN.value)
CONTROL_AGENTS = tuple(kind.value for kind in AgentKind)

Runner = Callable[[RunConfig, JobSpec, Path], JobOutput]


def final_values(**columns: str) -> Callable[[pd.DataFrame], Dict[str, float]]:
    """Summary taking each metric from the last row of a column."""

    def summarise(frame: pd.DataFrame) -> Dict[str, float]:
        if frame.empty:
            return {metric: float('nan') for metric in columns}
        return {metric: float(frame[column].iloc[-1]) for metric, column in columns.items()}

    return summarise


@dataclass(frozen=True)
class Experiment:
    """
    A reproducible study.

    Attributes:
        name (str): Command-line name.
        description (str): One line for ``list_experiments``.
        agents (Tuple[str, ...]): Agent labels a config may ask for.
        runner (Runner): Runs one job and returns its table.
        summarise (Callable): Reduces a job table to ``{metric: value}``.
    """

    name: str
    description: str
    agents: Tuple[str, ...]
    runner: Runner
    summarise: Callable[[pd.DataFrame], Dict[str, float]]

    def jobs(self, config: RunConfig) -> List[JobSpec]:
        return [
            JobSpec(self.name, agent, seed, cell)
            for cell in config.cells()
            for agent in config.agents
            for seed in config.seeds
        ]


# Tabular studies.

def _tabular_mdp(config: RunConfig, seed: int):
    return mdp_from_spec(config.env, seed=seed, n_states=config.n_states, n_actions=config.n_actions)


def _train_tabular(config: RunConfig, mdp, agent: str, seed: int):
    return train_tabular(
        mdp, agent, config.kappa,
        steps=config.tabular_steps,
        learning_rate=config.learning_rate,
        alpha=config.alpha,
        seed=seed,
        inner_noise_sigma=config.inner_noise_sigma,
        use_identity_inverse=config.use_identity_inverse,
    )


def run_tabular_return(config: RunConfig, job: JobSpec, out_dir: Path) -> JobOutput:
    """J curve of one tabular agent, with the optimal return of the MDP alongside."""
    mdp = _tabular_mdp(config, job.seed)
    frame = _train_tabular(config, mdp, job.agent, job.seed).to_frame()
    frame['optimal_J'] = optimal_return(mdp)
    return JobOutput(frame)


def run_bounds(config: RunConfig, job: JobSpec, out_dir: Path) -> JobOutput:
    """Train MLE and the job's OMD variant on the same MDP and check both against their bounds."""
    mdp = _tabular_mdp(config, job.seed)
    mle = _train_tabular(config, mdp, TabularAgentKind.MLE.value, job.seed)
    omd = _train_tabular(config, mdp, job.agent, job.seed)
    report = bound_report(mdp, mle.theta_final, omd.theta_final)
    if not (report.mle_bound_holds and report.omd_bound_holds):
        logger.error("[%s] approximation error above its bound: %s", job.name, report)
    row = {'kappa': config.kappa, **report.to_row(), 'J_mle': mle.final_return, 'J_omd': omd.final_return}
    return JobOutput(pd.DataFrame([row]))


def run_equivalence(config: RunConfig, job: JobSpec, out_dir: Path) -> JobOutput:
    """Whether a trained model is Q*-equivalent to the MDP and how far its dynamics are from the true ones."""
    mdp = _tabular_mdp(config, job.seed)
    result = _train_tabular(config, mdp, job.agent, job.seed)
    report = equivalence_report(mdp, result.theta_final, config.alpha, config.equivalence_tol)
    row = {'kappa': config.kappa, 'J': result.final_return, 'optimal_J': optimal_return(mdp), **report.to_row()}
    return JobOutput(pd.DataFrame([row]))


def run_lemma(config: RunConfig, job: JobSpec, out_dir: Path) -> JobOutput:
    """
    Operator gaps of random (MDP, model, Q) triples next to the lemma's bound.

    Rewards of both MDP and model lie in ``[0, r_max]`` and Q in
    ``[0, r_max / (1 - gamma)]``; operators are the hard ones.
    """
    rng = np.random.default_rng(job.seed)
    gamma, r_max = config.gamma, config.r_max
    rows = []
    for pair in range(config.n_pairs):
        mdp = random_tabular_mdp(config.n_states, config.n_actions, int(rng.integers(2 ** 31)),
                                 reward_range=(0.0, r_max), gamma=gamma)
        theta = TabularModelParams(
            np.log(rng.dirichlet(np.ones(mdp.n_states), size=mdp.shape)),
            rng.uniform(0.0, r_max, size=mdp.shape),
        )
        q = rng.uniform(0.0, r_max / (1.0 - gamma), size=mdp.shape)
        eps_p, eps_r = model_errors(mdp, theta)
        gap = bellman_operator_error(mdp, theta, q, alpha=None)
        bound = lemma_bound(eps_p, eps_r, gamma, r_max)
        rows.append({'pair': pair, 'eps_p': eps_p, 'eps_r': eps_r, 'gap': gap, 'bound': bound,
                     'holds': gap <= bound + 1e-9})
    frame = pd.DataFrame(rows)
    violations = int((~frame['holds']).sum())
    if violations:
        logger.error("[%s] %d of %d pairs exceed the bound", job.name, violations, len(frame))
    return JobOutput(frame)


def summarise_lemma(frame: pd.DataFrame) -> Dict[str, float]:
    return {
        'max_slack_violation': float((frame['gap'] - frame['bound']).max()),
        'holds_fraction': float(frame['holds'].mean()),
    }


def summarise_bounds(frame: pd.DataFrame) -> Dict[str, float]:
    summary = final_values(q_err_mle='q_err_mle', q_err_omd='q_err_omd', bound_mle='bound_mle',
                           bound_omd='bound_omd')(frame)
    summary['bounds_hold'] = float(frame['mle_bound_holds'].iloc[-1] and frame['omd_bound_holds'].iloc[-1])
    return summary


def summarise_equivalence(frame: pd.DataFrame) -> Dict[str, float]:
    summary = final_values(J='J', max_operator_gap='max_operator_gap', max_dynamics_gap='max_dynamics_gap')(frame)
    summary['equivalent'] = float(frame['equivalent'].iloc[-1])
    return summary


# CartPole studies.

def cartpole_env(config: RunConfig):
    env = CartPoleEnv()
    if config.n_distractors:
        env = wrap_distractors(env, DistractorConfig(config.n_distractors))
    return env


def agent_config(config: RunConfig, agent: str) -> AgentConfig:
    """The training hyperparameters of ``agent`` under ``config``."""
    model_hidden = config.model_hidden
    if config.model_width is not None:
        model_hidden = (config.model_width,) * max(1, len(config.model_hidden))
    return AgentConfig(
        agent=agent,
        total_steps=config.total_steps,
        q_hidden=config.q_hidden,
        model_hidden=model_hidden,
        q_learning_rate=config.q_learning_rate,
        model_learning_rate=config.model_learning_rate,
        batch_size=config.batch_size,
        buffer_capacity=config.buffer_capacity,
        gamma=config.gamma,
        alpha=config.alpha,
        ema_tau=config.ema_tau,
        inner_steps=config.inner_steps,
        warmup_steps=config.warmup_steps,
        eval_interval=config.eval_interval,
        eval_episodes=config.eval_episodes,
        exploration=config.exploration,
        epsilon=config.epsilon,
        double_q=config.double_q,
        use_identity_inverse=config.use_identity_inverse,
        n_vep_value_fns=config.n_vep_value_fns,
    )


def run_control(config: RunConfig, job: JobSpec, out_dir: Path) -> JobOutput:
    """Evaluation curve of one agent trained on (possibly distracted) CartPole."""
    record = train_agent(cartpole_env(config), job.agent, agent_config(config, job.agent), job.seed)
    return JobOutput(record.to_frame(), status=record.status, message=record.message)


def prediction_trace(config: RunConfig, agent: str, checkpoint: Path, seed: int) -> pd.DataFrame:
    """
    Roll out the greedy policy of a checkpointed agent and log the model's one-step predictions.

    Each row holds the true next state (``true_<i>``) and the model's prediction
    of it (``pred_<i>``) for the visited state and chosen action.
    """
    env = cartpole_env(config).spawn(seed + TRACE_SEED_OFFSET)
    settings = agent_config(config, agent)
    rng = np.random.default_rng(seed)
    q_pair = QNetworkPair(MlpSpec(env.observation_dim, env.n_actions, settings.q_hidden), rng,
                          settings.ema_tau, settings.double_q)
    model = ModelNetworks(env.observation_dim, env.n_actions, settings.model_hidden, rng)
    restore_agent(q_pair, model, load_checkpoint(checkpoint))

    rows = []
    observation = env.reset()
    for t in range(config.trace_steps):
        action = act(q_pair, observation, ExplorationMode.GREEDY, None)
        result = env.step(action)
        predicted = predict_next_states(model, observation, action)[0]
        row = {'t': t, 'action': action}
        row.update({f'true_{i}': value for i, value in enumerate(result.observation)})
        row.update({f'pred_{i}': value for i, value in enumerate(predicted)})
        rows.append(row)
        if result.done:
            break
        observation = result.observation
    return pd.DataFrame(rows)


def run_control_with_trace(config: RunConfig, job: JobSpec, out_dir: Path) -> JobOutput:
    """:func:`run_control` plus a checkpoint and a prediction trace of the final agent."""
    checkpoint = Path(out_dir) / f'{job.name}.ckpt'
    record = train_agent(cartpole_env(config), job.agent, agent_config(config, job.agent), job.seed,
                         checkpoint_path=checkpoint)
    trace = prediction_trace(config, job.agent, checkpoint, job.seed)
    return JobOutput(record.to_frame(), status=record.status, message=record.message, extras={'trace': trace})


summarise_control = final_values(**{'return': 'eval_return_mean', 'model_mse': 'model_mse'})


EXPERIMENTS: Dict[str, Experiment] = {
    experiment.name: experiment
    for experiment in (
        Experiment('fig3', "Tabular return of OMD and MLE models as the parameter ball radius kappa shrinks.",
                   TABULAR_AGENTS, run_tabular_return, final_values(J='J')),
        Experiment('fig2_right', "Q* approximation errors of MLE and OMD models against their theoretical bounds.",
                   OMD_TABULAR_AGENTS, run_bounds, summarise_bounds),
        Experiment('fig2_left', "Q*-equivalence of a learned tabular model whose dynamics differ from the MDP's.",
                   TABULAR_AGENTS, run_equivalence, summarise_equivalence),
        Experiment('lemma', "Bellman operator gaps of random models against the lemma bound.",
                   ('lemma',), run_lemma, summarise_lemma),
        Experiment('appendix_c', "Tabular OMD returns when the inner fixed point is perturbed by Gaussian noise.",
                   OMD_TABULAR_AGENTS, run_tabular_return, final_values(J='J')),
        Experiment('appendix_e', "CartPole ablations of inner steps, double Q-learning and the inverse Jacobian.",
                   CONTROL_AGENTS, run_control, summarise_control),
        Experiment('fig4', "Model MSE against return at hidden size one, with next-state prediction traces.",
                   CONTROL_AGENTS, run_control_with_trace, summarise_control),
        Experiment('fig5_capacity', "CartPole returns as the model's hidden width shrinks.",
                   CONTROL_AGENTS, run_control, summarise_control),
        Experiment('fig5_distractors', "CartPole returns as Gaussian distractor dimensions are added.",
                   CONTROL_AGENTS, run_control, summarise_control),
        Experiment('cartpole', "A single CartPole training run per agent.",
                   CONTROL_AGENTS, run_control, summarise_control),
    )
}


def get_experiment(name: str) -> Experiment:
    try:
        return EXPERIMENTS[name]
    except KeyError:
        raise KeyError(f"Unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}.") from None
