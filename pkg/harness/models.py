from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from typing import Any, Dict, List, Optional, Tuple
import logging

import pandas as pd

logger = logging.getLogger(__name__)

# Fields that describe the run as a whole and can never be swept.
FIXED_FIELDS = ('experiment', 'agents', 'seeds', 'sweep')
TUPLE_FIELDS = ('agents', 'seeds', 'q_hidden', 'model_hidden')

FAST_TOTAL_STEPS = 60_000
FAST_SEED_COUNT = 3


@dataclass
class RunConfig:
    """
    Everything needed to run one named experiment.

    Scalar fields are the base point; ``sweep`` maps field names to grids whose
    cartesian product defines the cells of the experiment. Every cell is run for
    every agent and every seed.

    Tabular experiments read ``env`` (``'default'``, ``'random'`` or an MDP file),
    ``kappa``, ``learning_rate``, ``tabular_steps`` and ``inner_noise_sigma``; the
    discount of a tabular run is the MDP's own. CartPole experiments read the
    network, buffer and schedule fields; ``model_width``, when set, overrides the
    width of every hidden layer of the model.
    """

    experiment: str
    agents: Tuple[str, ...]
    env: str = 'cartpole'
    seeds: Tuple[int, ...] = (0,)
    sweep: Dict[str, List[Any]] = field(default_factory=dict)

    # Shared by both settings.
    gamma: float = 0.99
    alpha: float = 0.01
    use_identity_inverse: bool = True

    # Tabular runs.
    n_states: int = 5
    n_actions: int = 3
    kappa: float = 1.0
    learning_rate: float = 0.1
    tabular_steps: int = 1000
    inner_noise_sigma: float = 0.0
    equivalence_tol: float = 1e-2
    n_pairs: int = 100
    r_max: float = 1.0

    # Function approximation runs.
    total_steps: int = 200_000
    q_hidden: Tuple[int, ...] = (32, 32)
    model_hidden: Tuple[int, ...] = (32, 32)
    model_width: Optional[int] = None
    q_learning_rate: float = 1e-3
    model_learning_rate: float = 1e-3
    batch_size: int = 256
    buffer_capacity: int = 100_000
    ema_tau: float = 0.01
    inner_steps: int = 1
    warmup_steps: int = 1_000
    eval_interval: int = 5_000
    eval_episodes: int = 10
    exploration: str = 'epsilon_greedy'
    epsilon: float = 0.1
    double_q: bool = True
    n_vep_value_fns: int = 5
    n_distractors: int = 0
    trace_steps: int = 200

    def __post_init__(self):
        for name in TUPLE_FIELDS:
            setattr(self, name, tuple(getattr(self, name)))
        self.sweep = {key: list(values) for key, values in self.sweep.items()}

    @classmethod
    def field_names(cls) -> List[str]:
        return [item.name for item in fields(cls)]

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'RunConfig':
        """Validate ``payload`` and build the config; see :func:`harness.serializers.parse_run_config`."""
        from .serializers import parse_run_config

        return parse_run_config(payload)

    def to_dict(self) -> Dict[str, Any]:
        """Plain YAML/JSON-friendly mapping; tuples become lists."""
        payload = asdict(self)
        for name in TUPLE_FIELDS:
            payload[name] = list(payload[name])
        payload['sweep'] = {key: [list(v) if isinstance(v, tuple) else v for v in values]
                            for key, values in self.sweep.items()}
        return payload

    def cells(self) -> List[Dict[str, Any]]:
        """Cartesian product of the sweep grids, in declaration order; one empty cell without a sweep."""
        keys = list(self.sweep)
        return [dict(zip(keys, values)) for values in product(*(self.sweep[key] for key in keys))]

    def at(self, cell: Dict[str, Any]) -> 'RunConfig':
        """The config of one sweep cell: the base point with the cell's values and no sweep."""
        return replace(self, sweep={}, **cell)

    def fast(self) -> 'RunConfig':
        """Desk-scale profile: at most 60k environment steps and the first three seeds."""
        total_steps = min(self.total_steps, FAST_TOTAL_STEPS)
        return replace(
            self,
            total_steps=total_steps,
            eval_interval=min(self.eval_interval, total_steps),
            seeds=self.seeds[:FAST_SEED_COUNT],
        )

    def __str__(self) -> str:
        return (f"RunConfig({self.experiment}: agents={list(self.agents)}, seeds={list(self.seeds)}, "
                f"cells={len(self.cells())})")


def format_cell_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return '-'.join(str(item) for item in value)
    return str(value)


@dataclass
class JobSpec:
    """One (sweep cell, agent, seed) unit of work."""

    experiment: str
    agent: str
    seed: int
    cell: Dict[str, Any] = field(default_factory=dict)

    @property
    def cell_label(self) -> str:
        if not self.cell:
            return 'base'
        return '_'.join(f"{key}={format_cell_value(value)}" for key, value in self.cell.items())

    @property
    def name(self) -> str:
        """File stem of the job's outputs, unique within an experiment."""
        return f"{self.experiment}__{self.cell_label}__{self.agent}__seed{self.seed}"

    def to_dict(self) -> Dict[str, Any]:
        return {'experiment': self.experiment, 'agent': self.agent, 'seed': self.seed, 'cell': dict(self.cell)}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'JobSpec':
        return cls(payload['experiment'], payload['agent'], int(payload['seed']), dict(payload.get('cell', {})))


@dataclass
class JobOutput:
    """What an experiment runner hands back for one job."""

    frame: pd.DataFrame
    status: str = 'ok'
    message: Optional[str] = None
    extras: Dict[str, pd.DataFrame] = field(default_factory=dict)


@dataclass
class JobRecord:
    """
    Metadata of one finished (or failed) job, as stored in its sidecar.

    ``summary`` holds the per-job metric values that :func:`harness.utils.aggregate`
    averages over seeds.
    """

    job: JobSpec
    config_hash: str
    status: str
    summary: Dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    message: Optional[str] = None
    code_version: str = ''
    timestamp: str = ''

    def to_meta(self) -> Dict[str, Any]:
        return {
            'kind': 'job',
            **self.job.to_dict(),
            'config_hash': self.config_hash,
            'status': self.status,
            'summary': dict(self.summary),
            'wall_clock': self.wall_clock,
            'message': self.message,
            'code_version': self.code_version,
            'timestamp': self.timestamp,
        }

    @classmethod
    def from_meta(cls, meta: Dict[str, Any]) -> 'JobRecord':
        return cls(
            job=JobSpec.from_dict(meta),
            config_hash=meta['config_hash'],
            status=meta['status'],
            summary={key: float(value) for key, value in meta.get('summary', {}).items()},
            wall_clock=float(meta.get('wall_clock', 0.0)),
            message=meta.get('message'),
            code_version=meta.get('code_version', ''),
            timestamp=meta.get('timestamp', ''),
        )
