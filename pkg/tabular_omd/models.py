from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple
import logging

import pandas as pd

from mdp_core.models import QTable, TabularModelParams

logger = logging.getLogger(__name__)


class TabularAgentKind(str, Enum):
    """How a tabular model is fitted."""

    OMD_RETURN = 'omd_return'
    OMD_BELLMAN = 'omd_bellman'
    MLE = 'mle'

    @classmethod
    def parse(cls, value) -> 'TabularAgentKind':
        """Accept enum members, values (``'omd_return'``) or names (``'OMD_RETURN'``)."""
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            return cls[str(value).upper()]


@dataclass(frozen=True)
class ObjectiveGradient:
    """An objective value, its gradient with respect to the model, and the fixed point it was taken at."""

    objective: float
    gradient: TabularModelParams
    q_star: QTable


@dataclass
class TabularTrainResult:
    """
    Outcome of :func:`tabular_omd.training.train_tabular`.

    All curves hold ``(step, value)`` pairs for steps ``0..steps``: the initial
    parameters followed by every projected update.
    """

    theta_final: TabularModelParams
    q_final: QTable
    j_curve: List[Tuple[int, float]] = field(default_factory=list)
    kl_curve: List[Tuple[int, float]] = field(default_factory=list)
    norm_curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def final_return(self) -> float:
        return self.j_curve[-1][1]

    def to_frame(self) -> pd.DataFrame:
        """Rows ``step, J, avg_kl, theta_norm``, one per recorded step."""
        return pd.DataFrame({
            'step': [step for step, _ in self.j_curve],
            'J': [value for _, value in self.j_curve],
            'avg_kl': [value for _, value in self.kl_curve],
            'theta_norm': [value for _, value in self.norm_curve],
        })

    def __str__(self) -> str:
        return f"TabularTrainResult(steps={len(self.j_curve) - 1}, final J={self.final_return:.6f})"
