from dataclasses import dataclass
from typing import List, Sequence
import logging

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates and the number of updates taken."""

    first_moments: List[np.ndarray]
    second_moments: List[np.ndarray]
    count: int = 0


class Adam:
    """
    Bias-corrected adaptive-moment optimiser over lists of NumPy arrays.

    ``init`` builds a zero state for a parameter list and ``update`` returns
    new parameters and a new state without touching its inputs.
    """

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {learning_rate}.")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValidationError(f"Adam betas must lie in [0, 1), got ({beta1}, {beta2}).")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def init(self, params: Sequence[np.ndarray]) -> AdamState:
        return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, ascend: bool = False):
        """
        One descent step (ascent with ``ascend``).

        Returns:
            Tuple[List[np.ndarray], AdamState]: Updated parameters and optimiser state.
        """
        count = state.count + 1
        sign = 1.0 if ascend else -1.0
        first, second, new_params = [], [], []
        for param, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** count)
            v_hat = v / (1.0 - self.beta2 ** count)
            new_params.append(param + sign * self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))
            first.append(m)
            second.append(v)
        return new_params, AdamState(first, second, count)
