from dataclasses import asdict, dataclass, fields
import logging

from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class BoundReport:
    """
    Approximation errors of MLE and OMD models next to their guaranteed bounds.

    All quantities are computed with hard-max operators on rewards shifted by
    ``reward_shift`` so that the true rewards lie in ``[0, r_max]``.

    Attributes:
        eps_p (float): Max L1 distance between true and MLE dynamics rows.
        eps_r (float): Max absolute reward error of the MLE model.
        eps_omd (float): Max gap between the true and the OMD operator at the OMD fixed point.
        q_err_mle (float): Sup-norm distance of the MLE fixed point from ``Q*``.
        q_err_omd (float): Sup-norm distance of the OMD fixed point from ``Q*``.
        bound_mle (float): Guaranteed bound on ``q_err_mle``.
        bound_omd (float): Guaranteed bound on ``q_err_omd``.
        r_max (float): Upper end of the shifted reward range.
        reward_shift (float): Constant added to every reward so the true rewards are non-negative.
    """

    eps_p: float
    eps_r: float
    eps_omd: float
    q_err_mle: float
    q_err_omd: float
    bound_mle: float
    bound_omd: float
    r_max: float
    reward_shift: float = 0.0

    def __post_init__(self):
        for item in fields(self):
            if item.name == 'reward_shift':
                continue
            value = getattr(self, item.name)
            if not value >= 0.0:
                logger.error("BoundReport.%s = %s is negative or NaN.", item.name, value)
                raise ValidationError(f"{item.name} must be >= 0, got {value!r}.")

    @property
    def mle_bound_holds(self) -> bool:
        return self.q_err_mle <= self.bound_mle + BOUND_SLACK

    @property
    def omd_bound_holds(self) -> bool:
        return self.q_err_omd <= self.bound_omd + BOUND_SLACK

    def to_row(self) -> dict:
        """Flat CSV row including the two bound checks."""
        row = asdict(self)
        row['mle_bound_holds'] = self.mle_bound_holds
        row['omd_bound_holds'] = self.omd_bound_holds
        return row


@dataclass(frozen=True)
class EquivalenceReport:
    """Whether a model is ``Q*``-equivalent to the true MDP and how far its dynamics are from deterministic."""

    equivalent: bool
    max_operator_gap: float
    model_deterministic: bool
    mdp_deterministic: bool
    max_dynamics_gap: float
    tol: float

    def to_row(self) -> dict:
        return asdict(self)
