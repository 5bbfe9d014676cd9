from dataclasses import dataclass
from typing import Optional
import logging

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

LINEAR_SOLVERS = ('cg', 'dense')


@dataclass(frozen=True)
class RootSolveConfig:
    """
    Backward-mode options of :func:`autodiff.solvers.root_solve`.

    Attributes:
        use_identity_inverse (bool): Replace ``(df/dw)^-T`` by the identity.
        cg_tol (float): Relative residual target of the transpose-Jacobian solve.
        cg_max_iter (int): Iteration cap of that solve.
        linear_solver (str): ``'cg'`` (matrix-free) or ``'dense'`` (materialises
            ``df/dw`` column by column; meant for small checkable systems).
    """

    use_identity_inverse: bool = True
    cg_tol: float = 1e-10
    cg_max_iter: int = 1000
    linear_solver: str = 'cg'

    def __post_init__(self):
        if not self.cg_tol > 0:
            raise ValidationError(f"cg_tol must be > 0, got {self.cg_tol!r}.")
        if self.cg_max_iter < 1:
            raise ValidationError(f"cg_max_iter must be >= 1, got {self.cg_max_iter!r}.")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValidationError(f"linear_solver must be one of {LINEAR_SOLVERS}, got {self.linear_solver!r}.")

    @classmethod
    def from_settings(cls, use_identity_inverse: Optional[bool] = None) -> 'RootSolveConfig':
        """Build the project default from ``settings.OMD_ROOT_SOLVE``."""
        conf = settings.OMD_ROOT_SOLVE
        identity = conf['USE_IDENTITY_INVERSE'] if use_identity_inverse is None else use_identity_inverse
        return cls(
            use_identity_inverse=bool(identity),
            cg_tol=float(conf['CG_TOL']),
            cg_max_iter=int(conf['CG_MAX_ITER']),
            linear_solver=conf.get('LINEAR_SOLVER', 'cg'),
        )


@dataclass(frozen=True)
class CGResult:
    """Outcome of a conjugate-gradient solve."""

    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
