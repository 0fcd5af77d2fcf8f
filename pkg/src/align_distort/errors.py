"""Exception types raised by the solvers."""
from __future__ import annotations

import numpy as np


class ConvergenceError(RuntimeError):
    """A solver stopped before meeting its tolerance.

    ``best`` holds the best iterate found and ``residual`` its certificate value.
    """

    def __init__(self, message: str, residual: float = float("nan"), best=None):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = float(residual)
        self.best = None if best is None else np.asarray(best)


class SeparableDataError(ValueError):
    """Bradley-Terry MLE does not exist: some set never loses to its complement."""

    def __init__(self, alternatives):
        self.alternatives = sorted(int(a) for a in alternatives)
        super().__init__(
            f"alternatives {self.alternatives} never lose to the rest; the unregularized "
            "MLE diverges (retry with ridge > 0)")


class BracketError(RuntimeError):
    """Bisection endpoints do not bracket the target."""

    def __init__(self, message: str, kl_low: float, kl_high: float):
        super().__init__(f"{message}: KL at bracket ends {kl_low:.6g}, {kl_high:.6g}")
        self.kl_low = kl_low
        self.kl_high = kl_high
