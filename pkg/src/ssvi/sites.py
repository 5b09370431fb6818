"""Per-datapoint Gaussian site approximations N(y_tilde_i | f_i, s2_tilde_i)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# lambda2 is kept at or below -EPS_SITE once a site has been updated
EPS_SITE = 1e-8


@dataclass
class SiteParams:
    """Natural parameters of the sites.

    ``lambda2 == 0`` marks an uninformative site (infinite pseudo-variance);
    otherwise ``lambda2 < 0`` and the pseudo-observation is
    ``y_tilde = -lambda1 / (2 lambda2)`` with variance ``-1 / (2 lambda2)``.
    """

    lambda1: np.ndarray
    lambda2: np.ndarray

    def __post_init__(self):
        self.lambda1 = np.asarray(self.lambda1, dtype=float).copy()
        self.lambda2 = np.asarray(self.lambda2, dtype=float).copy()
        if self.lambda1.shape != self.lambda2.shape or self.lambda1.ndim != 1:
            raise ValueError("lambda1 and lambda2 must be 1-d arrays of equal length")
        if np.any(self.lambda2 > 0) or not np.all(np.isfinite(self.lambda2)):
            raise ValueError("lambda2 must be finite and non-positive")

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_pseudo(cls, y_tilde, var_tilde):
        var_tilde = np.asarray(var_tilde, dtype=float)
        return cls(np.asarray(y_tilde, dtype=float) / var_tilde, -0.5 / var_tilde)

    def __len__(self):
        return len(self.lambda1)

    @property
    def informative(self):
        return self.lambda2 < 0

    @property
    def pseudo_var(self):
        with np.errstate(divide="ignore"):
            return np.where(self.informative, -0.5 / np.where(self.informative, self.lambda2, -1.0), np.inf)

    @property
    def pseudo_y(self):
        l2 = np.where(self.informative, self.lambda2, -1.0)
        return np.where(self.informative, -self.lambda1 / (2.0 * l2), 0.0)

    def copy(self):
        return SiteParams(self.lambda1, self.lambda2)

    def max_change(self, other):
        return float(max(np.max(np.abs(self.lambda1 - other.lambda1), initial=0.0),
                         np.max(np.abs(self.lambda2 - other.lambda2), initial=0.0)))
