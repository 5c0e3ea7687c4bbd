"""
Conventional dropout estimator: an unweighted mean over noise samples.
"""

from typing import Sequence, Tuple

import numpy as np

from ..errors import DegenerateLikelihoodError
from ..objective import ImportanceWeights
from .base_estimator import BaseEstimator


class DropoutEstimator(BaseEstimator):
    """Averages per-sample gradients uniformly. Identical to IWSGD when S=1.

    The reported objective is the mean log-likelihood, i.e. the one-sample
    bound estimated from S samples.
    """

    def __init__(self, name: str = "Dropout"):
        super().__init__(name)

    def weigh(self, log_liks: Sequence[float]) -> Tuple[ImportanceWeights, float]:
        values = np.asarray(log_liks, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("weigh needs a non-empty 1-D sequence")
        if np.all(values == -np.inf):
            raise DegenerateLikelihoodError("all log-likelihoods are -inf", log_liks=values.tolist())
        weights = np.full(values.size, 1.0 / values.size)
        return ImportanceWeights(weights), float(np.mean(values))
