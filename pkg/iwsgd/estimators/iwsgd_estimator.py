"""
Importance weighted estimator: samples are weighted by their normalized likelihood.
"""

from typing import Sequence, Tuple

from ..net import NetworkParams
from ..objective import ImportanceWeights, SampleEvaluation, importance_weights, iwsgd_combine, lsgd_inner
from .base_estimator import BaseEstimator


class IWSGDEstimator(BaseEstimator):
    """Weights each sample's gradient by p_i / sum_j p_j and optimizes the S-sample bound."""

    def __init__(self, name: str = "IWSGD"):
        super().__init__(name)

    def weigh(self, log_liks: Sequence[float]) -> Tuple[ImportanceWeights, float]:
        return importance_weights(log_liks), lsgd_inner(log_liks)

    def combine(self, samples: Sequence[SampleEvaluation]) -> Tuple[NetworkParams, ImportanceWeights, float]:
        return iwsgd_combine(samples)
