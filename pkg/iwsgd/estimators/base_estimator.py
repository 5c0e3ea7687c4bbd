"""
Base class for all gradient estimators.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, Sequence, Tuple

from ..net import NetworkParams
from ..objective import ImportanceWeights, SampleEvaluation, weighted_gradient


class BaseEstimator(ABC):
    """Abstract base class that all gradient estimators must implement."""

    def __init__(self, name: str):
        """Initialize the estimator with a name.

        Args:
            name: The display name of the estimator
        """
        self.name = name
        self.steps = 0
        self.examples = 0
        self.degenerate = 0
        self.objective_total = 0.0
        self.max_weight_total = 0.0

    @abstractmethod
    def weigh(self, log_liks: Sequence[float]) -> Tuple[ImportanceWeights, float]:
        """Weights and objective for the S samples of one example.

        Args:
            log_liks: Per-sample log-likelihoods

        Returns:
            Tuple of (weights, objective)
        """
        pass

    def combine(self, samples: Sequence[SampleEvaluation]) -> Tuple[NetworkParams, ImportanceWeights, float]:
        """Combine the per-sample gradients of one example.

        Args:
            samples: The S evaluations of one example

        Returns:
            Tuple of (gradient, weights, objective)
        """
        weights, objective = self.weigh([s.log_lik for s in samples])
        return weighted_gradient(samples, weights.weights), weights, objective

    def record_step(self, examples: int, mean_objective: float, mean_max_weight: float, degenerate: int) -> None:
        """Record the diagnostics of one training step.

        Args:
            examples: Number of examples in the step
            mean_objective: Mean per-example objective
            mean_max_weight: Mean per-example largest weight
            degenerate: Number of zero-likelihood samples in the step
        """
        self.steps += 1
        self.examples += examples
        self.degenerate += degenerate
        self.objective_total += mean_objective
        self.max_weight_total += mean_max_weight

    def get_stats(self) -> Dict[str, Any]:
        """Get the estimator's running statistics.

        Returns:
            Dictionary of statistics
        """
        return {
            "name": self.name,
            "steps": self.steps,
            "examples": self.examples,
            "degenerate": self.degenerate,
            "mean_objective": self.objective_total / self.steps if self.steps else 0.0,
            "mean_max_weight": self.max_weight_total / self.steps if self.steps else 0.0,
        }

    def __str__(self) -> str:
        """String representation of the estimator."""
        stats = self.get_stats()
        return f"{self.name} (steps: {stats['steps']}, objective: {stats['mean_objective']:.4f}, max weight: {stats['mean_max_weight']:.3f})"
