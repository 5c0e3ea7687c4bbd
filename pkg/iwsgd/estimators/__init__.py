"""
Gradient estimators: how the S per-sample gradients of an example are combined.
"""

from .base_estimator import BaseEstimator
from .dropout_estimator import DropoutEstimator
from .iwsgd_estimator import IWSGDEstimator

ESTIMATORS = {
    "iwsgd": IWSGDEstimator,
    "dropout": DropoutEstimator,
}


def create_estimator(kind: str) -> BaseEstimator:
    """Create an estimator by its configuration name.

    Args:
        kind: "iwsgd" or "dropout"

    Returns:
        Instantiated estimator
    """
    try:
        return ESTIMATORS[kind]()
    except KeyError:
        raise ValueError(f"Unknown estimator type: {kind}") from None
