"""
Dense numeric kernel shared by every other module.

Tensors are float64 numpy arrays in row-major (C) order. All functions here
are pure: they never mutate their inputs and hold no state.
"""

from typing import Sequence, Union

import numpy as np

from .errors import DegenerateLikelihoodError, DimensionError

Tensor = np.ndarray


def as_tensor(data: Union[Sequence, np.ndarray, float], copy: bool = False) -> Tensor:
    """Convert data to a contiguous float64 tensor.

    Args:
        data: Nested sequence, scalar or array
        copy: Force a copy even if data is already a float64 array

    Returns:
        Row-major float64 array
    """
    array = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(array)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] (or [k]) with b [k x n].

    Args:
        a: Left operand, 1-D or 2-D
        b: Right operand, 2-D

    Returns:
        Product tensor

    Raises:
        DimensionError: If the inner dimensions disagree
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply shapes {a.shape} and {b.shape}",
            shapes=(a.shape, b.shape)
        )
    return np.matmul(a, b)


def log_sum_exp(v: Union[Sequence[float], np.ndarray]) -> float:
    """Numerically stable log(sum(exp(v))).

    Args:
        v: Non-empty sequence of floats; entries may be -inf

    Returns:
        log of the sum of exponentials

    Raises:
        DegenerateLikelihoodError: If every entry is -inf
    """
    values = np.asarray(v, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if np.isnan(values).any() or np.isposinf(values).any():
        raise ValueError(f"log_sum_exp requires finite or -inf entries, got {values.tolist()}")
    shift = values.max()
    if shift == -np.inf:
        raise DegenerateLikelihoodError("all log-likelihoods are -inf", log_liks=values.tolist())
    return float(shift + np.log(np.sum(np.exp(values - shift))))


def log_mean_exp(v: Union[Sequence[float], np.ndarray]) -> float:
    """Numerically stable log(mean(exp(v))).

    Equal entries return that entry exactly.
    """
    values = np.asarray(v, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("log_mean_exp of an empty sequence")
    if np.isnan(values).any() or np.isposinf(values).any():
        raise ValueError(f"log_mean_exp requires finite or -inf entries, got {values.tolist()}")
    shift = values.max()
    if shift == -np.inf:
        raise DegenerateLikelihoodError("all log-likelihoods are -inf", log_liks=values.tolist())
    return float(shift + np.log(np.sum(np.exp(values - shift)) / values.size))


def log_softmax(logits: Tensor) -> Tensor:
    """Log-softmax over the last axis.

    Args:
        logits: Finite tensor of shape [n] or [rows x n]

    Returns:
        Tensor of the same shape whose exponentials sum to one along the last axis
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("log_softmax requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis."""
    return np.exp(log_softmax(logits))
