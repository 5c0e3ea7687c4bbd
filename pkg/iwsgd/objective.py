"""
Likelihood aggregation over noise samples.

Implements the S-sample objective log (1/S) sum_i p_i, the importance weights
p_i / sum_j p_j, the importance-weighted gradient combiner, and oracles for
the marginal likelihood and the S-sample bound: exact enumeration of
Bernoulli masks for tiny networks and plain Monte Carlo otherwise.

All likelihood arithmetic is done in the log domain with max-shifting.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError, DegenerateLikelihoodError, DimensionError, UnsupportedModeError
from .ndcore import Tensor, log_mean_exp, log_sum_exp
from .net import (
    NetworkParams,
    NetworkSpec,
    NoiseDraw,
    NoiseMode,
    NoiseSpec,
    Phase,
    forward,
    log_likelihood,
    sample_draws,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_UNITS = 22
DEFAULT_TUPLE_LIMIT = 2 ** 24
MC_CHUNK_ROWS = 65536
DEGENERATE_ABORT_FRACTION = 0.01


@dataclass
class SampleEvaluation:
    """Log-likelihood and parameter gradient of one (example, noise sample)."""

    log_lik: float
    grad: NetworkParams
    draw_id: Optional[Tuple[int, ...]] = None


@dataclass
class ImportanceWeights:
    """Normalized likelihoods of the S samples of one example."""

    weights: Tensor

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def max_weight(self) -> float:
        return float(np.max(self.weights))


@dataclass
class BoundEstimate:
    """Monte Carlo estimate with its standard error.

    Attributes:
        value: Mean over replicates
        std_error: Sample standard deviation / sqrt(n_outer)
        n_outer: Number of replicates kept
        samples: Noise samples per replicate (S)
        degenerate: Replicates dropped because every sample had zero likelihood
    """

    value: float
    std_error: float
    n_outer: int
    samples: int
    degenerate: int = 0


def importance_weights(log_liks: Sequence[float]) -> ImportanceWeights:
    """Normalized likelihood of each sample.

    Args:
        log_liks: log p(y | x, eps_i) for the S samples of one example

    Returns:
        Weights on the simplex

    Raises:
        DegenerateLikelihoodError: If every entry is -inf
    """
    values = np.asarray(log_liks, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("importance_weights needs a non-empty 1-D sequence")
    normalizer = log_sum_exp(values)
    return ImportanceWeights(np.exp(values - normalizer))


def lsgd_inner(log_liks: Sequence[float]) -> float:
    """log of the mean likelihood over the S samples of one example."""
    return log_mean_exp(log_liks)


def weighted_gradient(samples: Sequence[SampleEvaluation], weights: Tensor) -> NetworkParams:
    """sum_i weights[i] * samples[i].grad, accumulated in sample order.

    Args:
        samples: Per-sample evaluations with congruent gradients
        weights: One weight per sample

    Returns:
        The combined gradient
    """
    if not samples:
        raise ValueError("no samples to combine")
    template = samples[0].grad
    for i, sample in enumerate(samples[1:], start=1):
        if not sample.grad.is_congruent(template):
            raise DimensionError(
                f"sample {i} gradient shapes {sample.grad.shapes()} differ from {template.shapes()}",
                shapes=tuple(template.shapes())
            )
    total = weights[0] * template.flat()
    for weight, sample in zip(weights[1:], samples[1:]):
        total = total + weight * sample.grad.flat()
    return template.with_flat(total)


def iwsgd_combine(samples: Sequence[SampleEvaluation]) -> Tuple[NetworkParams, ImportanceWeights, float]:
    """Importance-weighted average of per-sample gradients.

    Args:
        samples: The S evaluations of one example

    Returns:
        Tuple of (gradient, weights, objective) where objective is lsgd_inner
        of the samples' log-likelihoods
    """
    log_liks = [s.log_lik for s in samples]
    weights = importance_weights(log_liks)
    gradient = weighted_gradient(samples, weights.weights)
    return gradient, weights, lsgd_inner(log_liks)


def _resolve(spec: NetworkSpec, noise_spec: Optional[NoiseSpec]) -> NetworkSpec:
    return spec if noise_spec is None else spec.with_noise(noise_spec)


def _rows(x: Tensor, n: int) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(np.broadcast_to(x, (n, x.shape[-1])))


def block_log_likelihoods(spec: NetworkSpec, params: NetworkParams, x: Tensor, y: int, draw: NoiseDraw) -> Tensor:
    """Log-likelihood of one example under each row of a block draw."""
    rows = next(iter(draw.eps.values())).shape[0] if draw.eps else 1
    trace = forward(spec, params, _rows(x, rows), draw, Phase.TRAIN)
    return np.atleast_1d(log_likelihood(trace, y))


def _keep_probs(spec: NetworkSpec) -> Tensor:
    """Keep probability of every noise unit, in layer order."""
    widths = [np.full(spec.width(i), layer.spec.keep_prob) for i, layer in spec.noise_layers]
    return np.concatenate(widths) if widths else np.zeros(0)


def _mask_table(spec: NetworkSpec, params: NetworkParams, x: Tensor, y: int, max_units: int) -> Tuple[Tensor, Tensor]:
    """Probability and log-likelihood of every mask with non-zero probability.

    Units with keep_prob == 1 are pinned to 1; the remaining units are
    enumerated in binary order.
    """
    noise_layers = spec.noise_layers
    for index, layer in noise_layers:
        if layer.spec.mode is not NoiseMode.BERNOULLI:
            raise UnsupportedModeError(f"layer {index}: exact enumeration supports bernoulli noise only")
    k = spec.noise_unit_count
    keep = _keep_probs(spec)
    free = np.flatnonzero(keep < 1.0)
    if len(free) > max_units:
        raise CapacityError(
            f"{len(free)} dropout units exceed the enumeration limit of {max_units}",
            required=len(free),
            limit=max_units
        )

    count = 2 ** len(free)
    offsets = np.cumsum([0] + [spec.width(i) for i, _ in noise_layers])

    probs = np.empty(count)
    log_liks = np.empty(count)
    for start in range(0, count, MC_CHUNK_ROWS):
        codes = np.arange(start, min(start + MC_CHUNK_ROWS, count))
        masks = np.ones((codes.size, k))
        bits = (codes[:, None] >> np.arange(len(free))[None, :]) & 1
        masks[:, free] = bits
        log_prob = np.sum(np.where(bits == 1, np.log(keep[free]), np.log1p(-keep[free])), axis=1)
        eps = {
            index: np.ascontiguousarray(masks[:, offsets[j]:offsets[j + 1]])
            for j, (index, _) in enumerate(noise_layers)
        }
        probs[codes] = np.exp(log_prob)
        log_liks[codes] = block_log_likelihoods(spec, params, x, y, NoiseDraw(eps))
    return probs, log_liks


def marginal_exact(
    spec: NetworkSpec,
    params: NetworkParams,
    x: Tensor,
    y: int,
    noise_spec: Optional[NoiseSpec] = None,
    max_units: int = DEFAULT_MAX_UNITS
) -> float:
    """log sum_masks Pr(mask) p(y | x, mask) by exhaustive enumeration.

    Args:
        spec: Network spec; all noise layers must be bernoulli
        params: Parameters
        x: Single input
        y: Class index
        noise_spec: If given, overrides every noise layer
        max_units: Largest number of dropout units enumerated

    Returns:
        The exact marginal log-likelihood

    Raises:
        CapacityError: Too many dropout units
        UnsupportedModeError: A noise layer is gaussian
    """
    probs, log_liks = _mask_table(_resolve(spec, noise_spec), params, x, y, max_units)
    shift = np.max(log_liks)
    if shift == -np.inf:
        raise DegenerateLikelihoodError("every mask has zero likelihood", log_liks=log_liks.tolist())
    scaled = np.exp(log_liks - shift)
    return float(shift + np.log(np.sum(probs * scaled) / np.sum(probs)))


def lsgd_exact(
    spec: NetworkSpec,
    params: NetworkParams,
    x: Tensor,
    y: int,
    noise_spec: Optional[NoiseSpec] = None,
    samples: int = 1,
    tuple_limit: int = DEFAULT_TUPLE_LIMIT,
    max_units: int = DEFAULT_MAX_UNITS
) -> float:
    """Exact expectation of lsgd_inner over iid S-tuples of masks.

    Args:
        spec: Network spec; all noise layers must be bernoulli
        params: Parameters
        x: Single input
        y: Class index
        noise_spec: If given, overrides every noise layer
        samples: Tuple size S
        tuple_limit: Largest number of tuples enumerated
        max_units: Largest number of dropout units enumerated

    Returns:
        E[log (1/S) sum_i p(y | x, mask_i)]
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    resolved = _resolve(spec, noise_spec)
    k = int(np.sum(_keep_probs(resolved) < 1.0))
    if k <= max_units and (2 ** k) ** samples > tuple_limit:
        raise CapacityError(
            f"(2^{k})^{samples} mask tuples exceed the limit of {tuple_limit}",
            required=(2 ** k) ** samples,
            limit=tuple_limit
        )
    probs, log_liks = _mask_table(resolved, params, x, y, max_units)
    shift = np.max(log_liks)
    if shift == -np.inf:
        raise DegenerateLikelihoodError("every mask has zero likelihood", log_liks=log_liks.tolist())
    scaled = np.exp(log_liks - shift)
    count = scaled.size

    total = 0.0
    mass = 0.0
    if samples == 1:
        total = np.sum(probs * np.log(scaled))
        mass = np.sum(probs)
    else:
        pair_sum = scaled[:, None] + scaled[None, :]
        pair_prob = probs[:, None] * probs[None, :]
        for prefix in itertools.product(range(count), repeat=samples - 2):
            prefix_sum = 0.0
            prefix_prob = 1.0
            for i in prefix:
                prefix_sum += scaled[i]
                prefix_prob *= probs[i]
            grid_prob = prefix_prob * pair_prob
            total += np.sum(grid_prob * np.log((prefix_sum + pair_sum) / samples))
            mass += np.sum(grid_prob)
    return float(shift + total / mass)


def _replicate_inner(log_liks: Tensor) -> Tuple[Tensor, Tensor]:
    """Row-wise lsgd_inner of an [n x S] array; returns (values, degenerate mask)."""
    shift = log_liks.max(axis=1)
    degenerate = shift == -np.inf
    safe_shift = np.where(degenerate, 0.0, shift)
    values = safe_shift + np.log(np.sum(np.exp(log_liks - safe_shift[:, None]), axis=1) / log_liks.shape[1])
    return values, degenerate


def _summarize(values: Tensor, samples: int, degenerate: int) -> BoundEstimate:
    n = values.size
    if np.all(values == values[0]):
        return BoundEstimate(float(values[0]), 0.0, n, samples, degenerate)
    return BoundEstimate(float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n)), n, samples, degenerate)


def lsgd_mc(
    spec: NetworkSpec,
    params: NetworkParams,
    x: Tensor,
    y: int,
    noise_spec: Optional[NoiseSpec] = None,
    samples: int = 1,
    n_outer: int = 1000,
    rng: Optional[np.random.Generator] = None
) -> BoundEstimate:
    """Monte Carlo estimate of the S-sample bound.

    Args:
        spec: Network spec (bernoulli or gaussian noise)
        params: Parameters
        x: Single input
        y: Class index
        noise_spec: If given, overrides every noise layer
        samples: Noise samples per replicate (S)
        n_outer: Number of independent replicates
        rng: Generator for the draws

    Returns:
        BoundEstimate over the non-degenerate replicates

    Raises:
        DegenerateLikelihoodError: If more than 1% of replicates are degenerate
    """
    if n_outer < 2:
        raise ValueError(f"n_outer must be >= 2, got {n_outer}")
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    resolved = _resolve(spec, noise_spec)
    rng = rng if rng is not None else np.random.default_rng()

    per_chunk = max(1, MC_CHUNK_ROWS // samples)
    chunks: List[Tensor] = []
    degenerate = 0
    for start in range(0, n_outer, per_chunk):
        n = min(per_chunk, n_outer - start)
        draw = sample_draws(resolved, rng, n * samples)
        log_liks = block_log_likelihoods(resolved, params, x, y, draw).reshape(n, samples)
        values, bad = _replicate_inner(log_liks)
        degenerate += int(bad.sum())
        chunks.append(values[~bad])

    if degenerate > DEGENERATE_ABORT_FRACTION * n_outer:
        raise DegenerateLikelihoodError(f"{degenerate} of {n_outer} replicates have zero likelihood")
    if degenerate:
        logger.warning("lsgd_mc dropped %d degenerate replicates out of %d", degenerate, n_outer)
    return _summarize(np.concatenate(chunks), samples, degenerate)


def marginal_mc(
    spec: NetworkSpec,
    params: NetworkParams,
    x: Tensor,
    y: int,
    noise_spec: Optional[NoiseSpec] = None,
    n_draws: int = 100000,
    rng: Optional[np.random.Generator] = None
) -> BoundEstimate:
    """Monte Carlo estimate of the marginal log-likelihood.

    The value is the log of the mean likelihood over n_draws draws; the
    standard error is that of the mean likelihood divided by the mean
    (delta method).
    """
    if n_draws < 2:
        raise ValueError(f"n_draws must be >= 2, got {n_draws}")
    resolved = _resolve(spec, noise_spec)
    rng = rng if rng is not None else np.random.default_rng()

    parts = []
    for start in range(0, n_draws, MC_CHUNK_ROWS):
        n = min(MC_CHUNK_ROWS, n_draws - start)
        parts.append(block_log_likelihoods(resolved, params, x, y, sample_draws(resolved, rng, n)))
    log_liks = np.concatenate(parts)
    shift = np.max(log_liks)
    if shift == -np.inf:
        raise DegenerateLikelihoodError("every draw has zero likelihood")
    scaled = np.exp(log_liks - shift)
    mean = np.mean(scaled)
    std_error = np.std(scaled, ddof=1) / np.sqrt(n_draws) / mean
    return BoundEstimate(float(shift + np.log(mean)), float(std_error), n_draws, 1)
