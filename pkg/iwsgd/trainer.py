"""
Training loop for networks with noise layers.

Each update draws S noise samples per example (mini-batch replication),
evaluates all (example, sample) rows in one block against a fixed parameter
snapshot, combines the S gradients of an example with the configured
estimator, averages the combined gradients over the batch and takes a momentum
SGD step.

Noise generation may run on a thread pool. Every draw comes from its own
counter-based stream, the block layout is fixed by the batch and the reduction
runs in example order, so the result does not depend on the number of workers.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, Split
from .errors import BudgetExhaustedError, DegenerateLikelihoodError
from .estimators import BaseEstimator, create_estimator
from .ndcore import Tensor, log_softmax
from .net import (
    NetworkParams,
    NetworkSpec,
    NoiseDraw,
    NoiseSpec,
    Phase,
    backward_rows,
    backward_weighted,
    concat_draws,
    forward,
    init_params,
    log_likelihood,
    sample_draw_block,
)
from .objective import SampleEvaluation
from .rng import SHUFFLE_STREAM, DrawCoordinates, stream

logger = logging.getLogger(__name__)


class BudgetKind(str, Enum):
    UPDATES = "updates"
    FORWARD_PASSES = "forward_passes"


class GradientMode(str, Enum):
    PER_SAMPLE = "per_sample"
    WEIGHTED_BACKWARD = "weighted_backward"


@dataclass(frozen=True)
class Budget:
    """Compute budget, counted either in updates or in forward passes."""

    kind: BudgetKind
    amount: int

    def __post_init__(self):
        object.__setattr__(self, "kind", BudgetKind(self.kind))
        if self.amount < 0:
            raise ValueError(f"budget must be >= 0, got {self.amount}")

    def max_updates(self, passes_per_update: int) -> int:
        if self.kind is BudgetKind.UPDATES:
            return self.amount
        return self.amount // passes_per_update


@dataclass
class TrainConfig:
    """Everything needed to run one training job.

    The noise spec is applied to every noise layer of the network.
    """

    network: NetworkSpec
    noise: NoiseSpec
    samples: int
    learning_rate: float
    budget: Budget
    master_seed: int
    eval_every: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    estimator: str = "iwsgd"
    gradient_mode: GradientMode = GradientMode.PER_SAMPLE
    lr_decay_every: int = 0
    lr_decay_factor: float = 1.0

    def __post_init__(self):
        self.network = self.network.with_noise(self.noise)
        self.gradient_mode = GradientMode(self.gradient_mode)
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive")

    @property
    def passes_per_update(self) -> int:
        return self.batch_size * self.samples

    def learning_rate_at(self, step: int) -> float:
        """Step-decayed learning rate for a 0-based update index."""
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_every)


@dataclass
class TrainState:
    """Mutable optimizer state threaded through train_step.

    Attributes:
        velocity: Momentum buffer (flat), None before the first update
        step: Updates taken so far
        forward_passes: Forward (and backward) passes consumed so far
        epoch: Epoch of the next batch (draw coordinate)
        batch_index: Index of the next batch within its epoch (draw coordinate)
    """

    velocity: Optional[Tensor] = None
    step: int = 0
    forward_passes: int = 0
    epoch: int = 0
    batch_index: int = 0


@dataclass
class StepReport:
    step: int
    mean_objective: float
    mean_max_weight: float
    degenerate_count: int
    wall_ms: float
    forward_passes: int


@dataclass
class MetricsRow:
    """One line of the metrics CSV; fields that do not apply are None."""

    step: int
    split: str
    nll: Optional[float] = None
    error_rate: Optional[float] = None
    lsgd_estimate: Optional[float] = None
    mean_max_weight: Optional[float] = None
    degenerate_count: Optional[int] = None
    wall_ms: Optional[float] = None


@dataclass
class _ExampleResult:
    gradient: Optional[Tensor]
    weights: Tensor
    objective: float
    max_weight: float
    degenerate: int


def evaluate(params: NetworkParams, split: Split, config: TrainConfig) -> Tuple[float, float]:
    """Mean negative log-likelihood and error rate in inference phase.

    A single deterministic forward pass over the split; no sampling.

    Args:
        params: Parameters
        split: Examples to score
        config: Training configuration (supplies the network)

    Returns:
        Tuple of (mean NLL, error rate)
    """
    if len(split) == 0:
        return float("nan"), float("nan")
    trace = forward(config.network, params, split.features, None, Phase.INFERENCE)
    log_probs = log_softmax(trace.logits)
    rows = np.arange(len(split))
    nll = -float(np.mean(log_probs[rows, split.labels]))
    # argmax returns the first maximum, so ties go to the lowest class index
    predictions = np.argmax(trace.logits, axis=1)
    error_rate = float(np.mean(predictions != split.labels))
    return nll, error_rate


class Trainer:
    """Runs IWSGD (or conventional dropout) training for one configuration."""

    def __init__(
        self,
        config: TrainConfig,
        estimator: Optional[BaseEstimator] = None,
        workers: int = 1,
        record_wall_time: bool = False
    ):
        """Initialize the trainer.

        Args:
            config: Training configuration
            estimator: Gradient estimator; defaults to the one named in config
            workers: Number of threads evaluating examples within a step
            record_wall_time: Put measured step times in the metrics rows
                instead of zeros
        """
        self.config = config
        self.estimator = estimator or create_estimator(config.estimator)
        self.workers = max(1, int(workers))
        self.record_wall_time = record_wall_time
        self._pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        self.state: Optional[TrainState] = None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self) -> "Trainer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def draw_coordinates(self, state: TrainState, example_index: int, sample_index: int) -> DrawCoordinates:
        return DrawCoordinates(
            self.config.master_seed,
            state.epoch,
            state.batch_index,
            example_index,
            sample_index,
        )

    def _example_draws(self, state: TrainState, example_index: int) -> NoiseDraw:
        return sample_draw_block(self.config.network, self.draw_coordinates(state, example_index, 0), self.config.samples)

    def _combine_example(
        self,
        state: TrainState,
        example_index: int,
        log_liks: Tensor,
        grads: Optional[List[NetworkParams]],
        coordinates: Sequence[DrawCoordinates]
    ) -> _ExampleResult:
        try:
            if grads is None:
                weights, objective = self.estimator.weigh(log_liks)
                gradient = None
            else:
                samples = [
                    SampleEvaluation(float(ll), g, c.as_tuple())
                    for ll, g, c in zip(log_liks, grads, coordinates)
                ]
                combined, weights, objective = self.estimator.combine(samples)
                gradient = combined.flat()
        except DegenerateLikelihoodError as e:
            raise DegenerateLikelihoodError(
                "all noise samples have zero likelihood",
                log_liks=e.log_liks,
                example_index=example_index,
                step=state.step
            ) from e
        return _ExampleResult(gradient, weights.weights, objective, weights.max_weight, int(np.sum(log_liks == -np.inf)))

    def train_step(
        self,
        params: NetworkParams,
        batch: Sequence[Tuple[Tensor, int]],
        state: TrainState
    ) -> Tuple[NetworkParams, StepReport]:
        """Take one update on a batch.

        The state's epoch and batch_index select the noise draws; velocity,
        step and forward_passes are advanced in place. All batch_size * S
        (example, sample) rows go through one forward and one backward pass.

        Args:
            params: Current parameters (not modified)
            batch: Sequence of (x, y) pairs
            state: Optimizer state

        Returns:
            Tuple of (new params, step report)

        Raises:
            BudgetExhaustedError: The step would overrun the budget
            DegenerateLikelihoodError: Some example has zero likelihood under every sample
        """
        config = self.config
        spec = config.network
        S = config.samples
        if not batch:
            raise ValueError("train_step needs a non-empty batch")
        passes = len(batch) * S
        budget = config.budget
        if budget.kind is BudgetKind.UPDATES and state.step >= budget.amount:
            raise BudgetExhaustedError(f"update budget of {budget.amount} exhausted")
        if budget.kind is BudgetKind.FORWARD_PASSES and state.forward_passes + passes > budget.amount:
            raise BudgetExhaustedError(
                f"{passes} more forward passes would exceed the budget of {budget.amount} "
                f"({state.forward_passes} used)"
            )

        start = time.perf_counter()
        examples = range(len(batch))
        if self._pool is None:
            blocks = [self._example_draws(state, i) for i in examples]
        else:
            blocks = list(self._pool.map(lambda i: self._example_draws(state, i), examples))
        draw = concat_draws(blocks)

        features = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
        labels = np.array([int(y) for _, y in batch])
        rows = np.repeat(features, S, axis=0)
        row_labels = np.repeat(labels, S)
        trace = forward(spec, params, rows, draw, Phase.TRAIN)
        log_liks = log_likelihood(trace, row_labels).reshape(len(batch), S)

        per_sample = config.gradient_mode is GradientMode.PER_SAMPLE
        row_grads = backward_rows(spec, params, trace, row_labels) if per_sample else None
        results = [
            self._combine_example(
                state,
                i,
                log_liks[i],
                None if row_grads is None else row_grads[i * S:(i + 1) * S],
                draw.coordinates[i * S:(i + 1) * S]
            )
            for i in examples
        ]

        if per_sample:
            total = results[0].gradient
            for result in results[1:]:
                total = total + result.gradient
        else:
            weights = np.concatenate([r.weights for r in results])
            total = backward_weighted(spec, params, trace, row_labels, weights).flat()
        loss_gradient = -(total / len(results))

        flat = params.flat()
        velocity = state.velocity if state.velocity is not None else np.zeros_like(flat)
        velocity = config.momentum * velocity + loss_gradient
        lr = config.learning_rate_at(state.step)
        new_params = params.with_flat(flat - lr * velocity - lr * config.weight_decay * flat)

        state.velocity = velocity
        state.step += 1
        state.forward_passes += passes
        wall_ms = (time.perf_counter() - start) * 1000.0

        report = StepReport(
            step=state.step,
            mean_objective=float(np.mean([r.objective for r in results])),
            mean_max_weight=float(np.mean([r.max_weight for r in results])),
            degenerate_count=sum(r.degenerate for r in results),
            wall_ms=wall_ms,
            forward_passes=state.forward_passes,
        )
        self.estimator.record_step(len(results), report.mean_objective, report.mean_max_weight, report.degenerate_count)
        logger.debug(
            "step %d objective=%.6f max_weight=%.4f degenerate=%d wall_ms=%.2f",
            report.step, report.mean_objective, report.mean_max_weight, report.degenerate_count, wall_ms
        )
        return new_params, report

    def train(
        self,
        dataset: Dataset,
        params: Optional[NetworkParams] = None,
        on_step: Optional[Callable[[StepReport], None]] = None
    ) -> Tuple[NetworkParams, List[MetricsRow]]:
        """Train until the budget is exhausted.

        Args:
            dataset: Dataset with train/validation/test splits
            params: Starting parameters; seeded initialization if None
            on_step: Optional callback receiving each step report

        Returns:
            Tuple of (final params, metrics series)
        """
        config = self.config
        if dataset.dim != config.network.input_dim:
            raise ValueError(f"dataset width {dataset.dim} does not match network input {config.network.input_dim}")
        if dataset.num_classes != config.network.num_classes:
            raise ValueError(
                f"dataset has {dataset.num_classes} classes but the network outputs {config.network.num_classes}"
            )
        train = dataset.train
        batches_per_epoch = len(train) // config.batch_size
        if batches_per_epoch == 0:
            raise ValueError(f"batch_size {config.batch_size} exceeds the {len(train)} training examples")

        params = params.copy() if params is not None else init_params(config.network, config.master_seed)
        total_updates = config.budget.max_updates(config.passes_per_update)
        logger.info(
            "training %s: S=%d, %d updates, batch %d, seed %d",
            self.estimator.name, config.samples, total_updates, config.batch_size, config.master_seed
        )

        state = self.state = TrainState()
        series: List[MetricsRow] = []
        order = None
        for step in range(total_updates):
            state.epoch, state.batch_index = divmod(step, batches_per_epoch)
            if state.batch_index == 0:
                order = stream(config.master_seed, SHUFFLE_STREAM, state.epoch).permutation(len(train))
            idx = order[state.batch_index * config.batch_size:(state.batch_index + 1) * config.batch_size]
            batch = list(zip(train.features[idx], train.labels[idx]))

            params, report = self.train_step(params, batch, state)
            if on_step is not None:
                on_step(report)
            series.append(MetricsRow(
                step=report.step,
                split="train",
                lsgd_estimate=report.mean_objective,
                mean_max_weight=report.mean_max_weight,
                degenerate_count=report.degenerate_count,
                wall_ms=report.wall_ms if self.record_wall_time else 0.0,
            ))

            if report.step % config.eval_every == 0:
                for name in ("validation", "test"):
                    nll, error_rate = evaluate(params, dataset.split(name), config)
                    series.append(MetricsRow(step=report.step, split=name, nll=nll, error_rate=error_rate))
                logger.info(
                    "step %d objective=%.6f validation_error=%.4f",
                    report.step, report.mean_objective, series[-2].error_rate
                )

        logger.info("training finished after %d updates and %d forward passes", state.step, state.forward_passes)
        return params, series


def train_step(
    params: NetworkParams,
    batch: Sequence[Tuple[Tensor, int]],
    config: TrainConfig,
    state: TrainState,
    estimator: Optional[BaseEstimator] = None,
    workers: int = 1
) -> Tuple[NetworkParams, StepReport]:
    """One update with a throwaway Trainer; see Trainer.train_step."""
    with Trainer(config, estimator=estimator, workers=workers) as trainer:
        return trainer.train_step(params, batch, state)


def train(
    config: TrainConfig,
    dataset: Dataset,
    workers: int = 1,
    estimator: Optional[BaseEstimator] = None,
    record_wall_time: bool = False
) -> Tuple[NetworkParams, List[MetricsRow]]:
    """Run a full training job; see Trainer.train."""
    with Trainer(config, estimator=estimator, workers=workers, record_wall_time=record_wall_time) as trainer:
        return trainer.train(dataset)
