"""
Experiment harness: the train, gradcheck, bounds and compare subcommands.

Every subcommand returns a process exit code:

    0  success
    1  gradcheck failure, or a violated bound chain
    2  configuration, input-data or enumeration-capacity error
    3  training aborted on degenerate likelihoods
"""

import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import ExperimentConfig, load_config
from .data import Dataset, gen_gaussian_blobs, gen_two_spirals, load_idx_dataset
from .errors import CapacityError, ConfigError, DegenerateLikelihoodError, IdxFormatError, LabelRangeError, UnsupportedModeError
from .gradcheck import DEFAULT_TOLERANCE, GradcheckResult, run_gradcheck, worst_result
from .net import NetworkParams, NetworkSpec, init_params
from .objective import lsgd_exact, marginal_exact
from .rng import BOUNDS_STREAM, stream
from .trainer import Trainer, evaluate
from .utils import (
    close_run_log,
    final_train_objective,
    load_env_variables,
    save_frame_csv,
    save_metrics_csv,
    save_run_record,
    setup_run_log,
    summarize_runs,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DEGENERATE = 3

IDX_KEYS = ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels")


def _error(message: str) -> None:
    print(message, file=sys.stderr)


def load_dataset(config: ExperimentConfig) -> Dataset:
    """Build the dataset a configuration names.

    Raises:
        ConfigError: An IDX path does not exist, or a label is not below num_classes
        IdxFormatError: An IDX file is malformed
    """
    if config.dataset == "blobs":
        return gen_gaussian_blobs(
            config.n_per_class, config.num_classes, config.dim, config.radius, config.data_sigma, config.data_seed
        )
    if config.dataset == "spirals":
        return gen_two_spirals(config.n_per_class, config.data_sigma, config.turns, config.data_seed)
    for key in IDX_KEYS:
        path = getattr(config, key)
        if not os.path.isfile(path):
            raise ConfigError(f"file not found: {path}", key=key, value=path)
    try:
        return load_idx_dataset(
            config.idx_train_images,
            config.idx_train_labels,
            config.idx_test_images,
            config.idx_test_labels,
            limit=config.idx_limit,
            num_classes=config.num_classes,
        )
    except LabelRangeError as e:
        raise ConfigError(str(e), key="num_classes", value=config.num_classes) from None


def _prepare(config_path: str) -> Tuple[ExperimentConfig, Dataset]:
    """Load the configuration and its dataset; nothing is written yet."""
    config = load_config(config_path)
    dataset = load_dataset(config)
    if config.batch_size > len(dataset.train):
        raise ConfigError(
            f"{config.batch_size} exceeds the {len(dataset.train)} training examples",
            key="batch_size",
            value=config.batch_size
        )
    return config, dataset


def _resolve_workers(workers: Optional[int]) -> int:
    return workers if workers is not None and workers >= 1 else load_env_variables()


def _report_degenerate(e: DegenerateLikelihoodError) -> None:
    _error(f"Training aborted: {e}")
    _error(f"log-likelihoods: {', '.join(f'{v:.6f}' for v in e.log_liks)}")
    logger.error("degenerate likelihoods at step %s example %s: %s", e.step, e.example_index, e.log_liks)


def cmd_train(config_path: str, workers: Optional[int] = None) -> int:
    """Train one configuration and write metrics.csv, run.log and run.json.

    Args:
        config_path: YAML configuration document
        workers: Thread count; IWSGD_WORKERS or the CPU count if None

    Returns:
        Exit code
    """
    try:
        config, dataset = _prepare(config_path)
        train_config = config.to_train_config(dataset.dim, dataset.num_classes)
    except (ConfigError, IdxFormatError) as e:
        _error(f"Configuration error: {e}")
        return EXIT_CONFIG

    workers = _resolve_workers(workers)
    output_dir = config.output_dir
    handler = setup_run_log(output_dir)
    try:
        print(f"Starting run: {dataset.provenance}")
        logger.info("config %s, %d workers", config_path, workers)
        start = time.perf_counter()
        with Trainer(train_config, workers=workers, record_wall_time=config.record_wall_time) as trainer:
            try:
                params, series = trainer.train(dataset)
            except DegenerateLikelihoodError as e:
                _report_degenerate(e)
                return EXIT_DEGENERATE
            state = trainer.state
            estimator_stats = trainer.estimator.get_stats()

        metrics_path = save_metrics_csv(series, os.path.join(output_dir, "metrics.csv"))
        _, test_error = evaluate(params, dataset.test, train_config)
        elapsed = time.perf_counter() - start
        logger.info("run finished in %.2f s, final test error %.6f", elapsed, test_error)
        save_run_record({
            "config": config.model_dump(),
            "dataset": dataset.provenance,
            "updates": state.step,
            "forward_passes": state.forward_passes,
            "final_test_error": test_error,
            "final_objective": final_train_objective(series),
            "estimator": estimator_stats,
            "elapsed_seconds": elapsed,
        }, output_dir)
        print(f"Run complete! Metrics written to {metrics_path}")
        print(f"final_test_error={test_error:.6f}")
        return EXIT_OK
    finally:
        close_run_log(handler)


def cmd_gradcheck(seed: int, trials: int = 200, corrupt: bool = False) -> int:
    """Finite-difference check of the per-sample and combined gradients.

    Args:
        seed: Base seed of the random cases
        trials: Number of random cases
        corrupt: Perturb the analytic gradients (fault injection)

    Returns:
        0 iff every relative error is below 1e-6, 1 otherwise
    """
    if trials < 1:
        _error("Configuration error: trials: must be >= 1")
        return EXIT_CONFIG

    def on_trial(result: GradcheckResult) -> None:
        logger.debug(
            "trial %d sample_error=%.3e combined_error=%.3e %s",
            result.trial, result.sample_error, result.combined_error, result.description
        )

    results = run_gradcheck(seed, trials, corrupt=corrupt, on_trial=on_trial)
    worst, passed = worst_result(results)
    print(
        f"worst_relative_error={worst.worst:.3e} (trial {worst.trial}, seed {seed}: {worst.description})"
    )
    if not passed:
        failures = [r for r in results if r.worst >= DEFAULT_TOLERANCE]
        _error(f"Gradient check failed on {len(failures)} of {trials} trials; rerun with --seed {seed}")
        for r in failures[:10]:
            _error(f"  seed {seed} trial {r.trial}: error {r.worst:.3e} ({r.description})")
        return EXIT_FAILURE
    print(f"Gradient check passed: {trials} trials below {DEFAULT_TOLERANCE:g}")
    return EXIT_OK


def bounds_instance(config: ExperimentConfig) -> Tuple[NetworkSpec, NetworkParams, np.ndarray, int]:
    """Seeded random tiny network and example for the bound chain."""
    spec = config.network_spec()
    params = init_params(spec, config.master_seed)
    rng = stream(config.master_seed, BOUNDS_STREAM)
    x = rng.standard_normal(spec.input_dim)
    y = int(rng.integers(0, spec.num_classes))
    return spec, params, x, y


def bound_chain(
    spec: NetworkSpec,
    params: NetworkParams,
    x: np.ndarray,
    y: int,
    max_samples: int = 3,
    tuple_limit: int = 2 ** 24,
    max_units: int = 22
) -> List[Tuple[str, float]]:
    """Exact lsgd bounds for S = 1..max_samples followed by the marginal."""
    rows = [
        (f"S={s}", lsgd_exact(spec, params, x, y, samples=s, tuple_limit=tuple_limit, max_units=max_units))
        for s in range(1, max_samples + 1)
    ]
    rows.append(("marginal", marginal_exact(spec, params, x, y, max_units=max_units)))
    return rows


def chain_holds(values: List[float]) -> bool:
    """True iff the values are non-decreasing, compared exactly."""
    return all(a <= b for a, b in zip(values, values[1:]))


def cmd_bounds(config_path: str) -> int:
    """Print the exact bound chain of a seeded tiny network.

    Returns:
        0 iff lsgd_exact(1) <= ... <= lsgd_exact(S_max) <= marginal_exact
    """
    try:
        config = load_config(config_path)
        spec, params, x, y = bounds_instance(config)
        rows = bound_chain(spec, params, x, y, config.bounds_max_samples, config.tuple_limit, config.max_units)
    except (ConfigError, CapacityError, UnsupportedModeError) as e:
        _error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DegenerateLikelihoodError as e:
        _error(f"Bounds aborted: {e}")
        return EXIT_DEGENERATE

    print(f"{'bound':<10} {'value':>12}")
    for label, value in rows:
        print(f"{label:<10} {value:>12.6f}")
    values = [value for _, value in rows]
    if chain_holds(values):
        print("chain holds")
        return EXIT_OK
    _error(f"chain violated for master_seed {config.master_seed}")
    return EXIT_FAILURE


class Comparison:
    """Matched training runs over S values and seeds."""

    def __init__(self, config: ExperimentConfig, dataset: Dataset, workers: int = 1, output_dir: Optional[str] = None):
        """Initialize the comparison.

        Args:
            config: Experiment configuration (s_values and seeds select the runs)
            dataset: Shared dataset for every run
            workers: Threads per training run
            output_dir: Directory for the CSVs; config.output_dir if None
        """
        self.config = config
        self.dataset = dataset
        self.workers = workers
        self.output_dir = output_dir or config.output_dir
        self.results: List[Dict[str, Any]] = []

        os.makedirs(self.output_dir, exist_ok=True)

    def run_one(self, samples: int, seed: int) -> Dict[str, Any]:
        """Train one (S, seed) setting and write its metrics CSV.

        Returns:
            Dictionary of run results
        """
        print(f"Starting run: S={samples}, seed={seed}")
        train_config = self.config.to_train_config(
            self.dataset.dim, self.dataset.num_classes, samples=samples, master_seed=seed
        )
        with Trainer(train_config, workers=self.workers, record_wall_time=self.config.record_wall_time) as trainer:
            params, series = trainer.train(self.dataset)
            state = trainer.state

        save_metrics_csv(series, os.path.join(self.output_dir, f"metrics_S{samples}_seed{seed}.csv"))
        _, test_error = evaluate(params, self.dataset.test, train_config)
        result = {
            "samples": samples,
            "seed": seed,
            "budget_kind": train_config.budget.kind.value,
            "updates": state.step,
            "forward_passes": state.forward_passes,
            "final_test_error": test_error,
            "final_objective": final_train_objective(series),
        }
        print(f"Run S={samples}, seed={seed}: test error {test_error:.4f} after {state.step} updates")
        self.results.append(result)
        return result

    def run(self) -> pd.DataFrame:
        """Run every (S, seed) pair and write runs.csv and summary.csv.

        Returns:
            The summary frame
        """
        for samples in self.config.s_values:
            for seed in self.config.seeds:
                self.run_one(samples, seed)

        runs = pd.DataFrame(self.results)
        save_frame_csv(runs, os.path.join(self.output_dir, "runs.csv"))
        summary = summarize_runs(runs)
        save_frame_csv(summary, os.path.join(self.output_dir, "summary.csv"))
        return summary

    def get_ordering(self, summary: pd.DataFrame) -> List[Dict[str, Any]]:
        """Settings sorted by mean final test error, best first."""
        ordered = summary.sort_values(["final_test_error_mean", "samples"], kind="mergesort")
        return ordered.to_dict("records")


def cmd_compare(config_path: str, workers: Optional[int] = None) -> int:
    """Matched runs for every S in s_values and every seed in seeds.

    Writes metrics_S{S}_seed{seed}.csv per run, runs.csv and summary.csv.

    Returns:
        Exit code
    """
    try:
        config, dataset = _prepare(config_path)
    except (ConfigError, IdxFormatError) as e:
        _error(f"Configuration error: {e}")
        return EXIT_CONFIG

    comparison = Comparison(config, dataset, workers=_resolve_workers(workers))
    handler = setup_run_log(comparison.output_dir)
    try:
        logger.info("compare %s: S in %s, seeds %s", config_path, config.s_values, config.seeds)
        try:
            summary = comparison.run()
        except DegenerateLikelihoodError as e:
            _report_degenerate(e)
            return EXIT_DEGENERATE

        print("\nComparison Summary:")
        print("===================")
        for i, row in enumerate(comparison.get_ordering(summary)):
            print(
                f"{i + 1}. S={row['samples']}: test error {row['final_test_error_mean']:.4f} "
                f"± {row['final_test_error_std']:.4f} over {row['runs']} seeds "
                f"({row['updates']} updates, {row['forward_passes']} forward passes)"
            )
        return EXIT_OK
    finally:
        close_run_log(handler)
