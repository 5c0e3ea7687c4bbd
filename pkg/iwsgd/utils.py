"""
Utility functions for IWSGD experiments.
"""

import json
import logging
import os
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from .trainer import MetricsRow

WORKERS_ENV = "IWSGD_WORKERS"

METRICS_COLUMNS = [
    "step",
    "split",
    "nll",
    "error_rate",
    "lsgd_estimate",
    "mean_max_weight",
    "degenerate_count",
    "wall_ms",
]
FLOAT_COLUMNS = ["nll", "error_rate", "lsgd_estimate", "mean_max_weight", "wall_ms"]
FLOAT_FORMAT = "%.6f"

SUMMARY_COLUMNS = [
    "samples",
    "budget_kind",
    "runs",
    "updates",
    "forward_passes",
    "final_test_error_mean",
    "final_test_error_std",
    "final_objective_mean",
]

RUN_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def load_env_variables() -> int:
    """Load environment variables from .env file and return the worker count."""
    load_dotenv()

    default = os.cpu_count() or 1
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    try:
        workers = int(raw)
    except ValueError:
        workers = 0
    if workers < 1:
        print(f"Warning: {WORKERS_ENV}={raw!r} is not a positive integer.")
        print(f"Using {default} workers.")
        return default
    return workers


def convert_numpy(obj):
    """Convert numpy arrays and scalars to plain Python values recursively."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, np.generic):
        return obj.item()
    elif isinstance(obj, dict):
        return {k: convert_numpy(v) for k, v in obj.items()}
    elif isinstance(obj, list) or isinstance(obj, tuple):
        return [convert_numpy(i) for i in obj]
    else:
        return obj


def metrics_frame(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    """Metrics rows as a frame with the fixed column order and dtypes."""
    columns: Dict[str, Any] = {}
    for name in METRICS_COLUMNS:
        values = [getattr(row, name) for row in rows]
        if name in FLOAT_COLUMNS:
            columns[name] = np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)
        elif name == "degenerate_count":
            columns[name] = pd.array(values, dtype="Int64")
        elif name == "step":
            columns[name] = np.array(values, dtype=np.int64)
        else:
            columns[name] = pd.array(values, dtype=object)
    return pd.DataFrame(columns, columns=METRICS_COLUMNS)


def save_metrics_csv(rows: Sequence[MetricsRow], path: str) -> str:
    """Write a metrics CSV.

    Floats are rendered with six fractional digits; fields that do not apply
    to a row are left empty.

    Args:
        rows: Metrics series from the trainer
        path: Destination file

    Returns:
        Path to the saved file
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    metrics_frame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    return path


def summarize_runs(runs: pd.DataFrame) -> pd.DataFrame:
    """Aggregate per-run results over seeds.

    Args:
        runs: One row per run with columns samples, budget_kind, updates,
            forward_passes, final_test_error and final_objective

    Returns:
        One row per (samples, budget_kind); std uses ddof=1 and is 0 for a
        single seed
    """
    grouped = runs.groupby(["samples", "budget_kind"], sort=True)
    summary = grouped.agg(
        runs=("seed", "count"),
        updates=("updates", "first"),
        forward_passes=("forward_passes", "first"),
        final_test_error_mean=("final_test_error", "mean"),
        final_test_error_std=("final_test_error", "std"),
        final_objective_mean=("final_objective", "mean"),
    ).reset_index()
    summary["final_test_error_std"] = summary["final_test_error_std"].fillna(0.0)
    return summary[SUMMARY_COLUMNS]


def save_frame_csv(frame: pd.DataFrame, path: str) -> str:
    """Write a summary-style frame with the metrics CSV's float rendering."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    return path


def save_run_record(record: Dict[str, Any], output_dir: str, filename: str = "run.json") -> str:
    """Save a JSON record of a finished run.

    Args:
        record: Configuration and results of the run
        output_dir: Directory to save the record
        filename: Name of the record file

    Returns:
        Path to the saved record file
    """
    os.makedirs(output_dir, exist_ok=True)
    record = dict(record, timestamp=time.time())
    path = os.path.join(output_dir, filename)
    with open(path, "w") as f:
        json.dump(convert_numpy(record), f, indent=2)
    return path


def setup_run_log(output_dir: str, filename: str = "run.log", level: int = logging.DEBUG) -> logging.Handler:
    """Attach a plain-text file handler to the package logger.

    The caller detaches it with `close_run_log` when the run ends.
    """
    os.makedirs(output_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(output_dir, filename), mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT))
    handler.setLevel(level)
    package_logger = logging.getLogger("iwsgd")
    package_logger.addHandler(handler)
    if package_logger.level == logging.NOTSET or package_logger.level > level:
        package_logger.setLevel(level)
    return handler


def close_run_log(handler: Optional[logging.Handler]) -> None:
    if handler is None:
        return
    logging.getLogger("iwsgd").removeHandler(handler)
    handler.close()


def final_train_objective(rows: List[MetricsRow]) -> float:
    """lsgd_estimate of the last training row, nan if no update was taken."""
    for row in reversed(rows):
        if row.split == "train":
            return float(row.lsgd_estimate)
    return float("nan")
