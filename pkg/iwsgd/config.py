"""
Experiment configuration documents.

A configuration is a flat YAML mapping. Every key is declared below; unknown
keys and out-of-range values are rejected before any computation starts.
"""

import os
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .net import NetworkSpec, NoiseSpec, mlp_spec
from .trainer import Budget, TrainConfig


class ExperimentConfig(BaseModel):
    """Flat experiment configuration shared by all subcommands."""

    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)

    # Dataset
    dataset: Literal["blobs", "spirals", "idx"] = "blobs"
    data_seed: int = Field(0, ge=0)
    n_per_class: int = Field(200, gt=0)
    num_classes: int = Field(2, gt=1)
    dim: int = Field(2, gt=0)
    radius: float = Field(1.0, ge=0.0)
    data_sigma: float = Field(0.5, ge=0.0)
    turns: float = Field(1.5, gt=0.0)
    idx_train_images: Optional[str] = None
    idx_train_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None
    idx_limit: Optional[int] = Field(None, gt=0)

    # Network and noise
    hidden: List[int] = Field(default_factory=lambda: [64])
    activation: Literal["relu", "tanh"] = "relu"
    noise_mode: Literal["bernoulli_multiply", "gaussian_add"] = "bernoulli_multiply"
    keep_prob: float = Field(0.5, gt=0.0, le=1.0)
    noise_sigma: float = Field(0.0, ge=0.0)
    inverted_dropout: bool = False

    # Training
    samples: int = Field(1, ge=1)
    estimator: Literal["iwsgd", "dropout"] = "iwsgd"
    gradient_mode: Literal["per_sample", "weighted_backward"] = "per_sample"
    learning_rate: float = Field(0.05, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    lr_decay_every: int = Field(0, ge=0)
    lr_decay_factor: float = Field(1.0, gt=0.0)
    batch_size: int = Field(32, gt=0)
    budget_kind: Literal["updates", "forward_passes"] = "updates"
    budget: int = Field(1000, ge=0)
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    eval_every: int = Field(100, gt=0)
    record_wall_time: bool = False
    output_dir: str = "results"

    # Comparison runs
    s_values: List[int] = Field(default_factory=lambda: [1, 4])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    # Exact bound enumeration
    bounds_max_samples: int = Field(3, ge=1)
    tuple_limit: int = Field(2 ** 24, gt=0)
    max_units: int = Field(22, gt=0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if any(width <= 0 for width in self.hidden):
            raise ValueError("hidden widths must be positive")
        if not self.s_values or any(s < 1 for s in self.s_values):
            raise ValueError("s_values must be a non-empty list of positive integers")
        if not self.seeds or any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be a non-empty list of non-negative integers")
        if self.dataset == "idx":
            missing = [
                key for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels")
                if getattr(self, key) is None
            ]
            if missing:
                raise ValueError(f"idx dataset requires {', '.join(missing)}")
        if self.dataset == "spirals" and (self.dim != 2 or self.num_classes != 2):
            raise ValueError("spirals dataset has dim 2 and 2 classes")
        if self.dataset == "blobs" and self.dim == 1 and self.num_classes > 2:
            raise ValueError("blobs with more than two classes need dim >= 2")
        return self

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(
            mode=self.noise_mode,
            keep_prob=self.keep_prob,
            sigma=self.noise_sigma,
            inverted=self.inverted_dropout,
        )

    def network_spec(self, input_dim: Optional[int] = None, num_classes: Optional[int] = None) -> NetworkSpec:
        dims = [input_dim or self.dim] + list(self.hidden) + [num_classes or self.num_classes]
        return mlp_spec(dims, self.activation, self.noise_spec())

    def to_train_config(
        self,
        input_dim: Optional[int] = None,
        num_classes: Optional[int] = None,
        samples: Optional[int] = None,
        master_seed: Optional[int] = None
    ) -> TrainConfig:
        """Build the trainer's configuration.

        Args:
            input_dim: Feature width if it differs from `dim` (IDX data)
            num_classes: Class count if it differs from `num_classes`
            samples: Override of `samples` (comparison runs)
            master_seed: Override of `master_seed` (comparison runs)

        Returns:
            TrainConfig
        """
        return TrainConfig(
            network=self.network_spec(input_dim, num_classes),
            noise=self.noise_spec(),
            samples=samples if samples is not None else self.samples,
            learning_rate=self.learning_rate,
            budget=Budget(self.budget_kind, self.budget),
            master_seed=master_seed if master_seed is not None else self.master_seed,
            eval_every=self.eval_every,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            estimator=self.estimator,
            gradient_mode=self.gradient_mode,
            lr_decay_every=self.lr_decay_every,
            lr_decay_factor=self.lr_decay_factor,
        )


def _describe(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or None
    messages = "; ".join(
        f"{'.'.join(str(p) for p in e['loc']) or '<document>'}: {e['msg']}" for e in error.errors()
    )
    return ConfigError(messages, key=key)


def parse_config(document: dict) -> ExperimentConfig:
    """Validate a parsed configuration mapping.

    Raises:
        ConfigError: Naming the first offending key
    """
    if not isinstance(document, dict):
        raise ConfigError("configuration must be a mapping of keys to values")
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise _describe(e) from None


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a UTF-8 YAML configuration file.

    Args:
        path: Path to the configuration document

    Returns:
        Validated configuration

    Raises:
        ConfigError: Missing file, bad YAML, unknown key or invalid value
    """
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if document is None:
        document = {}
    return parse_config(document)
