import os
import time

import numpy as np
import pandas as pd
import pytest

from iwsgd.config import parse_config
from iwsgd.data import write_idx
from iwsgd.harness import (
    EXIT_CONFIG,
    EXIT_DEGENERATE,
    EXIT_FAILURE,
    EXIT_OK,
    bound_chain,
    bounds_instance,
    chain_holds,
    cmd_bounds,
    cmd_compare,
    cmd_gradcheck,
    cmd_train,
)
from iwsgd.utils import METRICS_COLUMNS, load_env_variables, summarize_runs

HEADER = ",".join(METRICS_COLUMNS) + "\n"


def test_train_with_empty_budget_writes_header_only(write_config, tiny_train_values, capsys):
    path = write_config(**dict(tiny_train_values, budget=0))
    assert cmd_train(path, workers=1) == EXIT_OK
    output_dir = tiny_train_values["output_dir"]
    with open(os.path.join(output_dir, "metrics.csv"), encoding="utf-8") as f:
        assert f.read() == HEADER
    assert os.path.isfile(os.path.join(output_dir, "run.log"))
    assert os.path.isfile(os.path.join(output_dir, "run.json"))
    assert "final_test_error=" in capsys.readouterr().out


def test_train_writes_metrics(write_config, tiny_train_values, capsys):
    path = write_config(**tiny_train_values)
    assert cmd_train(path, workers=1) == EXIT_OK
    frame = pd.read_csv(os.path.join(tiny_train_values["output_dir"], "metrics.csv"))
    assert list(frame.columns) == METRICS_COLUMNS
    assert (frame["split"] == "train").sum() == 12
    assert set(frame.loc[frame["split"] != "train", "step"]) == {4, 8, 12}
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1].startswith("final_test_error=")
    value = lines[-1].split("=")[1]
    assert len(value.split(".")[1]) == 6


def test_metrics_rendering(write_config, tiny_train_values):
    path = write_config(**tiny_train_values)
    cmd_train(path, workers=1)
    with open(os.path.join(tiny_train_values["output_dir"], "metrics.csv"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    train_row = lines[1].split(",")
    assert train_row[:4] == ["1", "train", "", ""]
    assert len(train_row[4].split(".")[1]) == 6
    assert train_row[6] == "0"
    assert train_row[7] == "0.000000"
    eval_row = next(line for line in lines if ",validation," in line).split(",")
    assert eval_row[4:] == ["", "", "", ""]


@pytest.mark.parametrize("values", [
    {"samples": 0},
    {"unknown_key": 1},
    {"keep_prob": "half"},
    {"batch_size": 1000},
])
def test_malformed_config_exits_2_without_output(write_config, tiny_train_values, values, capsys):
    path = write_config(**dict(tiny_train_values, **values))
    assert cmd_train(path, workers=1) == EXIT_CONFIG
    assert not os.path.exists(tiny_train_values["output_dir"])
    key = next(iter(values))
    assert key in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert cmd_train(str(tmp_path / "nope.yaml")) == EXIT_CONFIG
    assert cmd_bounds(str(tmp_path / "nope.yaml")) == EXIT_CONFIG
    assert cmd_compare(str(tmp_path / "nope.yaml")) == EXIT_CONFIG


def test_missing_idx_file_exits_2(write_config, tmp_path):
    path = write_config(
        dataset="idx",
        idx_train_images=str(tmp_path / "a"),
        idx_train_labels=str(tmp_path / "b"),
        idx_test_images=str(tmp_path / "c"),
        idx_test_labels=str(tmp_path / "d"),
        output_dir=str(tmp_path / "out"),
    )
    assert cmd_train(path) == EXIT_CONFIG
    assert not os.path.exists(tmp_path / "out")


def test_idx_labels_beyond_num_classes_exit_2(write_config, tmp_path, capsys):
    rng = np.random.default_rng(0)
    paths = {}
    for split in ("train", "test"):
        images = rng.integers(0, 256, size=(10, 2, 2))
        paths[split] = (str(tmp_path / f"{split}-images"), str(tmp_path / f"{split}-labels"))
        write_idx(*paths[split], images, np.arange(10))
    path = write_config(
        dataset="idx",
        idx_train_images=paths["train"][0],
        idx_train_labels=paths["train"][1],
        idx_test_images=paths["test"][0],
        idx_test_labels=paths["test"][1],
        output_dir=str(tmp_path / "out"),
    )
    assert cmd_train(path) == EXIT_CONFIG
    assert cmd_compare(path) == EXIT_CONFIG
    assert not os.path.exists(tmp_path / "out")
    assert "num_classes" in capsys.readouterr().err


def test_compare_rejects_oversized_batch(write_config, tiny_train_values, capsys):
    path = write_config(**dict(tiny_train_values, batch_size=29, s_values=[1], seeds=[0]))
    assert cmd_compare(path, workers=1) == EXIT_CONFIG
    assert not os.path.exists(tiny_train_values["output_dir"])
    assert "batch_size" in capsys.readouterr().err


def test_train_csv_is_byte_identical_across_runs_and_workers(write_config, tiny_train_values, tmp_path):
    outputs = []
    for run, workers in enumerate((1, 1, 4)):
        output_dir = str(tmp_path / f"run{run}")
        path = write_config(f"run{run}.yaml", **dict(tiny_train_values, output_dir=output_dir))
        assert cmd_train(path, workers=workers) == EXIT_OK
        with open(os.path.join(output_dir, "metrics.csv"), "rb") as f:
            outputs.append(f.read())
    assert outputs[0] == outputs[1] == outputs[2]


def test_train_degenerate_likelihoods_exit_3(monkeypatch, write_config, tiny_train_values, capsys):
    from iwsgd.errors import DegenerateLikelihoodError
    from iwsgd.trainer import Trainer

    def degenerate(self, dataset, params=None, on_step=None):
        raise DegenerateLikelihoodError("all noise samples have zero likelihood", [-np.inf, -np.inf], 3, 7)

    monkeypatch.setattr(Trainer, "train", degenerate)
    path = write_config(**tiny_train_values)
    assert cmd_train(path, workers=1) == EXIT_DEGENERATE
    err = capsys.readouterr().err
    assert "step=7" in err and "example=3" in err


def test_gradcheck_single_trial(capsys):
    assert cmd_gradcheck(seed=5, trials=1) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("worst_relative_error=") == 1


def test_gradcheck_corrupted_gradient_fails(capsys):
    assert cmd_gradcheck(seed=5, trials=2, corrupt=True) == EXIT_FAILURE
    assert "seed 5" in capsys.readouterr().err


def test_gradcheck_requires_a_trial():
    assert cmd_gradcheck(seed=0, trials=0) == EXIT_CONFIG


def test_bounds_command(write_config, capsys):
    path = write_config(dim=3, num_classes=3, hidden=[6], keep_prob=0.5, master_seed=1)
    assert cmd_bounds(path) == EXIT_OK
    out = capsys.readouterr().out
    for label in ("S=1", "S=2", "S=3", "marginal"):
        assert label in out


def test_bounds_keep_one_chain_holds_with_equality():
    config = parse_config({"dim": 3, "num_classes": 3, "hidden": [4], "keep_prob": 1.0})
    values = [value for _, value in bound_chain(*bounds_instance(config))]
    assert len(set(values)) == 1
    assert chain_holds(values)


def test_bounds_chain_on_worked_instance(worked_instance):
    values = [value for _, value in bound_chain(*worked_instance, max_samples=2)]
    np.testing.assert_allclose(values, [-0.916291, -0.804719, -0.693147], atol=1e-6)
    assert chain_holds(values)


def test_bounds_chain_holds_strictly_on_50_random_networks():
    for seed in range(50):
        config = parse_config({
            "dim": 3,
            "num_classes": 3,
            "hidden": [3 + seed % 4],
            "activation": "tanh",
            "keep_prob": (0.3, 0.5, 0.7)[seed % 3],
            "master_seed": seed,
        })
        values = [value for _, value in bound_chain(*bounds_instance(config))]
        assert all(a < b for a, b in zip(values, values[1:])), (seed, values)


def test_bounds_capacity_error_exits_2(write_config):
    path = write_config(dim=2, num_classes=2, hidden=[12], keep_prob=0.5, tuple_limit=1000)
    assert cmd_bounds(path) == EXIT_CONFIG
    gaussian = write_config("g.yaml", dim=2, num_classes=2, hidden=[3], noise_mode="gaussian_add", noise_sigma=0.1)
    assert cmd_bounds(gaussian) == EXIT_CONFIG


def test_compare_single_setting(write_config, tiny_train_values):
    path = write_config(**dict(tiny_train_values, s_values=[1], seeds=[0]))
    assert cmd_compare(path, workers=1) == EXIT_OK
    output_dir = tiny_train_values["output_dir"]
    runs = pd.read_csv(os.path.join(output_dir, "runs.csv"))
    summary = pd.read_csv(os.path.join(output_dir, "summary.csv"))
    assert len(summary) == 1
    assert summary.loc[0, "final_test_error_mean"] == runs.loc[0, "final_test_error"]
    assert summary.loc[0, "final_test_error_std"] == 0.0
    assert os.path.isfile(os.path.join(output_dir, "metrics_S1_seed0.csv"))


def test_compare_reports_forward_passes(write_config, tiny_train_values):
    path = write_config(**dict(tiny_train_values, s_values=[1, 4], seeds=[0, 1, 2]))
    assert cmd_compare(path, workers=1) == EXIT_OK
    summary = pd.read_csv(os.path.join(tiny_train_values["output_dir"], "summary.csv"))
    assert list(summary["samples"]) == [1, 4]
    assert list(summary["runs"]) == [3, 3]
    assert list(summary["updates"]) == [12, 12]
    one, four = summary["forward_passes"]
    assert four == 4 * one


def test_summarize_runs_uses_sample_std():
    runs = pd.DataFrame({
        "samples": [1, 1, 1],
        "seed": [0, 1, 2],
        "budget_kind": ["updates"] * 3,
        "updates": [10] * 3,
        "forward_passes": [80] * 3,
        "final_test_error": [0.1, 0.2, 0.3],
        "final_objective": [-1.0, -0.5, -0.6],
    })
    summary = summarize_runs(runs)
    assert summary.loc[0, "final_test_error_std"] == pytest.approx(0.1)
    assert summary.loc[0, "final_objective_mean"] == pytest.approx(-0.7)


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("IWSGD_WORKERS", "3")
    assert load_env_variables() == 3
    monkeypatch.setenv("IWSGD_WORKERS", "zero")
    assert load_env_variables() == (os.cpu_count() or 1)


@pytest.mark.slow
def test_compare_blobs_acceptance(tmp_path):
    import yaml

    with open(os.path.join(os.path.dirname(__file__), "..", "configs", "compare_blobs.yaml"), encoding="utf-8") as f:
        values = yaml.safe_load(f)
    values["output_dir"] = str(tmp_path / "compare")
    path = tmp_path / "compare.yaml"
    path.write_text(yaml.safe_dump(values), encoding="utf-8")

    start = time.perf_counter()
    assert cmd_compare(str(path)) == EXIT_OK
    assert time.perf_counter() - start < 300
    summary = pd.read_csv(tmp_path / "compare" / "summary.csv")
    assert list(summary["samples"]) == [1, 4, 8]

    def objective(samples):
        frames = [pd.read_csv(tmp_path / "compare" / f"metrics_S{samples}_seed{seed}.csv") for seed in (0, 1, 2)]
        series = [frame.loc[frame["split"] == "train", "lsgd_estimate"].to_numpy() for frame in frames]
        return np.mean(series, axis=0)

    assert np.mean(objective(8) >= objective(1)) >= 0.9


def test_cli_dispatches_subcommands(write_config, tiny_train_values):
    from run_experiment import main

    assert main(["gradcheck", "--seed", "2", "--trials", "1"]) == EXIT_OK
    path = write_config(**dict(tiny_train_values, budget=4))
    assert main(["train", path, "--workers", "2"]) == EXIT_OK
    with pytest.raises(SystemExit):
        main(["unknown"])
