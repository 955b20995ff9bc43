"""
End-to-end tests for the scrisk command line
"""

import hashlib
import json
import sys
import os

import pandas as pd
import pytest
import yaml

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from cli import RunConfig, main
from errors import DataValidationError
from evalsuite import default_grid

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "config")


def _write_config(directory, **overrides):
    settings = {
        "data_dir": str(directory / "data"),
        "out_dir": str(directory / "out"),
        "log_level": "WARNING",
        "seed": 7,
        "n_trials": 2,
        "cv_folds": 3,
        "n_jobs": 1,
        "grid": {"learning_rate": [0.1], "n_estimators": [20], "max_depth": [2], "l1_reg": [0.0]},
        "min_samples_leaf": 5,
        "report_top_k": 5,
        "explain_sample": 40,
        "plots": True,
        "synth_n_entities": 400,
        "synth_n_third": 150,
        "synth_n_fourth": 80,
        "synth_base_breach_rate": 0.08,
        "synth_history_breach_rates": [0.08, 0.08],
        "synth_supplier_breach_rate": 0.05,
    }
    settings.update(overrides)
    path = directory / "settings.yaml"
    path.write_text(yaml.safe_dump(settings))
    return path


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestRunConfig:
    """Test cases for the YAML run configuration"""

    def test_unknown_key_rejected(self, tmp_path):
        path = _write_config(tmp_path, learning_rate=0.1)
        with pytest.raises(DataValidationError, match="unknown config keys"):
            RunConfig.from_file(path)

    def test_synth_keys_are_routed(self, tmp_path):
        config = RunConfig.from_file(_write_config(tmp_path))
        synth = config.synth_config()
        assert synth.n_entities == 400
        assert synth.history_breach_rates == (0.08, 0.08)
        assert synth.seed == 7

    def test_grid_expansion(self, tmp_path):
        config = RunConfig.from_file(_write_config(tmp_path, grid={"max_depth": [2, 3], "l1_reg": [0.0, 1.0]}))
        grid = config.hyperparameter_grid()
        assert len(grid) == 4
        assert {hp.min_samples_leaf for hp in grid} == {5}

    def test_bad_grid_key(self, tmp_path):
        with pytest.raises(DataValidationError, match="unknown grid keys"):
            RunConfig.from_file(_write_config(tmp_path, grid={"subsample": [0.5]}))

    def test_shipped_config_runs_full_protocol(self):
        config = RunConfig.from_file(os.path.join(CONFIG_DIR, "settings.yaml"))
        assert config.retune_each_trial
        assert config.hyperparameter_grid() == default_grid(config.min_samples_leaf)
        assert len(config.hyperparameter_grid()) == 36

    def test_fast_config_is_separate(self):
        config = RunConfig.from_file(os.path.join(CONFIG_DIR, "settings_fast.yaml"))
        assert not config.retune_each_trial
        assert len(config.hyperparameter_grid()) == 8


class TestCommandErrors:
    """Test cases for exit codes and error reporting"""

    def test_missing_inputs(self, tmp_path, capsys):
        config = _write_config(tmp_path)
        assert main(["stats", "--config", str(config)]) == 2
        assert "error [cli]:" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, capsys):
        config = _write_config(tmp_path, colour="blue")
        assert main(["synth", "--config", str(config)]) == 3
        assert "error [cli]: unknown config keys" in capsys.readouterr().err

    def test_malformed_yaml(self, tmp_path, capsys):
        path = tmp_path / "settings.yaml"
        path.write_text("seed: [7\n")
        assert main(["synth", "--config", str(path)]) == 3
        assert "not valid YAML" in capsys.readouterr().err

    def test_explain_needs_trained_model(self, tmp_path, capsys):
        config = _write_config(tmp_path)
        assert main(["synth", "--config", str(config)]) == 0
        assert main(["explain", "--config", str(config), "--tier", "2"]) == 2
        assert "train --tier 2" in capsys.readouterr().err

    def test_single_trial_rejected(self, tmp_path):
        config = _write_config(tmp_path)
        assert main(["eval", "--config", str(config), "--trials", "1"]) == 3


class TestSynthCommand:
    """Test cases for scrisk synth"""

    def test_same_seed_same_files(self, tmp_path):
        config = _write_config(tmp_path, synth_n_entities=150, synth_n_third=60)
        assert main(["synth", "--config", str(config), "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
        assert main(["synth", "--config", str(config), "--out", str(tmp_path / "c"), "--seed", "8"]) == 0
        names = ["companies.csv", "ratings.csv", "edges.csv", "breaches.csv"]
        assert [_digest(tmp_path / "a" / n) for n in names] == [_digest(tmp_path / "b" / n) for n in names]
        assert _digest(tmp_path / "a" / "edges.csv") != _digest(tmp_path / "c" / "edges.csv")


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    directory = tmp_path_factory.mktemp("pipeline")
    config = str(_write_config(directory))
    for argv in (["synth"], ["stats"], ["features"], ["train", "--tier", "1"], ["train", "--tier", "3"],
                 ["eval"], ["explain", "--tier", "3"], ["explain", "--tier", "3", "--entity", "E00001"],
                 ["rankdiff", "3", "1"]):
        assert main(argv + ["--config", config]) == 0, argv
    return directory, config


class TestPipeline:
    """Test cases for a full small pipeline run"""

    def test_artifacts(self, pipeline_run):
        directory, _ = pipeline_run
        out = directory / "out"
        expected = ["degree_cohorts.csv", "synth_stats.csv", "degree_cohorts.svg", "product_risk.csv",
                    "features_tier1.csv", "features_tier2.csv", "features_tier3.csv", "model_tier1.json",
                    "model_tier3.json", "report.json", "detection_curves.csv", "detection_rate.csv",
                    "detection_rate.svg", "importance_tier3.csv", "importance_tier3.svg",
                    "attribution_tier3_E00001.csv", "rankdiff_3_vs_1.csv", "rankdiff_3_vs_1.json",
                    "rankdiff_3_vs_1.svg", "percentile_3_vs_1_positive.csv", "percentile_3_vs_1_negative.csv"]
        for name in expected:
            assert (out / name).exists(), name

    def test_feature_tables(self, pipeline_run):
        out = pipeline_run[0] / "out"
        tier1 = pd.read_csv(out / "features_tier1.csv")
        tier3 = pd.read_csv(out / "features_tier3.csv")
        assert list(tier1.columns[:2]) == ["entity_id", "label"]
        assert len(tier1) == len(tier3) == 400
        assert list(tier3.columns[:len(tier1.columns)]) == list(tier1.columns)
        assert not tier3.isna().any().any()

    def test_report(self, pipeline_run):
        report = json.loads((pipeline_run[0] / "out" / "report.json").read_text())
        assert report["n_trials"] == 2
        assert set(report["auc"]) == {"1", "2", "3"}
        assert len(report["auc"]["3"]["trials"]) == 2
        assert set(report["auc_gaps"]) == {"3-2", "3-1", "2-1"}

    def test_rank_difference_accumulates_every_breach(self, pipeline_run):
        out = pipeline_run[0] / "out"
        frame = pd.read_csv(out / "rankdiff_3_vs_1.csv")
        summary = json.loads((out / "rankdiff_3_vs_1.json").read_text())
        assert frame["cumulative_breaches"].iloc[-1] == summary["total_breaches"] == frame["label"].sum()
        assert summary["positive_count"] == int((frame["rank_diff"] > 0).sum())

    def test_percentile_report(self, pipeline_run):
        table = pd.read_csv(pipeline_run[0] / "out" / "percentile_3_vs_1_positive.csv")
        assert len(table) == 6
        assert table["entity_id"].iloc[-1] == "population_mean"
        assert "employee_count_percentile" in table.columns

    def test_attribution_sums_to_margin(self, pipeline_run):
        frame = pd.read_csv(pipeline_run[0] / "out" / "attribution_tier3_E00001.csv")
        assert frame["base_value"].iloc[0] + frame["phi"].sum() == pytest.approx(frame["margin"].iloc[0], abs=1e-6)

    def test_rerun_is_byte_identical(self, pipeline_run):
        directory, config = pipeline_run
        out = directory / "out"
        names = ["report.json", "model_tier3.json", "features_tier3.csv", "detection_curves.csv",
                 "rankdiff_3_vs_1.csv", "detection_rate.svg"]
        before = {name: _digest(out / name) for name in names}
        for argv in (["features"], ["train", "--tier", "3"], ["eval"], ["rankdiff", "3", "1"]):
            assert main(argv + ["--config", config]) == 0
        assert {name: _digest(out / name) for name in names} == before
