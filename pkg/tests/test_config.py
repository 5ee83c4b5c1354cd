import json
from pathlib import Path

import pytest
import yaml

from config import (ConfigurationError, ExperimentConfig, LabConfig, LabSettings, load_experiment_config,
                    parse_experiment_config)

REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "config.yaml"


def write_yaml(path: Path, data) -> str:
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


class TestExperimentConfig:
    def test_defaults(self):
        config = LabConfig()
        assert config.experiment == ExperimentConfig()
        assert config.experiment.fold_indices() == [0, 1, 2, 3, 4]
        assert config.experiment.head.alpha == 20.0

    def test_reference_file_is_consistent(self):
        config = LabConfig(str(REFERENCE_CONFIG))
        assert config.validate() == []
        assert config.experiment.synthetic.volume_count == 20
        assert config.experiment.sgd.lr == 0.005

    def test_unknown_key_is_named(self, tmp_path):
        with pytest.raises(ConfigurationError, match="unknown config key 'learning_rate'"):
            LabConfig(write_yaml(tmp_path / "c.yaml", {"learning_rate": 0.1}))
        with pytest.raises(ConfigurationError, match="head.beta"):
            parse_experiment_config({"head": {"beta": 1.0}})

    def test_invalid_value(self):
        with pytest.raises(ConfigurationError, match="invalid value for 'iterations'"):
            parse_experiment_config({"iterations": -1})
        with pytest.raises(ConfigurationError):
            parse_experiment_config({"n_folds": 3, "folds": [0, 3]})
        with pytest.raises(ConfigurationError):
            parse_experiment_config(["not", "a", "mapping"])

    def test_missing_and_broken_files(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            LabConfig(str(tmp_path / "absent.yaml"))
        broken = tmp_path / "broken.yaml"
        broken.write_text("head: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="Failed to load"):
            load_experiment_config(broken)

    def test_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"protocol": "EP1", "head": {"kappa": 2.0}}), encoding="utf-8")
        config = load_experiment_config(path)
        assert config.protocol == "EP1" and config.head.kappa == 2.0

    def test_seed_override(self, tmp_path):
        config = LabConfig(write_yaml(tmp_path / "c.yaml", {"seed": 3, "iterations": 7}), seed=11)
        assert config.experiment.seed == 11 and config.experiment.iterations == 7

    def test_fold_selection(self):
        assert parse_experiment_config({"n_folds": 4, "folds": [3, 1]}).fold_indices() == [1, 3]


class TestOverrides:
    def test_nested_merge_keeps_siblings(self):
        base = LabConfig()
        changed = base.with_overrides({"head": {"kappa": 2.0}, "supervoxel_dir": "sv"})
        assert changed.experiment.head.kappa == 2.0
        assert changed.experiment.head.alpha == base.experiment.head.alpha
        assert changed.experiment.supervoxel_dir == "sv"
        assert base.experiment.head.kappa == 0.5 and base.experiment.supervoxel_dir is None

    def test_invalid_override(self):
        with pytest.raises(ConfigurationError):
            LabConfig().with_overrides({"supervoxel": {"rho": 0}})


class TestValidate:
    def test_indivisible_crop(self):
        config = LabConfig().with_overrides({"preprocessing": {"crop": [30, 30]}})
        assert any("not divisible" in problem for problem in config.validate())

    def test_too_few_volumes(self):
        config = LabConfig().with_overrides({"synthetic": {"volume_count": 3}})
        assert any("cannot fill" in problem for problem in config.validate())


class TestResolvedConfig:
    def test_canonical_and_reloadable(self, tmp_path):
        config = LabConfig(str(REFERENCE_CONFIG))
        first = config.write_resolved(tmp_path / "a")
        second = LabConfig(str(REFERENCE_CONFIG)).write_resolved(tmp_path / "b")
        assert first.read_bytes() == second.read_bytes()
        reloaded = load_experiment_config(first)
        assert reloaded == config.experiment

    def test_summary(self):
        summary = LabConfig().with_overrides({"loss": {"par_loss": False}}).get_config_summary()
        assert summary["loss_terms"] == ["L_S", "L_T"]
        assert summary["config_file"] == "<defaults>"


class TestSettings:
    def test_environment(self, monkeypatch):
        monkeypatch.setenv("ADNET_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("ADNET_THREADS", "4")
        settings = LabSettings()
        assert settings.log_level == "DEBUG" and settings.threads == 4
        assert settings.resolved_log_file.endswith("adnet_lab.log")
