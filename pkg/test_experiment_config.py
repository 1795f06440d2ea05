#!/usr/bin/env python3
import json
from pathlib import Path

import pytest

from bvm_errors import ConfigError
from experiment_config import EXPERIMENTS, ExperimentConfig


def test_config_validation():
    # out-of-range values raise ConfigError
    with pytest.raises(ConfigError):
        ExperimentConfig(experiment="logistic_bvm")
    with pytest.raises(ConfigError):
        ExperimentConfig(n_values=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(n_values=[16, 4])
    with pytest.raises(ConfigError):
        ExperimentConfig(replications=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(level=1.0)
    with pytest.raises(ConfigError):
        ExperimentConfig(jobs=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(h_grid_points=5)

    # wrong types raise TypeError
    with pytest.raises(TypeError):
        ExperimentConfig(n_values=[4.0, 16.0])
    with pytest.raises(TypeError):
        ExperimentConfig(replications="10")
    with pytest.raises(TypeError):
        ExperimentConfig(seed=True)

    # a valid configuration is accepted
    config = ExperimentConfig(experiment="plr_bvm", n_values=[0, 50, 200], replications=3,
                              seed=7, jobs=2, level=0.9)
    assert config.n_values == [0, 50, 200]
    assert config.level == 0.9


def test_setter_keeps_the_old_value_on_error():
    config = ExperimentConfig()
    with pytest.raises(ConfigError):
        config.replications = -1
    assert config.replications == 100


def test_every_experiment_has_a_preset():
    for name in EXPERIMENTS:
        preset = getattr(ExperimentConfig, name)()
        assert preset.experiment == name
        assert preset.n_values == sorted(preset.n_values)


def test_from_dict_starts_from_the_preset():
    config = ExperimentConfig.from_dict({"experiment": "ilan_probe", "replications": 2,
                                         "model_params": {"draws": 50}})
    assert config.replications == 2
    assert config.param("draws") == 50
    # untouched preset keys survive the merge
    assert config.param("h_values") == [-2.0, -1.0, 1.0, 2.0]
    assert config.param("missing", 3) == 3


def test_from_dict_rejects_bad_payloads():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "plr_bvm", "burn_in": 6})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict([1, 2, 3])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model_params": [1]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "plr_bvm"}, experiment="coverage")
    filled = ExperimentConfig.from_dict({"replications": 4}, experiment="coverage")
    assert filled.experiment == "coverage"


def test_from_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(ExperimentConfig.mixture_bvm().to_dict()))
    loaded = ExperimentConfig.from_json(path)
    assert loaded.to_dict() == ExperimentConfig.mixture_bvm().to_dict()

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(broken)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "absent.json")


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_shipped_configs_load(name):
    path = Path(__file__).parent / "configs" / f"{name}.json"
    loaded = ExperimentConfig.from_json(path, name)
    preset = getattr(ExperimentConfig, name)()
    assert loaded.n_values == preset.n_values
    for key, value in preset.model_params.items():
        assert loaded.param(key) == value


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
