"""Unit Tests für ConfigManager und TrainConfig."""

import json

import pytest

from src.core.errors import ConfigError
from src.utils.config import DEFAULTS, ConfigManager, TrainConfig


class TestConfigManager:
    def test_defaults(self):
        cfg = ConfigManager().to_train_config()
        assert cfg.env == "pendulum"
        assert cfg.horizon == 5
        assert cfg.explore_scale == 10.0
        assert cfg.sac_hidden == (64, 64)

    def test_load_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"env": "pointmass", "model_hidden": [32]}), encoding="utf-8")
        manager = ConfigManager(str(path))
        assert manager.get("env") == "pointmass"
        cfg = manager.to_train_config()
        assert cfg.model_hidden == (32,)
        assert cfg.n_valid == DEFAULTS["n_valid"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(str(tmp_path / "missing.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{env: ", encoding="utf-8")
        with pytest.raises(ConfigError):
            ConfigManager(str(path))

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"horizont": 3}), encoding="utf-8")
        with pytest.raises(ConfigError):
            ConfigManager(str(path))

    def test_set_unknown_key(self):
        with pytest.raises(ConfigError):
            ConfigManager().set("foo", 1)

    def test_overrides(self):
        manager = ConfigManager(overrides={"seed": 7, "reweight_enabled": False})
        assert manager.get("seed") == 7
        assert manager.to_train_config().reweight_enabled is False

    def test_save_roundtrip(self, tmp_path):
        manager = ConfigManager(overrides={"seed": 3})
        path = tmp_path / "echo" / "config.json"
        manager.save(str(path))
        assert ConfigManager(str(path)).get_all() == manager.get_all()


class TestTrainConfig:
    def test_unknown_env(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"env": "halfcheetah"})

    @pytest.mark.parametrize(
        "key,value",
        [("horizon", 0), ("n_valid", -1), ("mu", 0.0), ("gamma", 1.5), ("model_holdout_ratio", 1.0), ("batch_size", 2.5)],
    )
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({key: value})

    def test_warmup_shorter_than_horizon(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"init_random_steps": 2, "horizon": 5})
        cfg = TrainConfig.from_dict({"init_random_steps": 2, "horizon": 5, "reweight_enabled": False})
        assert cfg.init_random_steps == 2

    def test_meta_config(self):
        meta = TrainConfig.from_dict({"k_updates": 3, "mu": 0.01}).meta_config()
        assert meta.k_updates == 3
        assert meta.mu == 0.01

    def test_dict_roundtrip(self):
        cfg = TrainConfig.from_dict({"model_hidden": [16]})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "name", ["pendulum.json", "pointmass.json", "pointmass_weak_model.json", "cartpole_swingup.json", "smoke.json"]
    )
    def test_shipped_configs(self, name):
        from pathlib import Path

        path = Path(__file__).resolve().parent.parent / "config" / name
        assert ConfigManager(str(path)).to_train_config().env in ("pendulum", "pointmass", "cartpole-swingup")
