"""Tests für Trainer, Checkpoint-Fortsetzung, Evaluation, Gewichts-Probe und CLI."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from main import build_parser, main
from src.core.errors import CheckpointError, ConfigError, TrainingDivergedError
from src.core.trainer import (
    METRICS_FILE,
    Trainer,
    compare,
    degradation_fraction,
    evaluate_policy,
    robustness,
    run_eval,
    run_training,
    run_weight_probe,
)
from src.utils.config import TrainConfig
from src.utils.stats import METRICS_COLUMNS

SMOKE = {
    "env": "pendulum",
    "seed": 0,
    "total_steps": 420,
    "init_random_steps": 200,
    "batch_size": 16,
    "sac_hidden": [8],
    "ensemble_size": 2,
    "model_samples": 2,
    "model_hidden": [8],
    "model_train_epochs": 1,
    "model_batch_size": 64,
    "horizon": 3,
    "n_explore": 4,
    "n_valid": 16,
    "n_train": 4,
    "k_updates": 2,
    "imag_batch_size": 16,
    "weight_hidden": 4,
    "checkpoint_every_episodes": 1,
}


def _config(**overrides) -> TrainConfig:
    return TrainConfig.from_dict({**SMOKE, **overrides})


class TestTrainer:
    def test_metrics_file_layout(self, tmp_path):
        Trainer(_config(), tmp_path).run()
        lines = (tmp_path / METRICS_FILE).read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(METRICS_COLUMNS)
        # 420 Schritte bei Horizont 200: zwei volle Episoden
        assert len(lines) == 3
        first, second = lines[1].split(","), lines[2].split(",")
        assert first[0] == "200" and second[0] == "400"
        assert second[6] != "nan"  # meta_loss
        assert (tmp_path / "checkpoints" / "ep_00001" / "manifest.json").is_file()
        assert (tmp_path / "checkpoints" / "final" / "manifest.json").is_file()

    def test_same_seed_same_metrics(self, tmp_path):
        Trainer(_config(), tmp_path / "a").run()
        Trainer(_config(), tmp_path / "b").run()
        assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = _config(total_steps=600)
        Trainer(cfg, tmp_path / "full").run()
        resumed = run_training(cfg, tmp_path / "resumed", resume=tmp_path / "full" / "checkpoints" / "ep_00001")
        assert (resumed / METRICS_FILE).read_bytes() == (tmp_path / "full" / METRICS_FILE).read_bytes()

    def test_without_reweighting(self, tmp_path):
        trainer = Trainer(_config(reweight_enabled=False), tmp_path)
        trainer.run()
        assert trainer.wnet is None
        with open(tmp_path / METRICS_FILE, encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert all(row["meta_loss"] == "nan" and row["w_p50"] == "nan" for row in rows)

    def test_weight_quartiles_recorded(self):
        trainer = Trainer(_config())
        assert trainer.run() is None
        assert len(trainer.metric_rows) == 2
        p25, p50, p75 = (float(v) for v in trainer.metric_rows[-1].strip().split(",")[7:10])
        assert 0.0 < p25 <= p50 <= p75 < 1.0

    def test_divergence_writes_checkpoint(self, tmp_path, monkeypatch):
        trainer = Trainer(_config(), tmp_path)

        def explode(first_in_episode=False):
            raise FloatingPointError("Critic-Verlust")

        monkeypatch.setattr(trainer, "train_step", explode)
        with pytest.raises(TrainingDivergedError) as info:
            trainer.run()
        assert info.value.timestep == 200
        assert (tmp_path / "checkpoints" / "diverged" / "manifest.json").is_file()


class TestEvaluationAndProbe:
    @pytest.fixture(scope="class")
    def trained(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        Trainer(_config(), out).run()
        return out / "checkpoints" / "final"

    def test_eval_deterministic(self, trained):
        assert run_eval(trained, 2, seed=3) == run_eval(trained, 2, seed=3)

    def test_eval_single_episode_std_zero(self, trained):
        _, std = run_eval(trained, 1, seed=0)
        assert std == 0.0

    def test_probe_weights(self, trained, tmp_path):
        out = tmp_path / "weights.csv"
        rows = run_weight_probe(trained, [0.1, 100.0], out, n_rollouts=8)
        assert len(rows) == 2 * 3
        with open(out, encoding="utf-8") as f:
            reader = csv.DictReader(f)
            assert reader.fieldnames == ["lambda_e", "depth", "weight_median", "n_samples"]
            parsed = list(reader)
        assert [r["depth"] for r in parsed[:3]] == ["0", "1", "2"]
        assert all(0.0 < float(r["weight_median"]) < 1.0 for r in parsed)

    def test_probe_without_weight_net(self, tmp_path):
        Trainer(_config(reweight_enabled=False), tmp_path).run()
        with pytest.raises(CheckpointError):
            run_weight_probe(tmp_path / "checkpoints" / "final", [1.0], tmp_path / "w.csv")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            run_eval(tmp_path / "nothing", 1, 0)

    def test_evaluate_policy_length(self):
        trainer = Trainer(_config())
        returns = evaluate_policy(trainer.sac, "pendulum", 2, seed=0)
        assert len(returns) == 2
        assert all(np.isfinite(returns))


@pytest.mark.slow
class TestCompare:
    def test_comparison_csv(self, tmp_path):
        rows = compare(_config(), [0, 1], tmp_path)
        assert [(r["seed"], r["variant"]) for r in rows] == [
            (0, "rew_pe_sac"), (0, "pe_sac"), (1, "rew_pe_sac"), (1, "pe_sac"),
        ]
        assert (tmp_path / "comparison.csv").is_file()

    def test_robustness_csv(self, tmp_path):
        rows = robustness(_config(), [4], [0], tmp_path)
        assert [r["variant"] for r in rows] == ["rew_pe_sac", "pe_sac"]
        assert all(r["model_hidden_default"] == "8" and r["model_hidden_weak"] == "4" for r in rows)
        assert (tmp_path / "default" / "comparison.csv").is_file()
        assert (tmp_path / "weak" / "comparison.csv").is_file()
        with open(tmp_path / "robustness.csv", encoding="utf-8") as f:
            parsed = list(csv.DictReader(f))
        assert len(parsed) == 2
        assert parsed[0]["n_seeds"] == "1"


class TestDegradationFraction:
    def test_negative_returns(self):
        assert degradation_fraction(-100.0, -150.0) == pytest.approx(0.5)

    def test_positive_returns(self):
        assert degradation_fraction(200.0, 150.0) == pytest.approx(0.25)

    def test_improvement_is_negative(self):
        assert degradation_fraction(-100.0, -50.0) == pytest.approx(-0.5)

    def test_zero_default_is_nan(self):
        assert np.isnan(degradation_fraction(0.0, -10.0))

    def test_invalid_weak_hidden(self, tmp_path):
        with pytest.raises(ConfigError):
            robustness(_config(), [0], [0], tmp_path)


class TestCli:
    def test_robustness_arguments(self):
        args = build_parser().parse_args(["robustness", "--config", "c.json", "--seeds", "0,1", "--out", "o"])
        assert args.weak_hidden == [64]
        assert args.seeds == [0, 1]

    def test_missing_config_exit_code(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out")])
        assert code == 2
        assert "[ERROR]" in capsys.readouterr().err

    def test_unknown_key_exit_code(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"env": "pendulum", "learning_rate": 1.0}), encoding="utf-8")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "out")]) == 2

    def test_train_writes_outputs(self, tmp_path):
        path = tmp_path / "smoke.json"
        path.write_text(json.dumps(SMOKE), encoding="utf-8")
        out = tmp_path / "out"
        assert main(["train", "--config", str(path), "--seed", "1", "--out", str(out), "--no-reweight"]) == 0
        echo = json.loads((out / "config.json").read_text(encoding="utf-8"))
        assert echo["seed"] == 1 and echo["reweight_enabled"] is False
        assert (out / METRICS_FILE).is_file()
        assert (out / "logs" / "training.log").is_file()

    def test_gradcheck_nn(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["gradcheck", "--scope", "nn", "--instances", "3"]) == 0
        assert "PASS" in capsys.readouterr().out
        assert Path("logs/training.log").is_file()
