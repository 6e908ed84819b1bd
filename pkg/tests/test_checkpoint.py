"""Unit Tests für Checkpoint-IO."""

import json

import numpy as np
import pytest

from src.core.errors import CheckpointError
from src.utils.checkpoint import FORMAT_VERSION, Checkpoint, load_checkpoint, save_checkpoint


class TestCheckpoint:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.ckpt = Checkpoint(
            segments={"sac/actor": rng.standard_normal(7), "buffer/states": rng.standard_normal((3, 2))},
            config={"env": "pendulum"},
            extras={"timestep": 12, "model_nll": 1.5},
        )

    def test_layout(self, tmp_path):
        root = save_checkpoint(self.ckpt, tmp_path / "ckpt")
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["format_version"] == FORMAT_VERSION
        files = {entry["name"]: entry["file"] for entry in manifest["segments"]}
        assert files["sac/actor"] == "sac__actor.bin"
        # rohe little-endian float64 Werte
        assert (root / "sac__actor.bin").stat().st_size == 7 * 8

    def test_exact_values(self, tmp_path):
        save_checkpoint(self.ckpt, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        for name, arr in self.ckpt.segments.items():
            assert np.array_equal(loaded.segments[name], arr)
        assert loaded.config == {"env": "pendulum"}
        assert loaded.extras["timestep"] == 12

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing")

    def test_wrong_version(self, tmp_path):
        root = save_checkpoint(self.ckpt, tmp_path / "ckpt")
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        manifest["format_version"] = FORMAT_VERSION + 1
        (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(CheckpointError):
            load_checkpoint(root)

    def test_truncated_segment(self, tmp_path):
        root = save_checkpoint(self.ckpt, tmp_path / "ckpt")
        payload = (root / "sac__actor.bin").read_bytes()
        (root / "sac__actor.bin").write_bytes(payload[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(root)
