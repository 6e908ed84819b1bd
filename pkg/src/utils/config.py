"""ConfigManager: Lädt eine Lauf-Konfiguration (JSON) über Default-Werten.

Unbekannte Schlüssel werden abgelehnt; das Ergebnis ist eine eingefrorene
TrainConfig. Unknown keys are rejected, values are validated.
"""

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any

from src.core.envs import ENV_SPECS
from src.core.errors import ConfigError
from src.core.reweight import MetaConfig
from src.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULTS: dict[str, Any] = {
    "env": "pendulum",
    "seed": 0,
    "total_steps": 30_000,
    "init_random_steps": 1000,
    "gamma": 0.99,
    "tau": 0.005,
    "target_entropy": None,  # None -> -action_dim
    "init_alpha": 1.0,
    "lr": 3e-4,  # theta_q, theta_pi, alpha
    "batch_size": 256,  # reale SAC-Batch / real SAC batch
    "sac_hidden": [64, 64],
    # Ensemble
    "ensemble_size": 5,  # B
    "model_samples": 4,  # M
    "model_hidden": [64, 64],
    "model_lr": 1e-3,
    "model_train_epochs": 5,
    "model_batch_size": 256,
    "model_holdout_ratio": 0.1,
    "model_log_std_bounds": [-5.0, 0.5],
    "num_workers": 1,
    # Reweighting
    "reweight_enabled": True,
    "horizon": 5,  # H
    "n_explore": 32,  # N_e
    "n_valid": 256,  # N_v
    "n_train": 64,  # N_t
    "k_updates": 10,  # K
    "mu": 3e-4,
    "mu_w": 1e-4,
    "explore_scale": 10.0,  # lambda_e
    "imag_batch_size": 256,
    "weight_hidden": 32,
    # Buffer / Ausgabe
    "buffer_capacity": 200_000,
    "checkpoint_every_episodes": 10,
}


@dataclass(frozen=True)
class TrainConfig:
    env: str
    seed: int
    total_steps: int
    init_random_steps: int
    gamma: float
    tau: float
    target_entropy: float | None
    init_alpha: float
    lr: float
    batch_size: int
    sac_hidden: tuple[int, ...]
    ensemble_size: int
    model_samples: int
    model_hidden: tuple[int, ...]
    model_lr: float
    model_train_epochs: int
    model_batch_size: int
    model_holdout_ratio: float
    model_log_std_bounds: tuple[float, float]
    num_workers: int
    reweight_enabled: bool
    horizon: int
    n_explore: int
    n_valid: int
    n_train: int
    k_updates: int
    mu: float
    mu_w: float
    explore_scale: float
    imag_batch_size: int
    weight_hidden: int
    buffer_capacity: int
    checkpoint_every_episodes: int

    def __post_init__(self) -> None:
        if self.env not in ENV_SPECS:
            raise ConfigError(f"Unbekannte Umgebung: {self.env} (bekannt: {sorted(ENV_SPECS)})")
        counts = (
            "total_steps", "batch_size", "ensemble_size", "model_samples",
            "model_train_epochs", "model_batch_size", "num_workers", "horizon",
            "n_explore", "n_valid", "n_train", "k_updates", "imag_batch_size",
            "weight_hidden", "buffer_capacity", "checkpoint_every_episodes",
        )
        for name in counts:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} muss eine positive ganze Zahl sein, bekam {value!r}")
        if self.init_random_steps < 0:
            raise ConfigError("init_random_steps darf nicht negativ sein")
        if self.reweight_enabled and self.init_random_steps < self.horizon:
            raise ConfigError("init_random_steps muss >= horizon sein (reale Aktionsfolgen für den Meta-Schritt)")
        for name in ("lr", "model_lr", "mu", "mu_w", "explore_scale", "init_alpha"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} muss > 0 sein")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.tau <= 1.0:
            raise ConfigError("gamma und tau müssen in (0, 1] liegen")
        if not 0.0 <= self.model_holdout_ratio < 1.0:
            raise ConfigError("model_holdout_ratio muss in [0, 1) liegen")
        lo, hi = self.model_log_std_bounds
        if not lo < hi:
            raise ConfigError(f"model_log_std_bounds ungültig: {self.model_log_std_bounds}")
        if not self.sac_hidden or not self.model_hidden:
            raise ConfigError("Netze brauchen mindestens eine versteckte Schicht")

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            mu=self.mu,
            mu_w=self.mu_w,
            n_explore=self.n_explore,
            n_valid=self.n_valid,
            n_train=self.n_train,
            k_updates=self.k_updates,
            horizon=self.horizon,
            explore_scale=self.explore_scale,
            imag_batch_size=self.imag_batch_size,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"Unbekannte Konfigurationsschlüssel: {', '.join(unknown)}")
        merged = {**DEFAULTS, **values}
        kwargs: dict[str, Any] = {}
        for f in fields(cls):
            value = merged[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Ungültige Konfiguration: {e}") from e


class ConfigManager:
    """Verwaltet eine Lauf-Konfiguration: JSON-Datei über DEFAULTS gemischt."""

    def __init__(self, config_path: str | None = None, overrides: dict[str, Any] | None = None):
        self._config_path = config_path
        self._config: dict[str, Any] = {}
        self._load()
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def _load(self) -> None:
        """Lädt die Konfiguration aus der JSON-Datei."""
        self._config = dict(DEFAULTS)
        if self._config_path is None:
            return
        if not os.path.exists(self._config_path):
            raise ConfigError(f"Konfigurationsdatei nicht gefunden: {self._config_path}")
        try:
            with open(self._config_path, "r", encoding="utf-8") as f:
                saved = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            raise ConfigError(f"Konfiguration nicht lesbar: {self._config_path} ({e})") from e
        if not isinstance(saved, dict):
            raise ConfigError("Konfiguration muss ein flaches JSON-Objekt sein")
        for key, value in saved.items():
            self.set(key, value)
        logger.info("Konfiguration geladen: %s", self._config_path)

    def save(self, path: str) -> None:
        """Speichert die aktuelle Konfiguration (z.B. als Echo im Ausgabeordner)."""
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self._config, f, indent=4, sort_keys=True)

    def get(self, key: str, default: Any = None) -> Any:
        return self._config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"Unbekannter Konfigurationsschlüssel: {key}")
        self._config[key] = value

    def get_all(self) -> dict[str, Any]:
        return dict(self._config)

    def to_train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self._config)
