"""MetricsRecorder: Episoden-Statistiken und metrics.csv.

Spaltenreihenfolge ist fest; Zahlen mit 9 signifikanten Stellen, damit
gleiche Läufe byte-identische Dateien schreiben.
"""

import csv
import io
import math
import os
from dataclasses import astuple, dataclass

import numpy as np

METRICS_COLUMNS = (
    "timestep",
    "episode_return",
    "critic_loss_real",
    "actor_loss",
    "alpha",
    "model_nll_holdout",
    "meta_loss",
    "w_p25",
    "w_p50",
    "w_p75",
)


@dataclass
class MetricsRecord:
    timestep: int
    episode_return: float
    critic_loss_real: float
    actor_loss: float
    alpha: float
    model_nll_holdout: float
    meta_loss: float
    w_p25: float
    w_p50: float
    w_p75: float


def format_value(value: float | int) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if math.isnan(value):
        return "nan"
    return f"{value:.9g}"


def format_row(record: MetricsRecord) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(format_value(v) for v in astuple(record))
    return buf.getvalue()


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


class EpisodeStats:
    """Sammelt Werte während einer Episode (Verluste, Gewichte)."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.episode_return: float = 0.0
        self.critic_losses: list[float] = []
        self.actor_losses: list[float] = []
        self.meta_losses: list[float] = []
        self.weights: np.ndarray | None = None

    def add_reward(self, reward: float) -> None:
        self.episode_return += reward

    def weight_quartiles(self) -> tuple[float, float, float]:
        if self.weights is None or self.weights.size == 0:
            return float("nan"), float("nan"), float("nan")
        p25, p50, p75 = np.percentile(self.weights, [25, 50, 75])
        return float(p25), float(p50), float(p75)

    def record(self, timestep: int, alpha: float, model_nll: float) -> MetricsRecord:
        p25, p50, p75 = self.weight_quartiles()
        return MetricsRecord(
            timestep,
            self.episode_return,
            _mean(self.critic_losses),
            _mean(self.actor_losses),
            alpha,
            model_nll,
            _mean(self.meta_losses),
            p25,
            p50,
            p75,
        )


class MetricsRecorder:
    """Schreibt eine Zeile pro abgeschlossener Episode nach metrics.csv."""

    def __init__(self, path: str, rows: list[str] | None = None):
        self.path = path
        self.rows: list[str] = list(rows or [])
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(",".join(METRICS_COLUMNS) + "\n")
            f.writelines(self.rows)

    def append(self, record: MetricsRecord) -> None:
        line = format_row(record)
        self.rows.append(line)
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            f.write(line)

    def __len__(self) -> int:
        return len(self.rows)
