"""GaussianEnsemble: B gebootstrappte probabilistische Dynamikmodelle.

Jedes Modell ist ein MLP (s ⊕ a) -> (Mittelwert, log-Std) des Zustands-
deltas s' - s mit diagonaler Gauss-Verteilung. Training per NLL und Adam
auf dem eigenen Bootstrap-Datensatz R_b. Rollouts erzeugen pro Schritt ein
TransitionSet mit M x B Kandidaten; einer davon wird gleichverteilt als
nächster Trunk-Zustand gewählt.

Ensemble of bootstrapped probabilistic dynamics models with fan-out rollouts.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from src.core.errors import ConfigError, EmptyBufferError
from src.core.nn import (
    AdamState,
    MlpSpec,
    ParamVector,
    adam_init,
    adam_step,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
    sigmoid,
)
from src.core.replay import ReplayBuffer, TransitionBatch
from src.utils.logger import get_logger
from src.utils.rng import spawn

logger = get_logger(__name__)

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
STD_FLOOR = 1e-6

RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]
ActionSource = np.ndarray | Policy


@dataclass
class ModelStats:
    """Normalisierung: Eingänge (s ⊕ a) und Zielgröße Delta = s' - s."""

    input_mean: np.ndarray
    input_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "ModelStats":
        d_in = state_dim + action_dim
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(state_dim), np.ones(state_dim))

    @classmethod
    def fit(cls, data: TransitionBatch) -> "ModelStats":
        inputs = np.concatenate([data.states, data.actions], axis=1)
        delta = data.next_states - data.states
        return cls(
            inputs.mean(axis=0),
            np.maximum(inputs.std(axis=0), STD_FLOOR),
            delta.mean(axis=0),
            np.maximum(delta.std(axis=0), STD_FLOOR),
        )


@dataclass
class ProbabilisticModel:
    spec: MlpSpec
    params: ParamVector
    stats: ModelStats
    optimizer: AdamState
    log_std_bounds: tuple[float, float] = (-5.0, 0.5)

    @property
    def state_dim(self) -> int:
        return self.spec.output_dim // 2


@dataclass
class GaussianEnsemble:
    models: list[ProbabilisticModel]
    bootstrap_indices: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.models:
            raise ConfigError("Ensemble braucht mindestens ein Modell")
        if any(m.spec != self.models[0].spec for m in self.models):
            raise ConfigError("Alle Ensemble-Modelle müssen dieselbe Architektur haben")

    @property
    def size(self) -> int:
        return len(self.models)

    @property
    def state_dim(self) -> int:
        return self.models[0].state_dim

    @property
    def action_dim(self) -> int:
        return self.models[0].spec.input_dim - self.state_dim

    @property
    def stats(self) -> ModelStats:
        return self.models[0].stats

    def set_stats(self, stats: ModelStats) -> None:
        for model in self.models:
            model.stats = stats


def init_ensemble(
    state_dim: int,
    action_dim: int,
    n_models: int,
    hidden_dims: Sequence[int],
    rng: np.random.Generator,
    lr: float = 1e-3,
    log_std_bounds: tuple[float, float] = (-5.0, 0.5),
    activation: str = "relu",
) -> GaussianEnsemble:
    """B unabhängig initialisierte Modelle mit gemeinsamer Normalisierung."""
    lo, hi = log_std_bounds
    if not lo < hi:
        raise ConfigError(f"log_std_bounds ungültig: {log_std_bounds}")
    spec = MlpSpec(
        state_dim + action_dim,
        tuple(hidden_dims),
        2 * state_dim,
        (activation,) * len(hidden_dims) + ("identity",),
    )
    stats = ModelStats.identity(state_dim, action_dim)
    models = []
    for _ in range(n_models):
        params = init_mlp_params(spec, rng)
        models.append(ProbabilisticModel(spec, params, stats, adam_init(params.size, lr), log_std_bounds))
    return GaussianEnsemble(models)


# ---------------------------------------------------------------------------
# Vorhersage-Köpfe
# ---------------------------------------------------------------------------


def soft_clamp(raw: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Glatte Begrenzung in [lo, hi]; liefert Wert und Ableitung nach raw.

    lo + (hi - lo) * sigmoid(raw) verlässt das Intervall auch für |raw| gegen
    unendlich nicht.
    """
    s = sigmoid(raw)
    value = lo + (hi - lo) * s
    slope = (hi - lo) * s * (1.0 - s)
    return value, slope


@dataclass
class _HeadCache:
    mlp_cache: object
    log_std_slope: np.ndarray


def _heads(
    model: ProbabilisticModel, s: np.ndarray, a: np.ndarray
) -> tuple[np.ndarray, np.ndarray, _HeadCache]:
    """Mittelwert des Deltas (roh) und begrenzte log-Std für Batches (n, .)."""
    x = (np.concatenate([s, a], axis=-1) - model.stats.input_mean) / model.stats.input_std
    out, cache = mlp_forward(model.spec, model.params, x)
    S = model.state_dim
    mean_delta = model.stats.delta_mean + model.stats.delta_std * out[:, :S]
    log_std, slope = soft_clamp(out[:, S:], *model.log_std_bounds)
    return mean_delta, log_std, _HeadCache(cache, slope)


def gaussian_nll(target: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Pro Sample: sum_d [log s_d + (t_d - m_d)^2 / (2 s_d^2) + 0.5 ln 2pi]."""
    inv_var = np.exp(-2.0 * log_std)
    per_dim = log_std + 0.5 * (target - mean) ** 2 * inv_var + HALF_LOG_2PI
    return per_dim.sum(axis=-1)


def _as_rows(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    arr = arr[None, :] if arr.ndim == 1 else arr
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ConfigError(f"{what}: erwartet Dimension {dim}, bekam Form {np.shape(x)}")
    return arr


def nll_loss(model: ProbabilisticModel, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> float:
    """Mittlere Gauss-NLL des Deltas über die Batch (inkl. Konstante)."""
    S, A = model.state_dim, model.spec.input_dim - model.state_dim
    s, a, s_next = _as_rows(s, S, "s"), _as_rows(a, A, "a"), _as_rows(s_next, S, "s'")
    if s.shape[0] == 0:
        raise ValueError("NLL auf leerer Batch")
    mean_delta, log_std, _ = _heads(model, s, a)
    return float(gaussian_nll(s_next - s, mean_delta, log_std).mean())


def nll_loss_and_grad(
    model: ProbabilisticModel, s: np.ndarray, a: np.ndarray, s_next: np.ndarray
) -> tuple[float, ParamVector]:
    S, A = model.state_dim, model.spec.input_dim - model.state_dim
    s, a, s_next = _as_rows(s, S, "s"), _as_rows(a, A, "a"), _as_rows(s_next, S, "s'")
    n = s.shape[0]
    if n == 0:
        raise ValueError("NLL auf leerer Batch")
    mean_delta, log_std, cache = _heads(model, s, a)
    target = s_next - s
    loss = float(gaussian_nll(target, mean_delta, log_std).mean())

    resid = target - mean_delta
    inv_var = np.exp(-2.0 * log_std)
    d_mean = -resid * inv_var / n
    d_log_std = (1.0 - resid * resid * inv_var) / n
    upstream = np.concatenate(
        [d_mean * model.stats.delta_std, d_log_std * cache.log_std_slope], axis=1
    )
    grad, _ = mlp_backward(model.spec, model.params, cache.mlp_cache, upstream)
    return loss, grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EnsembleTrainResult:
    holdout_nll_before: float
    holdout_nll_after: float
    n_updates: int


def train_model(
    model: ProbabilisticModel,
    data: TransitionBatch,
    indices: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 256,
    holdout_ratio: float = 0.1,
) -> tuple[float, float, int]:
    """Trainiert ein Modell auf seinem Bootstrap-Datensatz (Warmstart).

    Liefert (Holdout-NLL vorher, nachher, Anzahl Updates). Ohne Holdout
    (sehr kleine Datensätze) wird die Trainings-NLL berichtet.
    """
    perm = indices[rng.permutation(indices.size)]
    n_hold = int(holdout_ratio * perm.size) if perm.size >= 10 else 0
    holdout, train = perm[:n_hold], perm[n_hold:]
    probe = holdout if n_hold > 0 else train

    def probe_nll() -> float:
        return nll_loss(model, data.states[probe], data.actions[probe], data.next_states[probe])

    before = probe_nll()
    n_updates = 0
    for _ in range(epochs):
        order = train[rng.permutation(train.size)]
        for start in range(0, order.size, batch_size):
            idx = order[start : start + batch_size]
            _, grad = nll_loss_and_grad(model, data.states[idx], data.actions[idx], data.next_states[idx])
            model.optimizer, model.params = adam_step(model.optimizer, model.params, grad)
            n_updates += 1
    return before, probe_nll(), n_updates


def train_ensemble(
    ensemble: GaussianEnsemble,
    buffer: ReplayBuffer,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 256,
    holdout_ratio: float = 0.1,
    num_workers: int = 1,
) -> EnsembleTrainResult:
    """Zieht neue Bootstrap-Indizes und trainiert alle B Modelle.

    Bei num_workers > 1 laufen die Modelle in einem Thread-Pool; jedes Modell
    hat seinen eigenen Kind-Generator, das Ergebnis ist daher unabhängig von
    der Ausführungsreihenfolge.
    """
    if len(buffer) == 0:
        raise EmptyBufferError("Ensemble-Training braucht einen nicht-leeren Buffer")
    data = buffer.all()
    ensemble.set_stats(ModelStats.fit(data))
    ensemble.bootstrap_indices = buffer.bootstrap_datasets(ensemble.size, rng)
    child_rngs = spawn(rng, ensemble.size)

    def run(b: int) -> tuple[float, float, int]:
        return train_model(
            ensemble.models[b],
            data,
            ensemble.bootstrap_indices[b],
            epochs,
            child_rngs[b],
            batch_size,
            holdout_ratio,
        )

    if num_workers > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            results = list(pool.map(run, range(ensemble.size)))
    else:
        results = [run(b) for b in range(ensemble.size)]

    before = float(np.mean([r[0] for r in results]))
    after = float(np.mean([r[1] for r in results]))
    n_updates = sum(r[2] for r in results)
    logger.info(
        "Ensemble trainiert: N=%d, Holdout-NLL %.4f -> %.4f (%d Updates)",
        len(buffer), before, after, n_updates,
    )
    return EnsembleTrainResult(before, after, n_updates)


# ---------------------------------------------------------------------------
# Vorhersage und Rollouts
# ---------------------------------------------------------------------------


def _predict_all(
    ensemble: GaussianEnsemble, s: np.ndarray, a: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mittelwerte und Stds des Folgezustands, Form (B, n, S)."""
    means, stds = [], []
    for model in ensemble.models:
        mean_delta, log_std, _ = _heads(model, s, a)
        means.append(s + mean_delta)
        stds.append(np.exp(log_std))
    return np.stack(means), np.stack(stds)


def predict_distribution(
    ensemble: GaussianEnsemble, s: np.ndarray, a: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """B Paare (mu_b, sigma_b) des nächsten Zustands für einen Zustand oder eine Batch."""
    single = np.ndim(s) == 1
    rows_s = _as_rows(s, ensemble.state_dim, "s")
    rows_a = _as_rows(a, ensemble.action_dim, "a")
    means, stds = _predict_all(ensemble, rows_s, rows_a)
    if single:
        return [(means[b, 0], stds[b, 0]) for b in range(ensemble.size)]
    return [(means[b], stds[b]) for b in range(ensemble.size)]


@dataclass
class TransitionSet:
    """Fan-out eines Rollout-Schritts: Trunk (s, a) und M x B (r, s')-Paare."""

    trunk_state: np.ndarray
    action: np.ndarray
    rewards: np.ndarray  # (F,)
    next_states: np.ndarray  # (F, S)
    chosen_next: int
    depth: int

    @property
    def fanout_size(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def selected_next_state(self) -> np.ndarray:
        return self.next_states[self.chosen_next]


@dataclass
class RolloutBatch:
    """n Rollouts der Tiefe H; Fan-out-Index f = b * M + m."""

    trunk_states: np.ndarray  # (n, H, S)
    actions: np.ndarray  # (n, H, A)
    rewards: np.ndarray  # (n, H, F)
    next_states: np.ndarray  # (n, H, F, S)
    chosen: np.ndarray  # (n, H)

    @property
    def n_rollouts(self) -> int:
        return int(self.trunk_states.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.trunk_states.shape[1])

    @property
    def fanout(self) -> int:
        return int(self.rewards.shape[2])

    def transition_set(self, i: int, k: int) -> TransitionSet:
        return TransitionSet(
            self.trunk_states[i, k],
            self.actions[i, k],
            self.rewards[i, k],
            self.next_states[i, k],
            int(self.chosen[i, k]),
            k,
        )

    def rollout(self, i: int) -> list[TransitionSet]:
        return [self.transition_set(i, k) for k in range(self.horizon)]


def _fanout_step(
    ensemble: GaussianEnsemble,
    s: np.ndarray,
    a: np.ndarray,
    n_samples: int,
    reward_fn: RewardFn,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """M Ziehungen aus jeder der B Gaussverteilungen für n Trunk-Paare."""
    n, S = s.shape
    means, stds = _predict_all(ensemble, s, a)  # (B, n, S)
    noise = rng.standard_normal((n, ensemble.size, n_samples, S))
    mu = np.transpose(means, (1, 0, 2))[:, :, None, :]
    sd = np.transpose(stds, (1, 0, 2))[:, :, None, :]
    fanout = ensemble.size * n_samples
    next_states = (mu + sd * noise).reshape(n, fanout, S)
    s_tiled = np.broadcast_to(s[:, None, :], next_states.shape)
    a_tiled = np.broadcast_to(a[:, None, :], (n, fanout, a.shape[1]))
    rewards = np.asarray(reward_fn(s_tiled, a_tiled, next_states), dtype=np.float64)
    chosen = rng.integers(0, fanout, size=n)
    return next_states, rewards, chosen


def sample_transition_set(
    ensemble: GaussianEnsemble,
    s: np.ndarray,
    a: np.ndarray,
    n_samples: int,
    reward_fn: RewardFn,
    rng: np.random.Generator,
    depth: int = 0,
) -> TransitionSet:
    """Ein TransitionSet mit M x B Kandidaten für (s, a)."""
    if n_samples < 1:
        raise ConfigError("M muss >= 1 sein")
    s_row = _as_rows(s, ensemble.state_dim, "s")
    a_row = _as_rows(a, ensemble.action_dim, "a")
    next_states, rewards, chosen = _fanout_step(ensemble, s_row, a_row, n_samples, reward_fn, rng)
    return TransitionSet(s_row[0], a_row[0], rewards[0], next_states[0], int(chosen[0]), depth)


def rollout_batch(
    ensemble: GaussianEnsemble,
    start_states: np.ndarray,
    action_source: ActionSource,
    horizon: int,
    n_samples: int,
    reward_fn: RewardFn,
    rng: np.random.Generator,
) -> RolloutBatch:
    """n Modell-Rollouts ab realen Startzuständen.

    action_source ist entweder ein Array (n, H, A) realer Aktionsfolgen oder
    eine Policy policy(states, rng) -> actions, die an jedem Trunk-Zustand
    abgefragt wird.
    """
    if horizon < 1 or n_samples < 1:
        raise ConfigError("H und M müssen >= 1 sein")
    trunk = _as_rows(start_states, ensemble.state_dim, "start_states").copy()
    n, S, A = trunk.shape[0], ensemble.state_dim, ensemble.action_dim
    fixed = None
    if not callable(action_source):
        fixed = np.asarray(action_source, dtype=np.float64)
        if fixed.ndim != 3 or fixed.shape[0] != n or fixed.shape[2] != A:
            raise ConfigError(f"Aktionsfolgen: erwartet (n, H, {A}), bekam {fixed.shape}")
        if fixed.shape[1] < horizon:
            raise ConfigError(f"Aktionsfolge hat nur {fixed.shape[1]} Schritte, H={horizon}")

    F = ensemble.size * n_samples
    out = RolloutBatch(
        np.zeros((n, horizon, S)),
        np.zeros((n, horizon, A)),
        np.zeros((n, horizon, F)),
        np.zeros((n, horizon, F, S)),
        np.zeros((n, horizon), dtype=np.int64),
    )
    for k in range(horizon):
        if fixed is not None:
            actions = fixed[:, k, :]
        else:
            actions = np.asarray(action_source(trunk, rng), dtype=np.float64).reshape(n, A)
        next_states, rewards, chosen = _fanout_step(ensemble, trunk, actions, n_samples, reward_fn, rng)
        out.trunk_states[:, k] = trunk
        out.actions[:, k] = actions
        out.next_states[:, k] = next_states
        out.rewards[:, k] = rewards
        out.chosen[:, k] = chosen
        trunk = next_states[np.arange(n), chosen]
    return out


def rollout(
    ensemble: GaussianEnsemble,
    start_state: np.ndarray,
    action_source: ActionSource,
    horizon: int,
    n_samples: int,
    reward_fn: RewardFn,
    rng: np.random.Generator,
) -> list[TransitionSet]:
    """Einzelner Rollout; Trunk verkettet über chosen_next."""
    start = _as_rows(start_state, ensemble.state_dim, "start_state")
    source: ActionSource
    if callable(action_source):
        source = action_source
    else:
        seq = np.asarray(action_source, dtype=np.float64)
        if seq.ndim == 1:
            seq = seq[:, None]
        source = seq[None, :, :]
    return rollout_batch(ensemble, start, source, horizon, n_samples, reward_fn, rng).rollout(0)
