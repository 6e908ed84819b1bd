"""Trainer: Orchestriert die Trainingsschleife (reale Schritte, Ensemble, Meta-Schritt, Updates).

Pro Umgebungsschritt nach der Zufalls-Aufwärmphase:
    Ensemble neu trainieren (nur an Episodengrenzen) -> Meta-Schritt auf theta_w
    (nur mit Reweighting) -> N_t Explore-Rollouts und K gewichtete Updates ->
    ein SAC-Update auf realen Daten.

Dazu Evaluation, Gewichts-Probe und der Vergleich mit/ohne Reweighting.
"""

import csv
import math
import os
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Any

import numpy as np

from src.core.dynamics import GaussianEnsemble, ModelStats, init_ensemble, rollout_batch, train_ensemble
from src.core.envs import env_reset, env_reward, env_step, get_env_spec
from src.core.errors import CheckpointError, ConfigError, NonFiniteGradientError, TrainingDivergedError
from src.core.nn import AdamState, ParamVector
from src.core.replay import ReplayBuffer, Transition
from src.core.reweight import (
    FeatureNormalizer,
    WeightNet,
    feature_dim,
    flatten_rollouts,
    init_weight_net,
    make_explore_policy,
    meta_step,
    reweighted_policy_value_update,
    weight_rollouts,
)
from src.core.sac import SacState, init_sac, policy_sample, sac_update_real
from src.utils.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.utils.config import TrainConfig
from src.utils.logger import get_logger
from src.utils.rng import make_rng, restore_rng, rng_state
from src.utils.stats import EpisodeStats, MetricsRecorder, format_row

logger = get_logger(__name__)

METRICS_FILE = "metrics.csv"
WEIGHTS_COLUMNS = ("lambda_e", "depth", "weight_median", "n_samples")
COMPARISON_COLUMNS = ("seed", "variant", "final_return", "critic_loss_last_third")
ROBUSTNESS_COLUMNS = (
    "variant", "model_hidden_default", "model_hidden_weak",
    "mean_return_default", "mean_return_weak", "degradation_fraction", "n_seeds",
)
EVAL_EPISODES = 5


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(what)


class Trainer:
    """Hält den kompletten Lernzustand eines Laufs."""

    def __init__(self, config: TrainConfig, out_dir: str | os.PathLike | None = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.env_spec = get_env_spec(config.env)
        self.reward_fn = partial(env_reward, self.env_spec)
        self.rng = make_rng(config.seed)

        S, A = self.env_spec.state_dim, self.env_spec.action_dim
        self.buffer = ReplayBuffer(S, A, config.buffer_capacity)
        self.ensemble: GaussianEnsemble = init_ensemble(
            S, A, config.ensemble_size, config.model_hidden, self.rng,
            lr=config.model_lr, log_std_bounds=config.model_log_std_bounds,
        )
        self.sac: SacState = init_sac(
            S, A, self.rng, self.env_spec.low, self.env_spec.high,
            hidden_dims=config.sac_hidden, lr=config.lr, gamma=config.gamma, tau=config.tau,
            init_alpha=config.init_alpha, target_entropy=config.target_entropy,
        )
        # PE-SAC: kein Gewichtsnetz / no weight network at all
        self.wnet: WeightNet | None = None
        self.normalizer: FeatureNormalizer | None = None
        if config.reweight_enabled:
            self.wnet = init_weight_net(feature_dim(S, A), self.rng, config.weight_hidden, config.mu_w)
            self.normalizer = FeatureNormalizer(feature_dim(S, A))
        self.meta_cfg = config.meta_config()

        self.timestep = 0
        self.episode = 0
        self.model_stale = True
        self.model_nll = float("nan")
        self.stats = EpisodeStats()
        self.metric_rows: list[str] = []
        self.recorder: MetricsRecorder | None = None

    # ------------------------------------------------------------------
    # Trainingsschleife
    # ------------------------------------------------------------------

    def run(self) -> Path | None:
        """Trainiert bis total_steps; schreibt metrics.csv und Checkpoints."""
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.recorder = MetricsRecorder(str(self.out_dir / METRICS_FILE), self.metric_rows)
        logger.info(
            "Training startet: env=%s seed=%d reweight=%s Schritte=%d",
            self.config.env, self.config.seed, self.config.reweight_enabled, self.config.total_steps,
        )
        while self.timestep < self.config.total_steps:
            completed = self._run_episode()
            periodic = completed and self.episode % self.config.checkpoint_every_episodes == 0
            if periodic and self.out_dir is not None:
                self.save(f"ep_{self.episode:05d}")
        final = self.save("final") if self.out_dir is not None else None
        logger.info("Training beendet nach %d Schritten, %d Episoden", self.timestep, self.episode)
        return final

    def _run_episode(self) -> bool:
        cfg = self.config
        env_state = env_reset(self.env_spec, int(self.rng.integers(0, 2**63 - 1)))
        self.stats.reset()
        first_train_step = True
        done = False
        while not done and self.timestep < cfg.total_steps:
            obs = env_state.observation
            if self.timestep < cfg.init_random_steps:
                action = self.rng.uniform(self.env_spec.low, self.env_spec.high)
            else:
                action = np.asarray(policy_sample(self.sac, obs, self.rng).action)
            action = np.clip(action, self.env_spec.low, self.env_spec.high)
            step_index = env_state.step_index
            env_state, reward, done = env_step(env_state, action)
            self.buffer.push(Transition(obs, action, reward, env_state.observation, self.episode, step_index))
            self.stats.add_reward(reward)
            self.timestep += 1
            if self.timestep >= cfg.init_random_steps:
                self._guarded_train_step(first_train_step)
                first_train_step = False
        if not done:
            return False

        self.episode += 1
        # Neu-Training an der nächsten Episodengrenze / retrain at episode boundary
        self.model_stale = True
        record = self.stats.record(self.timestep, self.sac.alpha, self.model_nll)
        if self.recorder is not None:
            self.recorder.append(record)
            self.metric_rows = self.recorder.rows
        else:
            self.metric_rows.append(format_row(record))
        logger.info(
            "Episode %d: Return %.2f, J_Q %.4f, alpha %.4f, t=%d",
            self.episode, record.episode_return, record.critic_loss_real, record.alpha, self.timestep,
        )
        return True

    def _guarded_train_step(self, first_in_episode: bool) -> None:
        """Ein Trainingsschritt; nicht-endliche Werte stoppen den Lauf mit Diagnose-Checkpoint."""
        try:
            self.train_step(first_in_episode)
        except (FloatingPointError, NonFiniteGradientError) as e:
            what = str(e) or type(e).__name__
            path = self.save("diverged") if self.out_dir is not None else None
            logger.error("Training divergiert bei t=%d: %s", self.timestep, what)
            raise TrainingDivergedError(what, self.timestep, str(path) if path else None) from e

    def train_step(self, first_in_episode: bool = False) -> None:
        cfg, meta = self.config, self.meta_cfg
        if self.model_stale:
            result = train_ensemble(
                self.ensemble, self.buffer, cfg.model_train_epochs, self.rng,
                batch_size=cfg.model_batch_size, holdout_ratio=cfg.model_holdout_ratio,
                num_workers=cfg.num_workers,
            )
            _check_finite(result.holdout_nll_after, "Ensemble-NLL")
            self.model_nll = result.holdout_nll_after
            self.model_stale = False

        if self.wnet is not None and self.normalizer is not None:
            starts, actions = self.buffer.sample_state_action_sequences(meta.n_explore, meta.horizon, self.rng)
            meta_rollouts = rollout_batch(
                self.ensemble, starts, actions, meta.horizon, cfg.model_samples, self.reward_fn, self.rng
            )
            real = self.buffer.sample_batch(meta.n_valid, self.rng)
            result = meta_step(self.sac, self.wnet, self.normalizer, meta_rollouts, real, meta, self.rng)
            _check_finite(result.meta_loss, "Meta-Ziel")
            self.stats.meta_losses.append(result.meta_loss)

        starts = self.buffer.sample_states(meta.n_train, self.rng)
        explore = make_explore_policy(self.sac, meta.explore_scale)
        rollouts = rollout_batch(self.ensemble, starts, explore, meta.horizon, cfg.model_samples, self.reward_fn, self.rng)
        weights = None
        if self.wnet is not None and self.normalizer is not None:
            weights = weight_rollouts(self.wnet, self.normalizer, rollouts)
            if first_in_episode:
                self.stats.weights = weights.ravel().copy()
            weights = weights.reshape(-1)
        imag = reweighted_policy_value_update(
            self.sac, flatten_rollouts(rollouts), weights, meta.k_updates, meta.imag_batch_size, self.rng
        )
        _check_finite(imag.critic_loss, "imaginärer Critic-Verlust")
        _check_finite(imag.actor_loss, "imaginärer Actor-Verlust")

        real_stats = sac_update_real(self.sac, self.buffer.sample_batch(cfg.batch_size, self.rng), self.rng)
        _check_finite(real_stats.critic_loss, "Critic-Verlust")
        _check_finite(real_stats.actor_loss, "Actor-Verlust")
        self.stats.critic_losses.append(real_stats.critic_loss)
        self.stats.actor_losses.append(real_stats.actor_loss)

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def save(self, name: str) -> Path:
        if self.out_dir is None:
            raise CheckpointError("Kein Ausgabeordner für Checkpoints gesetzt")
        return save_checkpoint(self.to_checkpoint(), self.out_dir / "checkpoints" / name)

    def to_checkpoint(self) -> Checkpoint:
        segs: dict[str, np.ndarray] = {}
        for key, arr in self.buffer.state_arrays().items():
            segs[f"buffer/{key}"] = arr
        stats = self.ensemble.stats
        segs["ensemble/stats/input_mean"] = stats.input_mean
        segs["ensemble/stats/input_std"] = stats.input_std
        segs["ensemble/stats/delta_mean"] = stats.delta_mean
        segs["ensemble/stats/delta_std"] = stats.delta_std
        steps: dict[str, int] = {}
        for b, model in enumerate(self.ensemble.models):
            segs[f"ensemble/{b}/params"] = model.params.values
            steps[f"ensemble/{b}"] = _adam_segments(segs, f"ensemble/{b}/adam", model.optimizer)

        sac = self.sac
        segs["sac/actor"] = sac.actor.values
        segs["sac/log_alpha"] = np.array([sac.log_alpha])
        steps["sac/actor"] = _adam_segments(segs, "sac/actor_adam", sac.actor_opt)
        steps["sac/alpha"] = _adam_segments(segs, "sac/alpha_adam", sac.alpha_opt)
        for j in range(2):
            segs[f"sac/critic{j}"] = sac.critics[j].values
            segs[f"sac/target{j}"] = sac.targets[j].values
            steps[f"sac/critic{j}"] = _adam_segments(segs, f"sac/critic{j}_adam", sac.critic_opts[j])

        if self.wnet is not None and self.normalizer is not None:
            segs["wnet/params"] = self.wnet.params.values
            steps["wnet"] = _adam_segments(segs, "wnet/adam", self.wnet.optimizer)
            for key, arr in self.normalizer.state_arrays().items():
                segs[f"normalizer/{key}"] = arr

        extras: dict[str, Any] = {
            "timestep": self.timestep,
            "episode": self.episode,
            "model_stale": self.model_stale,
            "model_nll": self.model_nll,
            "adam_steps": steps,
            "rng": rng_state(self.rng),
            "metric_rows": list(self.metric_rows),
            "has_weight_net": self.wnet is not None,
        }
        return Checkpoint(segs, self.config.to_dict(), extras)

    @classmethod
    def from_checkpoint(
        cls,
        path: str | os.PathLike,
        out_dir: str | os.PathLike | None = None,
        config: TrainConfig | None = None,
    ) -> "Trainer":
        """Stellt einen Trainer wieder her; optional mit neuer Config (z.B. mehr Schritte)."""
        ckpt = load_checkpoint(path)
        try:
            cfg = config if config is not None else TrainConfig.from_dict(ckpt.config)
            trainer = cls(cfg, out_dir)
            trainer._restore(ckpt)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"Checkpoint passt nicht zur Konfiguration: {e}") from e
        return trainer

    def _restore(self, ckpt: Checkpoint) -> None:
        segs, extras = ckpt.segments, ckpt.extras
        steps = extras["adam_steps"]
        self.buffer = ReplayBuffer.from_arrays(
            self.config.buffer_capacity,
            {key: segs[f"buffer/{key}"] for key in ("states", "actions", "rewards", "next_states", "episode_ids", "steps")},
        )
        self.ensemble.set_stats(
            ModelStats(
                segs["ensemble/stats/input_mean"],
                segs["ensemble/stats/input_std"],
                segs["ensemble/stats/delta_mean"],
                segs["ensemble/stats/delta_std"],
            )
        )
        for b, model in enumerate(self.ensemble.models):
            model.params = _restore_params(model.params, segs[f"ensemble/{b}/params"])
            model.optimizer = _restore_adam(model.optimizer, segs, f"ensemble/{b}/adam", steps[f"ensemble/{b}"])

        sac = self.sac
        sac.actor = _restore_params(sac.actor, segs["sac/actor"])
        sac.log_alpha = float(segs["sac/log_alpha"][0])
        sac.actor_opt = _restore_adam(sac.actor_opt, segs, "sac/actor_adam", steps["sac/actor"])
        sac.alpha_opt = _restore_adam(sac.alpha_opt, segs, "sac/alpha_adam", steps["sac/alpha"])
        for j in range(2):
            sac.critics[j] = _restore_params(sac.critics[j], segs[f"sac/critic{j}"])
            sac.targets[j] = _restore_params(sac.targets[j], segs[f"sac/target{j}"])
            sac.critic_opts[j] = _restore_adam(sac.critic_opts[j], segs, f"sac/critic{j}_adam", steps[f"sac/critic{j}"])

        if extras.get("has_weight_net") and self.wnet is not None:
            self.wnet.params = _restore_params(self.wnet.params, segs["wnet/params"])
            self.wnet.optimizer = _restore_adam(self.wnet.optimizer, segs, "wnet/adam", steps["wnet"])
            self.normalizer = FeatureNormalizer.from_arrays(
                {key: segs[f"normalizer/{key}"] for key in ("mean", "var", "count")}
            )
        elif self.wnet is not None:
            raise CheckpointError("Checkpoint enthält kein Gewichtsnetz")

        self.timestep = int(extras["timestep"])
        self.episode = int(extras["episode"])
        # "final" kann mitten in einer Episode liegen: neue Episode-ID vergeben
        if len(self.buffer) > 0:
            last_id = self.buffer.get(len(self.buffer) - 1).episode_id
            self.episode = max(self.episode, last_id + 1)
        self.model_stale = bool(extras["model_stale"])
        self.model_nll = float(extras["model_nll"])
        self.rng = restore_rng(extras["rng"])
        self.metric_rows = list(extras.get("metric_rows", []))


def _adam_segments(segs: dict[str, np.ndarray], prefix: str, state: AdamState) -> int:
    segs[f"{prefix}/m"] = state.first_moment
    segs[f"{prefix}/v"] = state.second_moment
    return state.step_count


def _restore_adam(template: AdamState, segs: dict[str, np.ndarray], prefix: str, step: int) -> AdamState:
    m, v = segs[f"{prefix}/m"], segs[f"{prefix}/v"]
    if m.shape != template.first_moment.shape:
        raise CheckpointError(f"Optimierer-Zustand {prefix} hat falsche Form {m.shape}")
    return replace(template, first_moment=m.copy(), second_moment=v.copy(), step_count=int(step))


def _restore_params(template: ParamVector, values: np.ndarray) -> ParamVector:
    if values.shape != template.values.shape:
        raise CheckpointError(f"Parameterform {values.shape} passt nicht zu {template.values.shape}")
    return template.with_values(values)


# ---------------------------------------------------------------------------
# Einstiegspunkte / entry points
# ---------------------------------------------------------------------------


def run_training(
    config: TrainConfig,
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
) -> Path:
    """Kompletter Lauf; liefert den Ausgabeordner."""
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, out_dir, config)
        logger.info("Fortsetzung ab Schritt %d (Episode %d)", trainer.timestep, trainer.episode)
    else:
        trainer = Trainer(config, out_dir)
    trainer.run()
    return Path(out_dir)


def evaluate_policy(sac: SacState, env_name: str, episodes: int, seed: int) -> list[float]:
    """Deterministische Policy (Modus-Aktion) über mehrere Episoden."""
    if episodes < 1:
        raise ValueError("episodes muss >= 1 sein")
    spec = get_env_spec(env_name)
    rng = make_rng(seed)
    returns = []
    for _ in range(episodes):
        state = env_reset(spec, int(rng.integers(0, 2**63 - 1)))
        total, done = 0.0, False
        while not done:
            action = policy_sample(sac, state.observation, deterministic=True).action
            state, reward, done = env_step(state, action)
            total += reward
        returns.append(total)
    return returns


def run_eval(checkpoint: str | os.PathLike, episodes: int, seed: int) -> tuple[float, float]:
    """Mittelwert und Std der Returns; bei einer Episode ist die Std 0."""
    trainer = Trainer.from_checkpoint(checkpoint)
    returns = evaluate_policy(trainer.sac, trainer.config.env, episodes, seed)
    mean, std = float(np.mean(returns)), float(np.std(returns))
    logger.info("Evaluation: %d Episoden, Return %.3f +/- %.3f", episodes, mean, std)
    return mean, std


def run_weight_probe(
    checkpoint: str | os.PathLike,
    lambdas: list[float],
    out_path: str | os.PathLike,
    n_rollouts: int = 256,
    seed: int = 0,
) -> list[dict[str, Any]]:
    """Median-Gewicht pro Rollout-Tiefe und Explore-Skala lambda_e; schreibt weights.csv."""
    trainer = Trainer.from_checkpoint(checkpoint)
    if trainer.wnet is None or trainer.normalizer is None:
        raise CheckpointError("Checkpoint enthält kein Gewichtsnetz (PE-SAC-Lauf)")
    if any(not lam > 0 for lam in lambdas):
        raise ValueError("Alle lambda_e müssen > 0 sein")
    cfg, rng = trainer.config, make_rng(seed)
    rows: list[dict[str, Any]] = []
    for lam in lambdas:
        starts = trainer.buffer.sample_states(n_rollouts, rng)
        policy = make_explore_policy(trainer.sac, lam)
        rollouts = rollout_batch(trainer.ensemble, starts, policy, cfg.horizon, cfg.model_samples, trainer.reward_fn, rng)
        weights = weight_rollouts(trainer.wnet, trainer.normalizer, rollouts)
        for depth in range(cfg.horizon):
            rows.append(
                {
                    "lambda_e": f"{lam:.9g}",
                    "depth": depth,
                    "weight_median": f"{float(np.median(weights[:, depth])):.9g}",
                    "n_samples": n_rollouts,
                }
            )
    _write_csv(out_path, WEIGHTS_COLUMNS, rows)
    logger.info("Gewichts-Probe geschrieben: %s (%d Zeilen)", out_path, len(rows))
    return rows


def _critic_loss_last_third(metrics_path: Path) -> float:
    with open(metrics_path, "r", encoding="utf-8", newline="") as f:
        values = [float(row["critic_loss_real"]) for row in csv.DictReader(f)]
    tail = values[len(values) - len(values) // 3 :] if len(values) >= 3 else values
    finite = [v for v in tail if math.isfinite(v)]
    return float(np.mean(finite)) if finite else float("nan")


def compare(config: TrainConfig, seeds: list[int], out_dir: str | os.PathLike) -> list[dict[str, Any]]:
    """Gleiche Config mit und ohne Reweighting über mehrere Seeds; schreibt comparison.csv."""
    root = Path(out_dir)
    rows: list[dict[str, Any]] = []
    for seed in seeds:
        for variant, enabled in (("rew_pe_sac", True), ("pe_sac", False)):
            run_cfg = replace(config, seed=seed, reweight_enabled=enabled)
            run_dir = root / variant / f"seed_{seed}"
            trainer = Trainer(run_cfg, run_dir)
            trainer.run()
            returns = evaluate_policy(trainer.sac, run_cfg.env, EVAL_EPISODES, seed)
            rows.append(
                {
                    "seed": seed,
                    "variant": variant,
                    "final_return": f"{float(np.mean(returns)):.9g}",
                    "critic_loss_last_third": f"{_critic_loss_last_third(run_dir / METRICS_FILE):.9g}",
                }
            )
    _write_csv(root / "comparison.csv", COMPARISON_COLUMNS, rows)
    return rows


def degradation_fraction(default_return: float, weak_return: float) -> float:
    """Anteiliger Verlust (R_default - R_weak) / |R_default|; nan bei R_default = 0."""
    scale = abs(default_return)
    if scale < 1e-12 or not math.isfinite(scale):
        return float("nan")
    return (default_return - weak_return) / scale


def robustness(
    config: TrainConfig,
    weak_hidden: tuple[int, ...] | list[int],
    seeds: list[int],
    out_dir: str | os.PathLike,
) -> list[dict[str, Any]]:
    """Robustheit gegen ein schwächeres Dynamikmodell.

    Führt compare() einmal mit config.model_hidden und einmal mit weak_hidden
    aus und schreibt pro Variante die über die Seeds gemittelten Returns und
    den anteiligen Verlust nach robustness.csv.
    """
    weak = tuple(int(h) for h in weak_hidden)
    if not weak or any(h < 1 for h in weak):
        raise ConfigError(f"weak_hidden ungültig: {weak_hidden}")
    root = Path(out_dir)
    runs = {
        "default": compare(config, seeds, root / "default"),
        "weak": compare(replace(config, model_hidden=weak), seeds, root / "weak"),
    }
    rows: list[dict[str, Any]] = []
    for variant in ("rew_pe_sac", "pe_sac"):
        means = {
            size: float(np.mean([float(r["final_return"]) for r in result if r["variant"] == variant]))
            for size, result in runs.items()
        }
        fraction = degradation_fraction(means["default"], means["weak"])
        rows.append(
            {
                "variant": variant,
                "model_hidden_default": "x".join(str(h) for h in config.model_hidden),
                "model_hidden_weak": "x".join(str(h) for h in weak),
                "mean_return_default": f"{means['default']:.9g}",
                "mean_return_weak": f"{means['weak']:.9g}",
                "degradation_fraction": f"{fraction:.9g}",
                "n_seeds": len(seeds),
            }
        )
        logger.info(
            "Robustheit %s: Return %.3f -> %.3f, Verlust %.3f",
            variant, means["default"], means["weak"], fraction,
        )
    _write_csv(root / "robustness.csv", ROBUSTNESS_COLUMNS, rows)
    return rows


def _write_csv(path: str | os.PathLike, columns: tuple[str, ...], rows: list[dict[str, Any]]) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
