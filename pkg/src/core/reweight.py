"""Reweight: Gewichtsfunktion für imaginäre Transition-Sets.

Ablauf eines Meta-Schritts / meta step:
    1. Merkmale x_tr = [s | a | std(r^) | std(s'^)] pro Set, normalisiert.
    2. GRU + Sigmoid-Kopf liefert pro Tiefe ein Gewicht in (0, 1).
    3. Virtuelles SGD-Update von theta_q, theta_pi auf den gewichteten Verlusten.
    4. J_meta = J_Q(real; theta_q') + J_pi(real; theta_pi') und exakter
       Gradient nach theta_w per Kettenregel.
    5. Adam-Schritt auf theta_w.

Die Skalarprodukte g_set · grad J(real) werden als Richtungsableitungen
(Vorwärts-Modus) berechnet, ohne Gradienten pro Set zu materialisieren.
"""

from dataclasses import dataclass

import numpy as np

from src.core.dynamics import Policy, RolloutBatch, TransitionSet
from src.core.errors import ConfigError
from src.core.nn import (
    AdamState,
    GruSpec,
    ParamVector,
    adam_init,
    adam_step,
    gru_sequence,
    gru_sequence_grad,
    init_gru_params,
    sgd_step,
    sigmoid,
)
from src.core.replay import TransitionBatch
from src.core.sac import (
    ImaginaryNoise,
    SacState,
    actor_directional,
    actor_loss,
    actor_loss_and_grad,
    apply_actor_step,
    apply_critic_step,
    critic_directional,
    critic_loss,
    critic_loss_and_grad,
    policy_sample,
    target_soft_update,
    temperature_update,
)
from src.utils.logger import get_logger

logger = get_logger(__name__)

NORMALIZER_EPS = 1e-6
NORMALIZER_RATE = 0.01
HEAD_BIAS_INIT = 3.0


@dataclass(frozen=True)
class MetaConfig:
    """Hyperparameter des Meta-Lernens (Defaults für Desk-Scale-Läufe)."""

    mu: float = 3e-4
    mu_w: float = 1e-4
    n_explore: int = 32
    n_valid: int = 256
    n_train: int = 64
    k_updates: int = 10
    horizon: int = 5
    explore_scale: float = 10.0
    imag_batch_size: int = 256

    def __post_init__(self) -> None:
        for name in ("mu", "mu_w", "explore_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} muss > 0 sein")
        for name in ("n_explore", "n_valid", "n_train", "k_updates", "horizon", "imag_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} muss >= 1 sein")


# ---------------------------------------------------------------------------
# Merkmale
# ---------------------------------------------------------------------------


def feature_dim(state_dim: int, action_dim: int) -> int:
    return 2 * state_dim + action_dim + 1


def build_features(tr_set: TransitionSet) -> np.ndarray:
    """[s | a | std(r) | std(s') pro Dimension], Populations-Std über den Fan-out."""
    if tr_set.fanout_size == 0:
        raise ValueError("Transition-Set ohne Fan-out")
    return np.concatenate(
        [
            tr_set.trunk_state,
            tr_set.action,
            [np.std(tr_set.rewards)],
            np.std(tr_set.next_states, axis=0),
        ]
    )


def build_feature_batch(rollouts: RolloutBatch) -> np.ndarray:
    """Merkmale aller Sets einer RolloutBatch, Form (n, H, D)."""
    return np.concatenate(
        [
            rollouts.trunk_states,
            rollouts.actions,
            np.std(rollouts.rewards, axis=2)[..., None],
            np.std(rollouts.next_states, axis=2),
        ],
        axis=-1,
    )


class FeatureNormalizer:
    """Laufende Mittelwerte/Stds pro Merkmalsdimension.

    Die erste Batch setzt die Statistik exakt, danach exponentielles Mittel.
    """

    def __init__(self, dim: int, rate: float = NORMALIZER_RATE, eps: float = NORMALIZER_EPS):
        if not 0.0 < rate <= 1.0:
            raise ConfigError(f"Normalisierer-Rate muss in (0, 1] liegen: {rate}")
        self.dim = dim
        self.rate = rate
        self.eps = eps
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(self.var), self.eps)

    @property
    def fitted(self) -> bool:
        return self.count > 0

    def update(self, features: np.ndarray) -> None:
        batch = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        if batch.shape[0] == 0:
            return
        mean, var = batch.mean(axis=0), batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var = mean, var
        else:
            self.mean = (1.0 - self.rate) * self.mean + self.rate * mean
            self.var = (1.0 - self.rate) * self.var + self.rate * var
        self.count += batch.shape[0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "var": self.var, "count": np.array([self.count])}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FeatureNormalizer":
        norm = cls(int(np.asarray(arrays["mean"]).size))
        norm.mean = np.array(arrays["mean"], dtype=np.float64)
        norm.var = np.array(arrays["var"], dtype=np.float64)
        norm.count = int(np.asarray(arrays["count"]).ravel()[0])
        return norm


def normalize(normalizer: FeatureNormalizer, features: np.ndarray) -> np.ndarray:
    """(x - mean) / max(std, eps) pro Dimension; beliebige führende Achsen."""
    if not normalizer.fitted:
        raise ValueError("Normalisierer wurde noch nicht angepasst")
    return (np.asarray(features, dtype=np.float64) - normalizer.mean) / normalizer.std


# ---------------------------------------------------------------------------
# Gewichtsnetz
# ---------------------------------------------------------------------------


@dataclass
class WeightNet:
    """GRU über die Set-Merkmale einer Rollout-Folge + linearer Kopf mit Sigmoid."""

    gru: GruSpec
    params: ParamVector
    optimizer: AdamState


def init_weight_net(
    feature_size: int,
    rng: np.random.Generator,
    hidden_dim: int = 32,
    lr: float = 1e-4,
    head_bias: float = HEAD_BIAS_INIT,
) -> WeightNet:
    """Frisches Netz: Kopfgewichte null, Bias 3.0, also Ausgabe sigmoid(3.0) überall."""
    gru = GruSpec(feature_size, hidden_dim)
    gru_params = init_gru_params(gru, rng)
    arrays = {name: gru_params.segment(name) for name, _ in gru.layout()}
    arrays["head_w"] = np.zeros((1, hidden_dim))
    arrays["head_b"] = np.array([head_bias])
    params = ParamVector.from_arrays(arrays)
    return WeightNet(gru, params, adam_init(params.size, lr))


def _weights_time_major(wnet: WeightNet, inputs: np.ndarray, params: ParamVector | None = None) -> tuple[np.ndarray, np.ndarray]:
    """inputs (T, n, D) -> (Hidden-States (T, n, Hd), Gewichte (T, n))."""
    theta = wnet.params if params is None else params
    hidden = gru_sequence(wnet.gru, theta, inputs)
    z = hidden @ theta.segment("head_w")[0] + theta.segment("head_b")[0]
    return hidden, sigmoid(z)


def weight_rollout(wnet: WeightNet, normalizer: FeatureNormalizer, rollout: list[TransitionSet]) -> np.ndarray:
    """H Gewichte einer einzelnen Rollout-Folge; Tiefe k sieht nur Merkmale bis k."""
    if not rollout:
        raise ValueError("Leerer Rollout")
    feats = normalize(normalizer, np.stack([build_features(t) for t in rollout]))
    _, w = _weights_time_major(wnet, feats[:, None, :])
    return w[:, 0]


def weight_rollouts(wnet: WeightNet, normalizer: FeatureNormalizer, rollouts: RolloutBatch) -> np.ndarray:
    """Gewichte aller Sets einer RolloutBatch, Form (n, H)."""
    feats = normalize(normalizer, build_feature_batch(rollouts))
    _, w = _weights_time_major(wnet, np.transpose(feats, (1, 0, 2)))
    return w.T


def weight_net_grad(
    wnet: WeightNet, inputs: np.ndarray, coefficients: np.ndarray, params: ParamVector | None = None
) -> ParamVector:
    """Gradient von sum_{t,i} c_{t,i} w_{t,i} nach theta_w; inputs (T, n, D), c (T, n)."""
    theta = wnet.params if params is None else params
    hidden, w = _weights_time_major(wnet, inputs, theta)
    if coefficients.shape != w.shape:
        raise ConfigError(f"Koeffizienten {coefficients.shape} passen nicht zu Gewichten {w.shape}")
    dz = coefficients * w * (1.0 - w)
    head_w = theta.segment("head_w")[0]
    gru_grad = gru_sequence_grad(wnet.gru, theta, inputs, dz[..., None] * head_w)
    arrays = {name: gru_grad.segment(name) for name, _ in wnet.gru.layout()}
    arrays["head_w"] = np.einsum("tn,tnh->h", dz, hidden)[None, :]
    arrays["head_b"] = np.array([dz.sum()])
    return ParamVector.from_arrays(arrays)


def weight_function_update(wnet: WeightNet, grad: ParamVector) -> bool:
    """Adam-Schritt mit Rate mu_w; nicht-endliche Gradienten werden übersprungen."""
    if grad.size != wnet.params.size:
        raise ConfigError("Gradient passt nicht zum Gewichtsnetz")
    if not grad.is_finite():
        logger.warning("Gewichtsnetz-Schritt übersprungen: Gradient nicht endlich")
        return False
    wnet.optimizer, wnet.params = adam_step(wnet.optimizer, wnet.params, grad)
    return True


# ---------------------------------------------------------------------------
# Imaginäre Daten
# ---------------------------------------------------------------------------


@dataclass
class ImaginaryBatch:
    """Flach ausgerollte Sets: jede Fan-out-Transition ist eine Zeile.

    Set-Index s = i * H + k (Rollout i, Tiefe k); Actor-Zustände sind die
    Trunk-Zustände, eine Zeile pro Set.
    """

    transitions: TransitionBatch
    set_index: np.ndarray
    actor_states: np.ndarray

    @property
    def n_sets(self) -> int:
        return int(self.actor_states.shape[0])

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)


def flatten_rollouts(rollouts: RolloutBatch) -> ImaginaryBatch:
    n, H, F = rollouts.n_rollouts, rollouts.horizon, rollouts.fanout
    S, A = rollouts.trunk_states.shape[2], rollouts.actions.shape[2]
    states = np.broadcast_to(rollouts.trunk_states[:, :, None, :], (n, H, F, S)).reshape(-1, S)
    actions = np.broadcast_to(rollouts.actions[:, :, None, :], (n, H, F, A)).reshape(-1, A)
    batch = TransitionBatch(
        states.copy(),
        actions.copy(),
        rollouts.rewards.reshape(-1).copy(),
        rollouts.next_states.reshape(-1, S).copy(),
    )
    set_index = np.repeat(np.arange(n * H), F)
    return ImaginaryBatch(batch, set_index, rollouts.trunk_states.reshape(-1, S).copy())


# ---------------------------------------------------------------------------
# Virtuelles Update und Meta-Ziel
# ---------------------------------------------------------------------------


@dataclass
class VirtualUpdate:
    """Kandidatenparameter nach einem SGD-Schritt plus Linearisierungspunkt."""

    critics: list[ParamVector]
    actor: ParamVector
    imag: ImaginaryBatch
    noise: ImaginaryNoise
    set_weights: np.ndarray
    mu: float
    alpha: float

    @property
    def critic_base(self) -> float:
        return 1.0 / self.imag.n_transitions

    @property
    def actor_base(self) -> float:
        return 1.0 / self.imag.n_sets


def virtual_update(
    sac: SacState,
    imag: ImaginaryBatch,
    set_weights: np.ndarray,
    mu: float,
    noise: ImaginaryNoise,
    alpha: float | None = None,
) -> VirtualUpdate:
    """theta' = theta - mu * d(sum_set w_set J_set)/d theta, Mittelwert-Skalierung pro Transition.

    Plain SGD; der SAC-Zustand bleibt unverändert.
    """
    w = np.asarray(set_weights, dtype=np.float64).reshape(-1)
    if w.shape != (imag.n_sets,):
        raise ConfigError(f"{w.size} Gewichte für {imag.n_sets} Transition-Sets")
    a = sac.alpha if alpha is None else alpha
    per_transition = w[imag.set_index] / imag.n_transitions
    _, q_grads = critic_loss_and_grad(
        sac, imag.transitions, weights=per_transition, noise=noise.critic, alpha=a
    )
    _, pi_grad = actor_loss_and_grad(
        sac, imag.actor_states, weights=w / imag.n_sets, noise=noise.actor, alpha=a
    )
    critics = [sgd_step(theta, g, mu) for theta, g in zip(sac.critics, q_grads)]
    actor = sgd_step(sac.actor, pi_grad, mu)
    return VirtualUpdate(critics, actor, imag, noise, w, mu, a)


def meta_objective(
    sac: SacState,
    vu: VirtualUpdate,
    real_batch: TransitionBatch,
    real_noise: ImaginaryNoise,
) -> float:
    """J_Q(real; theta_q') + J_pi(real; theta_pi') als Mittelwerte.

    Der Actor-Term nutzt die ursprünglichen Critics theta_q.
    """
    n = len(real_batch)
    if n == 0:
        raise ValueError("Meta-Ziel auf leerer Batch")
    w = np.full(n, 1.0 / n)
    q = critic_loss(
        sac, real_batch, weights=w, noise=real_noise.critic, critic_params=vu.critics, alpha=vu.alpha
    )
    pi = actor_loss(
        sac, real_batch.states, weights=w, noise=real_noise.actor, actor_params=vu.actor, alpha=vu.alpha
    )
    return q + pi


def meta_coefficients(
    sac: SacState,
    vu: VirtualUpdate,
    real_batch: TransitionBatch,
    real_noise: ImaginaryNoise,
) -> tuple[float, np.ndarray]:
    """J_meta und dJ_meta/dw_set für jedes Set (Kettenregel durch das SGD-Update)."""
    n = len(real_batch)
    w = np.full(n, 1.0 / n)
    q_loss, g_q = critic_loss_and_grad(
        sac, real_batch, weights=w, noise=real_noise.critic, critic_params=vu.critics, alpha=vu.alpha
    )
    pi_loss, g_pi = actor_loss_and_grad(
        sac, real_batch.states, weights=w, noise=real_noise.actor, actor_params=vu.actor, alpha=vu.alpha
    )
    dir_q = critic_directional(sac, vu.imag.transitions, g_q, vu.noise.critic, alpha=vu.alpha)
    dir_pi = actor_directional(sac, vu.imag.actor_states, g_pi, vu.noise.actor, alpha=vu.alpha)
    per_set_q = np.bincount(vu.imag.set_index, weights=dir_q, minlength=vu.imag.n_sets)
    coeff = -vu.mu * (per_set_q * vu.critic_base + dir_pi * vu.actor_base)
    return q_loss + pi_loss, coeff


def meta_gradient(
    wnet: WeightNet,
    inputs: np.ndarray,
    coefficients: np.ndarray,
    params: ParamVector | None = None,
) -> ParamVector:
    """grad theta_w = sum_set c_set dw_set/d theta_w; c in Rollout-Reihenfolge (n, H)."""
    c = np.asarray(coefficients, dtype=np.float64)
    T, n = inputs.shape[0], inputs.shape[1]
    if c.size != T * n:
        raise ConfigError(f"{c.size} Koeffizienten für {n} Rollouts x {T} Tiefen")
    return weight_net_grad(wnet, inputs, c.reshape(n, T).T, params)


@dataclass
class MetaProblem:
    """Eingefrorene Instanz eines Meta-Schritts: J_meta als Funktion von theta_w."""

    sac: SacState
    wnet: WeightNet
    inputs: np.ndarray  # (H, n, D), normalisiert
    imag: ImaginaryBatch
    imag_noise: ImaginaryNoise
    real_batch: TransitionBatch
    real_noise: ImaginaryNoise
    mu: float
    alpha: float

    def set_weights(self, params: ParamVector) -> np.ndarray:
        _, w = _weights_time_major(self.wnet, self.inputs, params)
        return w.T.reshape(-1)

    def objective(self, params: ParamVector | np.ndarray) -> float:
        theta = params if isinstance(params, ParamVector) else self.wnet.params.with_values(params)
        vu = virtual_update(self.sac, self.imag, self.set_weights(theta), self.mu, self.imag_noise, self.alpha)
        return meta_objective(self.sac, vu, self.real_batch, self.real_noise)

    def gradient(self, params: ParamVector | None = None) -> tuple[float, ParamVector]:
        theta = self.wnet.params if params is None else params
        vu = virtual_update(self.sac, self.imag, self.set_weights(theta), self.mu, self.imag_noise, self.alpha)
        loss, coeff = meta_coefficients(self.sac, vu, self.real_batch, self.real_noise)
        return loss, meta_gradient(self.wnet, self.inputs, coeff, theta)


def build_meta_problem(
    sac: SacState,
    wnet: WeightNet,
    normalizer: FeatureNormalizer,
    rollouts: RolloutBatch,
    real_batch: TransitionBatch,
    mu: float,
    rng: np.random.Generator,
    update_normalizer: bool = True,
) -> MetaProblem:
    """Friert Merkmale, Rauschen und alpha für einen Meta-Schritt ein."""
    feats = build_feature_batch(rollouts)
    if update_normalizer:
        normalizer.update(feats)
    inputs = np.transpose(normalize(normalizer, feats), (1, 0, 2))
    imag = flatten_rollouts(rollouts)
    A = sac.action_dim
    imag_noise = ImaginaryNoise.draw(rng, imag.n_transitions, imag.n_sets, A)
    real_noise = ImaginaryNoise.draw(rng, len(real_batch), len(real_batch), A)
    return MetaProblem(sac, wnet, inputs, imag, imag_noise, real_batch, real_noise, mu, sac.alpha)


@dataclass
class MetaStepResult:
    meta_loss: float
    grad_norm: float
    applied: bool


def meta_step(
    sac: SacState,
    wnet: WeightNet,
    normalizer: FeatureNormalizer,
    rollouts: RolloutBatch,
    real_batch: TransitionBatch,
    cfg: MetaConfig,
    rng: np.random.Generator,
) -> MetaStepResult:
    """Ein Update von theta_w; SAC-Parameter bleiben unberührt."""
    problem = build_meta_problem(sac, wnet, normalizer, rollouts, real_batch, cfg.mu, rng)
    loss, grad = problem.gradient()
    applied = weight_function_update(wnet, grad)
    norm = float(np.linalg.norm(grad.values)) if grad.is_finite() else float("nan")
    logger.debug("Meta-Schritt: J_meta=%.6f |grad|=%.3e", loss, norm)
    return MetaStepResult(loss, norm, applied)


# ---------------------------------------------------------------------------
# Gewichtetes Training
# ---------------------------------------------------------------------------


@dataclass
class ImaginaryUpdateStats:
    critic_loss: float
    actor_loss: float
    alpha: float


def reweighted_policy_value_update(
    sac: SacState,
    imag: ImaginaryBatch,
    set_weights: np.ndarray | None,
    k_updates: int,
    batch_size: int,
    rng: np.random.Generator,
) -> ImaginaryUpdateStats:
    """K Adam-Schritte auf theta_q, theta_pi mit festen Set-Gewichten.

    Jeder Schritt zieht eine Minibatch von Transitionen (Critic) und Sets
    (Actor, Temperatur). set_weights=None: ungewichtet (alle Gewichte 1).
    """
    w = np.ones(imag.n_sets) if set_weights is None else np.asarray(set_weights, dtype=np.float64).reshape(-1)
    if w.shape != (imag.n_sets,):
        raise ConfigError(f"{w.size} Gewichte für {imag.n_sets} Transition-Sets")
    q_losses, pi_losses = [], []
    for _ in range(k_updates):
        t_idx = rng.integers(0, imag.n_transitions, size=batch_size)
        s_idx = rng.integers(0, imag.n_sets, size=batch_size)
        sub = TransitionBatch(
            imag.transitions.states[t_idx],
            imag.transitions.actions[t_idx],
            imag.transitions.rewards[t_idx],
            imag.transitions.next_states[t_idx],
        )
        q_weights = w[imag.set_index[t_idx]] / batch_size
        q_loss, q_grads = critic_loss_and_grad(sac, sub, rng, weights=q_weights)
        # Nullgewichte: kein Adam-Schritt, sonst bewegt das Moment die Parameter weiter
        if np.any(q_weights != 0.0):
            apply_critic_step(sac, q_grads)
        states = imag.actor_states[s_idx]
        pi_weights = w[s_idx] / batch_size
        pi_loss, pi_grad = actor_loss_and_grad(sac, states, rng, weights=pi_weights)
        if np.any(pi_weights != 0.0):
            apply_actor_step(sac, pi_grad)
        temperature_update(sac, states, rng)
        target_soft_update(sac)
        q_losses.append(q_loss)
        pi_losses.append(pi_loss)
    return ImaginaryUpdateStats(float(np.mean(q_losses)), float(np.mean(pi_losses)), sac.alpha)


def make_explore_policy(sac: SacState, temperature_scale: float) -> Policy:
    """pi_e: aktuelle Policy mit um sqrt(lambda_e) skalierter Std."""

    def policy(states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(policy_sample(sac, states, rng, temperature_scale).action)

    return policy
