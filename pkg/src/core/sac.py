"""SAC: Soft Actor-Critic mit tanh-gequetschter Gauss-Policy und Doppel-Q.

Verluste sind (gewichtete) Summen über Transitionen:
    J_Q  = sum_i w_i * sum_j 1/2 (Q_j(s,a) - y)^2,  y = r + gamma (min_j Qbar_j(s',a') - alpha log pi(a'|s'))
    J_pi = sum_i w_i * (alpha log pi(a^|s) - min_j Q_j(s,a^))
Das Ziel y ist konstant (kein Gradient durch Qbar, alpha oder a'). Mittelwerte
entstehen durch weights = 1/n.

Neben den Gradienten liefert das Modul Richtungsableitungen pro Transition
(Vorwärts-Modus), die der Meta-Gradient als Skalarprodukte braucht.
"""

from dataclasses import dataclass

import numpy as np

from src.core.errors import ConfigError
from src.core.nn import (
    AdamState,
    MlpCache,
    MlpSpec,
    ParamVector,
    adam_init,
    adam_step,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
    mlp_jvp,
)
from src.core.replay import TransitionBatch
from src.utils.logger import get_logger
from src.utils.rng import RngLike, make_rng

logger = get_logger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_ALPHA_LAYOUT = (("log_alpha", (1,)),)


@dataclass
class SacState:
    """Actor, zwei Critics, zwei Target-Critics, Temperatur und Optimierer."""

    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor: ParamVector
    critics: list[ParamVector]
    targets: list[ParamVector]
    log_alpha: float
    target_entropy: float
    action_scale: np.ndarray
    action_bias: np.ndarray
    actor_opt: AdamState
    critic_opts: list[AdamState]
    alpha_opt: AdamState
    gamma: float = 0.99
    tau: float = 0.005

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma muss in (0, 1] liegen: {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau muss in (0, 1] liegen: {self.tau}")
        if len(self.critics) != 2 or len(self.targets) != 2:
            raise ConfigError("SAC braucht genau zwei Critics und zwei Targets")
        for net in (*self.critics, *self.targets):
            if net.size != self.critics[0].size:
                raise ConfigError("Target-Netze müssen die Form der Critics haben")

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def state_dim(self) -> int:
        return self.actor_spec.input_dim

    @property
    def action_dim(self) -> int:
        return self.actor_spec.output_dim // 2


@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray | float


@dataclass
class ImaginaryNoise:
    """Vorab gezogenes Reparametrisierungsrauschen.

    `critic`: eine Zeile pro Transition (a' im Bellman-Ziel);
    `actor`: eine Zeile pro Actor-Zustand (a^ in J_pi).
    """

    critic: np.ndarray
    actor: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n_transitions: int, n_states: int, action_dim: int) -> "ImaginaryNoise":
        return cls(
            rng.standard_normal((n_transitions, action_dim)),
            rng.standard_normal((n_states, action_dim)),
        )


@dataclass
class SacUpdateStats:
    critic_loss: float
    actor_loss: float
    alpha: float


def init_sac(
    state_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    action_low: np.ndarray,
    action_high: np.ndarray,
    hidden_dims: tuple[int, ...] = (64, 64),
    lr: float = 3e-4,
    gamma: float = 0.99,
    tau: float = 0.005,
    init_alpha: float = 1.0,
    target_entropy: float | None = None,
    activation: str = "relu",
) -> SacState:
    """Neue SAC-Instanz; Targets starten als Kopie der Critics."""
    if init_alpha <= 0:
        raise ConfigError(f"init_alpha muss > 0 sein: {init_alpha}")
    low = np.asarray(action_low, dtype=np.float64)
    high = np.asarray(action_high, dtype=np.float64)
    if low.shape != (action_dim,) or high.shape != (action_dim,) or np.any(high <= low):
        raise ConfigError("Aktionsgrenzen passen nicht zur Aktionsdimension")
    acts = (activation,) * len(hidden_dims) + ("identity",)
    actor_spec = MlpSpec(state_dim, tuple(hidden_dims), 2 * action_dim, acts)
    critic_spec = MlpSpec(state_dim + action_dim, tuple(hidden_dims), 1, acts)
    actor = init_mlp_params(actor_spec, rng)
    critics = [init_mlp_params(critic_spec, rng) for _ in range(2)]
    return SacState(
        actor_spec=actor_spec,
        critic_spec=critic_spec,
        actor=actor,
        critics=critics,
        targets=[c.copy() for c in critics],
        log_alpha=float(np.log(init_alpha)),
        target_entropy=float(-action_dim if target_entropy is None else target_entropy),
        action_scale=(high - low) / 2.0,
        action_bias=(high + low) / 2.0,
        actor_opt=adam_init(actor.size, lr),
        critic_opts=[adam_init(c.size, lr) for c in critics],
        alpha_opt=adam_init(1, lr),
        gamma=gamma,
        tau=tau,
    )


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass
class _PolicyPass:
    cache: MlpCache
    mean: np.ndarray
    log_std: np.ndarray
    std_mask: np.ndarray
    std: np.ndarray
    noise: np.ndarray
    squashed: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray


def _as_rows(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    arr = arr[None, :] if arr.ndim == 1 else arr
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ConfigError(f"{what}: erwartet Dimension {dim}, bekam Form {np.shape(x)}")
    return arr


def _policy_pass(
    sac: SacState,
    params: ParamVector,
    states: np.ndarray,
    noise: np.ndarray,
    temperature_scale: float = 1.0,
) -> _PolicyPass:
    A = sac.action_dim
    out, cache = mlp_forward(sac.actor_spec, params, states)
    mean = out[:, :A]
    raw = out[:, A:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
    std = np.exp(log_std) * np.sqrt(temperature_scale)
    pre = mean + std * noise
    y = np.tanh(pre)
    action = sac.action_scale * y + sac.action_bias
    log_prob = np.sum(
        -0.5 * noise * noise
        - log_std
        - 0.5 * np.log(temperature_scale)
        - HALF_LOG_2PI
        - np.log(sac.action_scale * (1.0 - y * y) + SQUASH_EPS),
        axis=1,
    )
    return _PolicyPass(cache, mean, log_std, mask, std, noise, y, action, log_prob)


def policy_sample(
    sac: SacState,
    s: np.ndarray,
    rng: RngLike = None,
    temperature_scale: float = 1.0,
    deterministic: bool = False,
) -> PolicySample:
    """Aktion(en) aus der Policy; temperature_scale multipliziert die Std mit sqrt(scale).

    deterministic=True liefert die Modus-Aktion tanh(mean) (Evaluation).
    """
    if not temperature_scale > 0:
        raise ValueError(f"temperature_scale muss > 0 sein: {temperature_scale}")
    single = np.ndim(s) == 1
    states = _as_rows(s, sac.state_dim, "Policy-Zustand")
    if deterministic:
        noise = np.zeros((states.shape[0], sac.action_dim))
    else:
        noise = make_rng(rng).standard_normal((states.shape[0], sac.action_dim))
    p = _policy_pass(sac, sac.actor, states, noise, temperature_scale)
    if single:
        return PolicySample(p.action[0], float(p.log_prob[0]))
    return PolicySample(p.action, p.log_prob)


# ---------------------------------------------------------------------------
# Critic-Verlust (Soft-Bellman-Residuum)
# ---------------------------------------------------------------------------


def _weights(weights: np.ndarray | None, n: int) -> np.ndarray:
    if n == 0:
        raise ValueError("Verlust auf leerer Menge")
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"Gewichte: erwartet ({n},), bekam {w.shape}")
    return w


def _noise(noise: np.ndarray | None, rng: RngLike, n: int, action_dim: int) -> np.ndarray:
    if noise is not None:
        arr = np.asarray(noise, dtype=np.float64)
        if arr.shape != (n, action_dim):
            raise ConfigError(f"Rauschen: erwartet ({n}, {action_dim}), bekam {arr.shape}")
        return arr
    return make_rng(rng).standard_normal((n, action_dim))


def bellman_targets(
    sac: SacState,
    batch: TransitionBatch,
    noise: np.ndarray,
    alpha: float | None = None,
) -> np.ndarray:
    """Konstantes Ziel y = r + gamma (min Qbar(s', a') - alpha log pi(a'|s')); kein Terminal-Masking."""
    a = sac.alpha if alpha is None else alpha
    nxt = _policy_pass(sac, sac.actor, batch.next_states, noise)
    x = np.concatenate([batch.next_states, nxt.action], axis=1)
    q_next = np.minimum(
        mlp_forward(sac.critic_spec, sac.targets[0], x)[0][:, 0],
        mlp_forward(sac.critic_spec, sac.targets[1], x)[0][:, 0],
    )
    return batch.rewards + sac.gamma * (q_next - a * nxt.log_prob)


def critic_loss_and_grad(
    sac: SacState,
    batch: TransitionBatch,
    rng: RngLike = None,
    *,
    weights: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    critic_params: list[ParamVector] | None = None,
    alpha: float | None = None,
) -> tuple[float, list[ParamVector]]:
    """J_Q für beide Critics (summiert) und je ein Gradient pro Critic."""
    n = len(batch)
    w = _weights(weights, n)
    eps = _noise(noise, rng, n, sac.action_dim)
    params = sac.critics if critic_params is None else critic_params
    target = bellman_targets(sac, batch, eps, alpha)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    loss = 0.0
    grads = []
    for theta in params:
        q, cache = mlp_forward(sac.critic_spec, theta, x)
        resid = q[:, 0] - target
        loss += float(np.sum(w * 0.5 * resid * resid))
        grad, _ = mlp_backward(sac.critic_spec, theta, cache, (w * resid)[:, None])
        grads.append(grad)
    return loss, grads


def critic_loss(
    sac: SacState,
    batch: TransitionBatch,
    rng: RngLike = None,
    *,
    weights: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    critic_params: list[ParamVector] | None = None,
    alpha: float | None = None,
) -> float:
    n = len(batch)
    w = _weights(weights, n)
    eps = _noise(noise, rng, n, sac.action_dim)
    params = sac.critics if critic_params is None else critic_params
    target = bellman_targets(sac, batch, eps, alpha)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    loss = 0.0
    for theta in params:
        resid = mlp_forward(sac.critic_spec, theta, x)[0][:, 0] - target
        loss += float(np.sum(w * 0.5 * resid * resid))
    return loss


def critic_directional(
    sac: SacState,
    batch: TransitionBatch,
    direction: list[ParamVector],
    noise: np.ndarray,
    *,
    critic_params: list[ParamVector] | None = None,
    alpha: float | None = None,
) -> np.ndarray:
    """Pro Transition: Ableitung des ungewichteten J_Q-Terms in Richtung `direction`."""
    params = sac.critics if critic_params is None else critic_params
    target = bellman_targets(sac, batch, noise, alpha)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    out = np.zeros(len(batch))
    for theta, v in zip(params, direction):
        q, dq = mlp_jvp(sac.critic_spec, theta, x, v)
        out += (q[:, 0] - target) * dq[:, 0]
    return out


# ---------------------------------------------------------------------------
# Actor-Verlust
# ---------------------------------------------------------------------------


@dataclass
class _ActorTerms:
    loss: np.ndarray  # (n,)
    upstream: np.ndarray  # (n, 2A): d loss_i / d actor-Ausgabe
    policy: _PolicyPass


def _actor_terms(
    sac: SacState,
    states: np.ndarray,
    noise: np.ndarray,
    actor_params: ParamVector,
    critic_params: list[ParamVector],
    alpha: float,
) -> _ActorTerms:
    S = sac.state_dim
    p = _policy_pass(sac, actor_params, states, noise)
    x = np.concatenate([states, p.action], axis=1)
    q_vals, dq_da = [], []
    ones = np.ones((states.shape[0], 1))
    for theta in critic_params:
        q, cache = mlp_forward(sac.critic_spec, theta, x)
        _, d_in = mlp_backward(sac.critic_spec, theta, cache, ones)
        q_vals.append(q[:, 0])
        dq_da.append(d_in[:, S:])
    first = q_vals[0] <= q_vals[1]
    q_min = np.where(first, q_vals[0], q_vals[1])
    dq_min = np.where(first[:, None], dq_da[0], dq_da[1])

    slope = sac.action_scale * (1.0 - p.squashed * p.squashed)
    dlogp_dpre = 2.0 * p.squashed * slope / (slope + SQUASH_EPS)
    d_pre = alpha * dlogp_dpre - dq_min * slope
    d_mean = d_pre
    d_log_std = (-alpha + d_pre * p.std * p.noise) * p.std_mask
    upstream = np.concatenate([d_mean, d_log_std], axis=1)
    return _ActorTerms(alpha * p.log_prob - q_min, upstream, p)


def _actor_setup(
    sac: SacState,
    states: np.ndarray,
    rng: RngLike,
    weights: np.ndarray | None,
    noise: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = _as_rows(states, sac.state_dim, "Actor-Zustände")
    w = _weights(weights, rows.shape[0])
    return rows, w, _noise(noise, rng, rows.shape[0], sac.action_dim)


def actor_loss_and_grad(
    sac: SacState,
    states: np.ndarray,
    rng: RngLike = None,
    *,
    weights: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    actor_params: ParamVector | None = None,
    critic_params: list[ParamVector] | None = None,
    alpha: float | None = None,
) -> tuple[float, ParamVector]:
    """J_pi mit reparametrisierter Aktion; Gradient nur nach theta_pi."""
    rows, w, eps = _actor_setup(sac, states, rng, weights, noise)
    theta = sac.actor if actor_params is None else actor_params
    terms = _actor_terms(
        sac, rows, eps, theta,
        sac.critics if critic_params is None else critic_params,
        sac.alpha if alpha is None else alpha,
    )
    grad, _ = mlp_backward(sac.actor_spec, theta, terms.policy.cache, terms.upstream * w[:, None])
    return float(np.sum(w * terms.loss)), grad


def actor_loss(
    sac: SacState,
    states: np.ndarray,
    rng: RngLike = None,
    *,
    weights: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    actor_params: ParamVector | None = None,
    critic_params: list[ParamVector] | None = None,
    alpha: float | None = None,
) -> float:
    rows, w, eps = _actor_setup(sac, states, rng, weights, noise)
    terms = _actor_terms(
        sac, rows, eps,
        sac.actor if actor_params is None else actor_params,
        sac.critics if critic_params is None else critic_params,
        sac.alpha if alpha is None else alpha,
    )
    return float(np.sum(w * terms.loss))


def actor_directional(
    sac: SacState,
    states: np.ndarray,
    direction: ParamVector,
    noise: np.ndarray,
    *,
    actor_params: ParamVector | None = None,
    critic_params: list[ParamVector] | None = None,
    alpha: float | None = None,
) -> np.ndarray:
    """Pro Zustand: Ableitung des ungewichteten J_pi-Terms in Richtung `direction`."""
    rows = _as_rows(states, sac.state_dim, "Actor-Zustände")
    theta = sac.actor if actor_params is None else actor_params
    terms = _actor_terms(
        sac, rows, noise, theta,
        sac.critics if critic_params is None else critic_params,
        sac.alpha if alpha is None else alpha,
    )
    _, d_out = mlp_jvp(sac.actor_spec, theta, rows, direction)
    return np.sum(terms.upstream * d_out, axis=1)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def apply_critic_step(sac: SacState, grads: list[ParamVector]) -> None:
    for j in range(2):
        sac.critic_opts[j], sac.critics[j] = adam_step(sac.critic_opts[j], sac.critics[j], grads[j])


def apply_actor_step(sac: SacState, grad: ParamVector) -> None:
    sac.actor_opt, sac.actor = adam_step(sac.actor_opt, sac.actor, grad)


def temperature_update(sac: SacState, states: np.ndarray, rng: RngLike = None) -> float:
    """Ein Adam-Schritt auf log_alpha für mean(-alpha (log pi + H_target)); liefert neues alpha."""
    rows = _as_rows(states, sac.state_dim, "Temperatur-Zustände")
    if rows.shape[0] == 0:
        raise ValueError("Temperatur-Update auf leerer Menge")
    eps = make_rng(rng).standard_normal((rows.shape[0], sac.action_dim))
    log_prob = _policy_pass(sac, sac.actor, rows, eps).log_prob
    grad = -sac.alpha * float(np.mean(log_prob + sac.target_entropy))
    current = ParamVector(np.array([sac.log_alpha]), _ALPHA_LAYOUT)
    sac.alpha_opt, updated = adam_step(sac.alpha_opt, current, np.array([grad]))
    sac.log_alpha = float(updated.values[0])
    return sac.alpha


def target_soft_update(sac: SacState) -> None:
    """Polyak: theta_bar <- tau theta + (1 - tau) theta_bar."""
    for j in range(2):
        mixed = sac.tau * sac.critics[j].values + (1.0 - sac.tau) * sac.targets[j].values
        sac.targets[j] = sac.targets[j].with_values(mixed)


def sac_update_real(sac: SacState, batch: TransitionBatch, rng: RngLike = None) -> SacUpdateStats:
    """Critic-, Actor-, Temperatur- und Target-Update auf einer realen Batch (Mittelwerte)."""
    n = len(batch)
    if n == 0:
        raise ValueError("SAC-Update auf leerer Batch")
    gen = make_rng(rng)
    w = np.full(n, 1.0 / n)
    q_loss, q_grads = critic_loss_and_grad(sac, batch, gen, weights=w)
    apply_critic_step(sac, q_grads)
    pi_loss, pi_grad = actor_loss_and_grad(sac, batch.states, gen, weights=w)
    apply_actor_step(sac, pi_grad)
    alpha = temperature_update(sac, batch.states, gen)
    target_soft_update(sac)
    logger.debug("SAC real: J_Q=%.5f J_pi=%.5f alpha=%.5f", q_loss, pi_loss, alpha)
    return SacUpdateStats(q_loss, pi_loss, alpha)
