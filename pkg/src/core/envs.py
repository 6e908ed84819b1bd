"""Analytische Regelungs-Umgebungen mit bekannter Belohnungsfunktion r(s, a, s').

Drei Umgebungen mit fester Episodenlänge (kein künstliches Terminal):

    pendulum          obs [cos th, sin th, th_dot], Drehmoment in [-2, 2], H=200, dt=0.05
    pointmass         obs [x, y, vx, vy], Kraft in [-1, 1]^2, H=100, dt=0.1
    cartpole-swingup  obs [x, x_dot, cos th, sin th, th_dot], Kraft in [-1, 1], H=200, dt=0.05

Alle Belohnungen werden nur aus dem Folgezustand s' und der Aktion a
berechnet, damit das Dynamikmodell sie auf vorhergesagte Zustände anwenden
kann. Integration: explizites Euler-Verfahren.
"""

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from src.core.errors import ConfigError
from src.utils.logger import get_logger
from src.utils.rng import make_rng

logger = get_logger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    """Statische Beschreibung einer Umgebung."""

    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon: int
    dt: float
    obs_low: tuple[float, ...]
    obs_high: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ConfigError(f"{self.name}: Aktionsgrenzen passen nicht zu action_dim")
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ConfigError(f"{self.name}: action_low muss < action_high sein")
        if self.horizon < 1:
            raise ConfigError(f"{self.name}: horizon muss >= 1 sein")

    @property
    def low(self) -> np.ndarray:
        return np.array(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.array(self.action_high, dtype=np.float64)


@dataclass
class EnvState:
    """Laufender Zustand einer Episode.

    `physics` ist der interne Zustand (z.B. Winkel statt cos/sin),
    `observation` das, was der Agent sieht.
    """

    spec: EnvSpec
    observation: np.ndarray
    physics: np.ndarray
    step_index: int
    rng: np.random.Generator


class _Dynamics(Protocol):
    def initial(self, rng: np.random.Generator) -> np.ndarray: ...

    def integrate(self, physics: np.ndarray, action: np.ndarray) -> np.ndarray: ...

    def observe(self, physics: np.ndarray) -> np.ndarray: ...

    def reward(self, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray: ...


def _angle_normalize(theta: float) -> float:
    return ((theta + np.pi) % (2.0 * np.pi)) - np.pi


class Pendulum:
    """Inverses Pendel, th = 0 ist oben (instabiles Gleichgewicht)."""

    G = 10.0
    MASS = 1.0
    LENGTH = 1.0
    DT = 0.05
    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    SPEC = EnvSpec(
        name="pendulum",
        state_dim=3,
        action_dim=1,
        action_low=(-MAX_TORQUE,),
        action_high=(MAX_TORQUE,),
        horizon=200,
        dt=DT,
        obs_low=(-1.0, -1.0, -MAX_SPEED),
        obs_high=(1.0, 1.0, MAX_SPEED),
    )

    @staticmethod
    def initial(rng: np.random.Generator) -> np.ndarray:
        theta = rng.uniform(-np.pi, np.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return np.array([theta, theta_dot])

    @classmethod
    def integrate(cls, physics: np.ndarray, action: np.ndarray) -> np.ndarray:
        theta, theta_dot = physics
        u = action[0]
        theta_acc = 3.0 * cls.G / (2.0 * cls.LENGTH) * np.sin(theta) + 3.0 / (
            cls.MASS * cls.LENGTH**2
        ) * u
        new_theta = _angle_normalize(theta + theta_dot * cls.DT)
        new_theta_dot = np.clip(theta_dot + theta_acc * cls.DT, -cls.MAX_SPEED, cls.MAX_SPEED)
        return np.array([new_theta, new_theta_dot])

    @staticmethod
    def observe(physics: np.ndarray) -> np.ndarray:
        theta, theta_dot = physics
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    @staticmethod
    def reward(s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        """-(th^2 + 0.1 th_dot^2 + 0.001 u^2), Winkel aus s' rekonstruiert."""
        theta = np.arctan2(s_next[..., 1], s_next[..., 0])
        theta_dot = s_next[..., 2]
        u = a[..., 0]
        return -(theta * theta + 0.1 * theta_dot * theta_dot + 0.001 * u * u)


class PointMass2D:
    """Punktmasse in der Ebene, Ziel im Ursprung, lineare Dämpfung."""

    DT = 0.1
    DAMPING = 0.25
    POS_LIMIT = 2.0
    VEL_LIMIT = 2.0

    SPEC = EnvSpec(
        name="pointmass",
        state_dim=4,
        action_dim=2,
        action_low=(-1.0, -1.0),
        action_high=(1.0, 1.0),
        horizon=100,
        dt=DT,
        obs_low=(-POS_LIMIT, -POS_LIMIT, -VEL_LIMIT, -VEL_LIMIT),
        obs_high=(POS_LIMIT, POS_LIMIT, VEL_LIMIT, VEL_LIMIT),
    )

    @staticmethod
    def initial(rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-1.5, 1.5, size=2)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    @classmethod
    def integrate(cls, physics: np.ndarray, action: np.ndarray) -> np.ndarray:
        pos, vel = physics[:2], physics[2:]
        new_pos = np.clip(pos + vel * cls.DT, -cls.POS_LIMIT, cls.POS_LIMIT)
        new_vel = np.clip(vel + (action - cls.DAMPING * vel) * cls.DT, -cls.VEL_LIMIT, cls.VEL_LIMIT)
        return np.concatenate([new_pos, new_vel])

    @staticmethod
    def observe(physics: np.ndarray) -> np.ndarray:
        return physics.copy()

    @staticmethod
    def reward(s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        """Negativer Abstand zum Ziel minus kleine Aktionskosten."""
        dist = np.hypot(s_next[..., 0], s_next[..., 1])
        effort = a[..., 0] * a[..., 0] + a[..., 1] * a[..., 1]
        return -dist - 0.01 * effort


class CartPoleSwingUp:
    """Wagen mit Pendel, startet hängend; th = 0 ist aufrecht."""

    G = 9.8
    CART_MASS = 1.0
    POLE_MASS = 0.1
    HALF_LENGTH = 0.5
    FORCE_MAG = 10.0
    DT = 0.05
    X_LIMIT = 3.0
    X_DOT_LIMIT = 10.0
    TH_DOT_LIMIT = 20.0

    SPEC = EnvSpec(
        name="cartpole-swingup",
        state_dim=5,
        action_dim=1,
        action_low=(-1.0,),
        action_high=(1.0,),
        horizon=200,
        dt=DT,
        obs_low=(-X_LIMIT, -X_DOT_LIMIT, -1.0, -1.0, -TH_DOT_LIMIT),
        obs_high=(X_LIMIT, X_DOT_LIMIT, 1.0, 1.0, TH_DOT_LIMIT),
    )

    @staticmethod
    def initial(rng: np.random.Generator) -> np.ndarray:
        x, x_dot, th_dot = rng.uniform(-0.05, 0.05, size=3)
        theta = _angle_normalize(np.pi + rng.uniform(-0.1, 0.1))
        return np.array([x, x_dot, theta, th_dot])

    @classmethod
    def integrate(cls, physics: np.ndarray, action: np.ndarray) -> np.ndarray:
        x, x_dot, theta, th_dot = physics
        force = cls.FORCE_MAG * action[0]
        total_mass = cls.CART_MASS + cls.POLE_MASS
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        temp = (force + cls.POLE_MASS * cls.HALF_LENGTH * th_dot**2 * sin_t) / total_mass
        th_acc = (cls.G * sin_t - cos_t * temp) / (
            cls.HALF_LENGTH * (4.0 / 3.0 - cls.POLE_MASS * cos_t**2 / total_mass)
        )
        x_acc = temp - cls.POLE_MASS * cls.HALF_LENGTH * th_acc * cos_t / total_mass

        new_x = x + x_dot * cls.DT
        new_x_dot = np.clip(x_dot + x_acc * cls.DT, -cls.X_DOT_LIMIT, cls.X_DOT_LIMIT)
        # Wand: Wagen bleibt am Rand stehen / wall: cart stops at the limit
        if abs(new_x) >= cls.X_LIMIT:
            new_x = float(np.clip(new_x, -cls.X_LIMIT, cls.X_LIMIT))
            new_x_dot = 0.0
        new_theta = _angle_normalize(theta + th_dot * cls.DT)
        new_th_dot = np.clip(th_dot + th_acc * cls.DT, -cls.TH_DOT_LIMIT, cls.TH_DOT_LIMIT)
        return np.array([new_x, new_x_dot, new_theta, new_th_dot])

    @staticmethod
    def observe(physics: np.ndarray) -> np.ndarray:
        x, x_dot, theta, th_dot = physics
        return np.array([x, x_dot, np.cos(theta), np.sin(theta), th_dot])

    @staticmethod
    def reward(s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        """Höhe der Pendelspitze (cos th) minus Positions- und Aktionskosten."""
        x = s_next[..., 0]
        u = a[..., 0]
        return s_next[..., 2] - 0.01 * x * x - 0.001 * u * u


_REGISTRY: dict[str, _Dynamics] = {
    Pendulum.SPEC.name: Pendulum(),
    PointMass2D.SPEC.name: PointMass2D(),
    CartPoleSwingUp.SPEC.name: CartPoleSwingUp(),
}

ENV_SPECS: dict[str, EnvSpec] = {
    Pendulum.SPEC.name: Pendulum.SPEC,
    PointMass2D.SPEC.name: PointMass2D.SPEC,
    CartPoleSwingUp.SPEC.name: CartPoleSwingUp.SPEC,
}


def get_env_spec(name: str) -> EnvSpec:
    try:
        return ENV_SPECS[name]
    except KeyError:
        raise ConfigError(
            f"Unbekannte Umgebung '{name}' (verfügbar: {', '.join(sorted(ENV_SPECS))})"
        ) from None


def _dynamics(spec: EnvSpec) -> _Dynamics:
    try:
        return _REGISTRY[spec.name]
    except KeyError:
        raise ConfigError(f"Unbekannte Umgebung '{spec.name}'") from None


def _check_dims(spec: EnvSpec, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> None:
    if np.shape(s)[-1:] != (spec.state_dim,) or np.shape(s_next)[-1:] != (spec.state_dim,):
        raise ConfigError(f"{spec.name}: Zustandsdimension muss {spec.state_dim} sein")
    if np.shape(a)[-1:] != (spec.action_dim,):
        raise ConfigError(f"{spec.name}: Aktionsdimension muss {spec.action_dim} sein")


def env_reset(spec: EnvSpec | str, seed: int | np.random.Generator) -> EnvState:
    """Startzustand aus der dokumentierten Anfangsverteilung; deterministisch im Seed."""
    if isinstance(spec, str):
        spec = get_env_spec(spec)
    dyn = _dynamics(spec)
    rng = make_rng(seed)
    physics = dyn.initial(rng)
    return EnvState(spec, dyn.observe(physics), physics, 0, rng)


def env_reward(spec: EnvSpec, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """Reine, analytische Belohnung; akzeptiert auch Batches (..., dim)."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    _check_dims(spec, s, a, s_next)
    return _dynamics(spec).reward(s, a, s_next)


def env_step(state: EnvState, action: np.ndarray) -> tuple[EnvState, float, bool]:
    """Ein Umgebungsschritt; Aktion wird vor der Dynamik auf [low, high] geclippt."""
    spec = state.spec
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (spec.action_dim,):
        raise ConfigError(f"{spec.name}: Aktionsdimension muss {spec.action_dim} sein, bekam {action.shape}")
    if state.step_index >= spec.horizon:
        raise ValueError(f"{spec.name}: Episode ist bereits beendet (step_index={state.step_index})")
    dyn = _dynamics(spec)
    clipped = np.clip(action, spec.low, spec.high)
    physics = dyn.integrate(state.physics, clipped)
    obs = dyn.observe(physics)
    reward = float(env_reward(spec, state.observation, clipped, obs))
    step_index = state.step_index + 1
    next_state = EnvState(spec, obs, physics, step_index, state.rng)
    return next_state, reward, step_index == spec.horizon
