"""ReplayBuffer: reale Transitionen mit Episodenstruktur.

Ringpuffer auf numpy-Arrays. Unterstützt Batch-Sampling, zusammenhängende
Zustands/Aktions-Sequenzen (für Meta-Rollouts) und Bootstrap-Indizes für
das Ensemble.
"""

from dataclasses import dataclass

import numpy as np

from src.core.errors import ConfigError, EmptyBufferError, SequenceUnavailableError
from src.utils.logger import get_logger
from src.utils.rng import RngLike, make_rng

logger = get_logger(__name__)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    episode_id: int
    step_in_episode: int


@dataclass
class TransitionBatch:
    """Spaltenweise Batch von Transitionen (n Zeilen)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


class ReplayBuffer:
    """FIFO-Ringpuffer für reale Transitionen."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 200_000):
        if capacity < 1:
            raise ConfigError("Buffer-Kapazität muss >= 1 sein")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity = capacity
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros((capacity, action_dim))
        self._rewards = np.zeros(capacity)
        self._next_states = np.zeros((capacity, state_dim))
        self._episode_ids = np.zeros(capacity, dtype=np.int64)
        self._steps = np.zeros(capacity, dtype=np.int64)
        self._head = 0  # nächste Schreibposition
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, transition: Transition) -> None:
        """Fügt eine Transition an; bei voller Kapazität fällt die älteste heraus."""
        s = np.asarray(transition.s, dtype=np.float64)
        a = np.asarray(transition.a, dtype=np.float64)
        s_next = np.asarray(transition.s_next, dtype=np.float64)
        if s.shape != (self.state_dim,) or s_next.shape != (self.state_dim,):
            raise ConfigError(f"Zustandsdimension muss {self.state_dim} sein")
        if a.shape != (self.action_dim,):
            raise ConfigError(f"Aktionsdimension muss {self.action_dim} sein")
        if not np.isfinite(transition.r):
            raise ValueError("Belohnung ist nicht endlich")
        i = self._head
        self._states[i] = s
        self._actions[i] = a
        self._rewards[i] = transition.r
        self._next_states[i] = s_next
        self._episode_ids[i] = transition.episode_id
        self._steps[i] = transition.step_in_episode
        self._head = (self._head + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        """Physische Indizes in chronologischer Reihenfolge (älteste zuerst)."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def get(self, index: int) -> Transition:
        """Transition an chronologischer Position `index`."""
        if not 0 <= index < self._size:
            raise IndexError(index)
        i = int(self._order()[index])
        return Transition(
            self._states[i].copy(),
            self._actions[i].copy(),
            float(self._rewards[i]),
            self._next_states[i].copy(),
            int(self._episode_ids[i]),
            int(self._steps[i]),
        )

    def batch(self, indices: np.ndarray) -> TransitionBatch:
        """Batch zu chronologischen Indizes."""
        phys = self._order()[np.asarray(indices, dtype=np.int64)]
        return TransitionBatch(
            self._states[phys].copy(),
            self._actions[phys].copy(),
            self._rewards[phys].copy(),
            self._next_states[phys].copy(),
        )

    def all(self) -> TransitionBatch:
        return self.batch(np.arange(self._size))

    def sample_batch(self, n: int, seed: RngLike = None) -> TransitionBatch:
        """n Transitionen gleichverteilt mit Zurücklegen."""
        if self._size == 0:
            raise EmptyBufferError("Kann nicht aus leerem Buffer samplen")
        rng = make_rng(seed)
        return self.batch(rng.integers(0, self._size, size=n))

    def _sequence_starts(self, horizon: int) -> np.ndarray:
        """Chronologische Startindizes, ab denen `horizon` Schritte derselben Episode folgen."""
        if self._size < horizon:
            return np.zeros(0, dtype=np.int64)
        order = self._order()
        eps = self._episode_ids[order]
        steps = self._steps[order]
        last = horizon - 1
        same_episode = eps[last:] == eps[: self._size - last]
        contiguous = (steps[last:] - steps[: self._size - last]) == last
        return np.flatnonzero(same_episode & contiguous)

    def sample_state_action_sequences(
        self, count: int, horizon: int, seed: RngLike = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Reale Startzustände (count, S) und Aktionsfolgen (count, H, A).

        Jede Folge besteht aus H aufeinanderfolgenden realen Aktionen derselben
        Episode, beginnend beim zurückgegebenen Zustand.
        """
        if horizon < 1:
            raise ConfigError("H muss >= 1 sein")
        if self._size == 0:
            raise EmptyBufferError("Kann nicht aus leerem Buffer samplen")
        starts = self._sequence_starts(horizon)
        if starts.size == 0:
            raise SequenceUnavailableError(horizon)
        rng = make_rng(seed)
        chosen = starts[rng.integers(0, starts.size, size=count)]
        order = self._order()
        offsets = chosen[:, None] + np.arange(horizon)[None, :]
        phys = order[offsets]
        return self._states[phys[:, 0]].copy(), self._actions[phys].copy()

    def sample_states(self, count: int, seed: RngLike = None) -> np.ndarray:
        """Reale Startzustände für Explore-Rollouts."""
        return self.sample_batch(count, seed).states

    def bootstrap_datasets(self, n_models: int, seed: RngLike = None) -> list[np.ndarray]:
        """B Index-Multimengen, jede mit genau N = len(buffer) Ziehungen mit Zurücklegen."""
        if self._size == 0:
            raise EmptyBufferError("Bootstrap auf leerem Buffer nicht möglich")
        rng = make_rng(seed)
        return [rng.integers(0, self._size, size=self._size) for _ in range(n_models)]

    # ------------------------------------------------------------------
    # Checkpoint-Unterstützung
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Chronologisch geordnete Inhalte (für Checkpoints)."""
        order = self._order()
        return {
            "states": self._states[order],
            "actions": self._actions[order],
            "rewards": self._rewards[order],
            "next_states": self._next_states[order],
            "episode_ids": self._episode_ids[order],
            "steps": self._steps[order],
        }

    @classmethod
    def from_arrays(cls, capacity: int, arrays: dict[str, np.ndarray]) -> "ReplayBuffer":
        states = np.asarray(arrays["states"], dtype=np.float64)
        actions = np.asarray(arrays["actions"], dtype=np.float64)
        n = states.shape[0]
        if n > capacity:
            raise ConfigError("Gespeicherter Buffer ist größer als die Kapazität")
        buf = cls(states.shape[1], actions.shape[1], capacity)
        buf._states[:n] = states
        buf._actions[:n] = actions
        buf._rewards[:n] = arrays["rewards"]
        buf._next_states[:n] = arrays["next_states"]
        buf._episode_ids[:n] = np.asarray(arrays["episode_ids"]).astype(np.int64)
        buf._steps[:n] = np.asarray(arrays["steps"]).astype(np.int64)
        buf._size = n
        buf._head = n % capacity
        return buf
