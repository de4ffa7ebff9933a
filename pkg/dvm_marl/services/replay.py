"""Fixed-capacity ring buffer of joint transitions."""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from dvm_marl.core.errors import BufferStateError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1_000_000
_INITIAL_ALLOCATION = 4096


@dataclass
class Transition:
    """One joint step.

    Attributes:
        obs: Joint observation ``(n, obs_dim)``
        actions: Joint action encoding ``(n, act_dim)``: one-hot rows for
            discrete actions, force vectors for continuous ones
        reward: Shared team reward
        next_obs: Joint next observation ``(n, obs_dim)``
        done: Episode ended at this step
    """

    obs: np.ndarray
    actions: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class TransitionBatch:
    """Column-stacked transitions, the form the update rules consume."""

    obs: np.ndarray  # (B, n, obs_dim)
    actions: np.ndarray  # (B, n, act_dim)
    rewards: np.ndarray  # (B,)
    next_obs: np.ndarray  # (B, n, obs_dim)
    dones: np.ndarray  # (B,) float 0/1

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def transitions(self) -> Iterator[Transition]:
        for k in range(len(self)):
            yield Transition(
                obs=self.obs[k],
                actions=self.actions[k],
                reward=float(self.rewards[k]),
                next_obs=self.next_obs[k],
                done=bool(self.dones[k]),
            )


class ReplayBuffer:
    """Shared team buffer; once full, the oldest entries are overwritten first.

    Storage grows geometrically up to ``capacity`` so the default 10^6 capacity
    costs nothing until it is used.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0:
            raise ParameterError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.size = 0
        self.cursor = 0
        self._obs: Optional[np.ndarray] = None
        self._actions: Optional[np.ndarray] = None
        self._rewards: Optional[np.ndarray] = None
        self._next_obs: Optional[np.ndarray] = None
        self._dones: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.size

    @property
    def num_agents(self) -> Optional[int]:
        """Agent count of the stored joint transitions, ``None`` before the first push."""
        return None if self._obs is None else self._obs.shape[1]

    def _allocate(self, t: Transition, rows: int) -> None:
        self._obs = np.zeros((rows,) + t.obs.shape)
        self._actions = np.zeros((rows,) + t.actions.shape)
        self._rewards = np.zeros(rows)
        self._next_obs = np.zeros((rows,) + t.obs.shape)
        self._dones = np.zeros(rows)

    def _grow(self) -> None:
        rows = min(self.capacity, 2 * self._rewards.shape[0])
        logger.debug(f"Replay storage grows to {rows} rows")
        for name in ("_obs", "_actions", "_rewards", "_next_obs", "_dones"):
            old = getattr(self, name)
            new = np.zeros((rows,) + old.shape[1:])
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def push(self, t: Transition) -> "ReplayBuffer":
        """Store a transition.

        Returns:
            The buffer itself
        """
        obs = np.asarray(t.obs, dtype=np.float64)
        actions = np.asarray(t.actions, dtype=np.float64)
        next_obs = np.asarray(t.next_obs, dtype=np.float64)
        if obs.shape != next_obs.shape or obs.ndim != 2 or actions.ndim != 2:
            raise ShapeError(
                f"malformed transition: obs {obs.shape}, actions {actions.shape}, "
                f"next_obs {next_obs.shape}"
            )
        if obs.shape[0] != actions.shape[0]:
            raise ShapeError("observation and action blocks cover different agent counts")
        if not np.isfinite(t.reward):
            raise ParameterError(f"non-finite reward {t.reward}")

        if self._obs is None:
            self._allocate(
                Transition(obs, actions, t.reward, next_obs, t.done),
                min(self.capacity, _INITIAL_ALLOCATION),
            )
        elif self._obs.shape[1:] != obs.shape or self._actions.shape[1:] != actions.shape:
            raise ShapeError("transition shape differs from the stored ones")
        if self.cursor >= self._rewards.shape[0]:
            self._grow()

        row = self.cursor
        self._obs[row] = obs
        self._actions[row] = actions
        self._rewards[row] = t.reward
        self._next_obs[row] = next_obs
        self._dones[row] = float(t.done)

        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def _draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise BufferStateError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample_arrays(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniformly sample ``n`` transitions with replacement, column-stacked."""
        idx = self._draw(n, rng)
        return TransitionBatch(
            obs=self._obs[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_obs=self._next_obs[idx],
            dones=self._dones[idx],
        )

    def sample_batch(self, n: int, rng: np.random.Generator) -> List[Transition]:
        """Uniformly sample ``n`` transitions with replacement."""
        return list(self.sample_arrays(n, rng).transitions())

    def sample_observations(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniformly sample ``n`` joint observations ``(n, agents, obs_dim)``, no actions."""
        idx = self._draw(n, rng)
        return self._obs[idx]

    def stored(self) -> List[Transition]:
        """All stored transitions, oldest first."""
        if self.size == 0:
            return []
        start = self.cursor if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        return list(
            TransitionBatch(
                obs=self._obs[order],
                actions=self._actions[order],
                rewards=self._rewards[order],
                next_obs=self._next_obs[order],
                dones=self._dones[order],
            ).transitions()
        )
