"""Bounded FIFO transition store with uniform sampling.

Transitions do not copy states. Each one points at an :class:`Episode`
(instance plus its full action sequence) and a step index; the state is the
episode's action prefix replayed from reset, which is deterministic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import env
from .routing import ProblemInstance

DEFAULT_CAPACITY = 1_000_000


class ReplayNotReady(RuntimeError):
    """Fewer transitions stored than requested."""


@dataclass(frozen=True, eq=False)
class Episode:
    episode_id: int
    instance: ProblemInstance
    actions: np.ndarray  # (T,) int


@dataclass(frozen=True)
class Transition:
    episode_id: int
    step: int
    action: int
    reward: float
    terminal: bool
    episode: Optional[Episode] = None

    def state(self) -> env.ConstructionState:
        s = env.reset(self.episode.instance)
        for a in self.episode.actions[: self.step]:
            s, _ = env.step(s, int(a))
        return s

    def next_state(self) -> env.ConstructionState:
        return env.step(self.state(), self.action)[0]

    @property
    def mask(self) -> np.ndarray:
        return env.feasible_mask(self.state())

    @property
    def next_mask(self) -> Optional[np.ndarray]:
        nxt = self.next_state()
        return None if nxt.terminal else env.feasible_mask(nxt)


class ReplayBuffer:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episode_id = np.zeros(capacity, dtype=np.int64)
        self._step = np.zeros(capacity, dtype=np.int32)
        self._action = np.zeros(capacity, dtype=np.int32)
        self._reward = np.zeros(capacity, dtype=np.float64)
        self._terminal = np.zeros(capacity, dtype=bool)
        self._episodes: dict[int, Episode] = {}
        self._refs: dict[int, int] = {}
        self._head = 0  # next slot to write
        self._size = 0
        self._next_episode = 0
        self._lock = threading.Lock()
        self.reads = 0

    def __len__(self) -> int:
        return self._size

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    def new_episode(self, instance: ProblemInstance, actions) -> Episode:
        with self._lock:
            ep = Episode(self._next_episode, instance, np.asarray(actions, dtype=np.int32))
            self._next_episode += 1
        return ep

    def _write(self, ep: Episode, step: int, action: int, reward: float, terminal: bool) -> None:
        slot = self._head
        if self._size == self.capacity:
            old = int(self._episode_id[slot])
            self._refs[old] -= 1
            if self._refs[old] == 0:
                del self._refs[old]
                del self._episodes[old]
        else:
            self._size += 1
        if ep.episode_id not in self._episodes:
            self._episodes[ep.episode_id] = ep
            self._refs[ep.episode_id] = 0
        self._refs[ep.episode_id] += 1
        self._episode_id[slot] = ep.episode_id
        self._step[slot] = step
        self._action[slot] = action
        self._reward[slot] = reward
        self._terminal[slot] = terminal
        self._head = (slot + 1) % self.capacity

    def push(self, transition: Transition) -> None:
        if transition.episode is None:
            raise ValueError("transition must reference its episode")
        if not np.isfinite(transition.reward):
            raise ValueError("reward must be finite")
        with self._lock:
            self._write(
                transition.episode,
                transition.step,
                transition.action,
                transition.reward,
                transition.terminal,
            )

    def push_episode(self, episode: Episode, rewards: np.ndarray) -> None:
        """Push every transition of a finished episode."""
        rewards = np.asarray(rewards, dtype=np.float64)
        T = len(episode.actions)
        if rewards.shape != (T,) or not np.all(np.isfinite(rewards)):
            raise ValueError("need one finite reward per action")
        with self._lock:
            for t in range(T):
                self._write(episode, t, int(episode.actions[t]), float(rewards[t]), t == T - 1)

    def _slot(self, logical: np.ndarray) -> np.ndarray:
        oldest = (self._head - self._size) % self.capacity
        return (oldest + logical) % self.capacity

    def _transition(self, slot: int) -> Transition:
        eid = int(self._episode_id[slot])
        return Transition(
            eid,
            int(self._step[slot]),
            int(self._action[slot]),
            float(self._reward[slot]),
            bool(self._terminal[slot]),
            self._episodes[eid],
        )

    def __getitem__(self, i: int) -> Transition:
        """i-th oldest stored transition."""
        if not -self._size <= i < self._size:
            raise IndexError(i)
        return self._transition(int(self._slot(np.array([i % self._size]))[0]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform draw with replacement."""
        with self._lock:
            if self._size < batch_size:
                raise ReplayNotReady(f"{self._size} transitions stored, {batch_size} requested")
            self.reads += 1
            slots = self._slot(rng.integers(0, self._size, size=batch_size))
            return [self._transition(int(s)) for s in slots]

    def nbytes(self) -> int:
        """Approximate memory held by episode payloads (the columns are fixed-size)."""
        total = 0
        for ep in self._episodes.values():
            total += ep.actions.nbytes + ep.instance.coords.nbytes
            if ep.instance.demands is not None:
                total += ep.instance.demands.nbytes
        return total
