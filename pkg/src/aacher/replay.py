"""Circular replay buffer with hindsight ("future" strategy) relabeling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numcore import ContractViolation
from .rng import Rng

RewardFn = Callable[[np.ndarray, np.ndarray], float]

_FIELDS = ("state", "goal", "action", "reward", "next_state", "achieved_next", "success")


class BufferNotReady(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    goal: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    achieved_next: np.ndarray
    success: bool

    def __post_init__(self):
        if self.reward not in (0.0, -1.0):
            raise ContractViolation(f"sparse reward must be 0 or -1, got {self.reward}")
        if bool(self.success) != (self.reward == 0.0):
            raise ContractViolation("success flag must agree with reward == 0")
        self.reward = float(self.reward)
        self.success = bool(self.success)


def her_expand(episode: Sequence[Transition], k: int, reward_fn: RewardFn, rng: Rng) -> list[Transition]:
    """Each original transition followed by ``k`` copies relabeled with future achieved goals.

    The relabel goal for step ``t`` is ``episode[u].achieved_next`` with ``u``
    uniform on ``t..T-1``; reward and success are recomputed with ``reward_fn``.
    """
    if len(episode) == 0:
        raise ContractViolation("her_expand needs a non-empty episode")
    if k < 0:
        raise ContractViolation(f"k must be >= 0, got {k}")
    T = len(episode)
    out: list[Transition] = []
    for t, tr in enumerate(episode):
        out.append(tr)
        if k == 0:
            continue
        for u in rng.integers(t, T, size=k):
            goal = episode[u].achieved_next
            r = float(reward_fn(tr.achieved_next, goal))
            out.append(Transition(tr.state, goal, tr.action, r, tr.next_state, tr.achieved_next, r == 0.0))
    return out


@dataclass
class Batch:
    """Struct-of-arrays minibatch; row ``i`` is one transition."""

    state: np.ndarray
    goal: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    achieved_next: np.ndarray
    success: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    def __getitem__(self, i: int) -> Transition:
        return Transition(*(getattr(self, f)[i] for f in _FIELDS[:3]), float(self.reward[i]),
                          self.next_state[i], self.achieved_next[i], bool(self.success[i]))

    def transitions(self) -> list[Transition]:
        return [self[i] for i in range(len(self))]


class ReplayBuffer:
    """Fixed-capacity ring of transitions; once full, each insert replaces the oldest.

    Storage grows geometrically up to ``capacity`` so a large nominal
    capacity costs nothing until it is used.
    """

    def __init__(self, capacity: int = 10**6):
        if capacity < 1:
            raise ContractViolation("capacity must be >= 1")
        self.capacity = int(capacity)
        self.cursor = 0
        self.filled = 0
        self._data: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.filled

    def _allocate(self, tr: Transition, size: int):
        self._data = {}
        for f in _FIELDS:
            value = getattr(tr, f)
            if f == "reward":
                self._data[f] = np.zeros(size)
            elif f == "success":
                self._data[f] = np.zeros(size, dtype=bool)
            else:
                self._data[f] = np.zeros((size, len(value)))

    def _ensure_room(self, needed: int):
        have = len(self._data["reward"])
        if needed <= have or have == self.capacity:
            return
        size = min(self.capacity, max(needed, 2 * have))
        for f, arr in self._data.items():
            grown = np.zeros((size,) + arr.shape[1:], dtype=arr.dtype)
            grown[:have] = arr
            self._data[f] = grown

    def store(self, transitions: Sequence[Transition]) -> None:
        if not transitions:
            return
        if self._data is None:
            self._allocate(transitions[0], min(self.capacity, max(1024, len(transitions))))
        self._ensure_room(min(self.capacity, self.filled + len(transitions)))
        d = self._data
        for tr in transitions:
            i = self.cursor
            d["state"][i] = tr.state
            d["goal"][i] = tr.goal
            d["action"][i] = tr.action
            d["reward"][i] = tr.reward
            d["next_state"][i] = tr.next_state
            d["achieved_next"][i] = tr.achieved_next
            d["success"][i] = tr.success
            self.cursor = (i + 1) % self.capacity
            if self.filled < self.capacity:
                self.filled += 1

    def _gather(self, idx) -> Batch:
        return Batch(**{f: self._data[f][idx] for f in _FIELDS})

    def sample(self, batch_size: int, rng: Rng) -> Batch:
        """``batch_size`` i.i.d. uniform draws (with replacement) over filled slots."""
        if self.filled == 0:
            raise BufferNotReady("cannot sample from an empty replay buffer")
        return self._gather(rng.integers(0, self.filled, size=batch_size))

    def __getitem__(self, slot: int) -> Transition:
        if not 0 <= slot < self.filled:
            raise IndexError(slot)
        return self._gather(np.array([slot]))[0]

    def contents(self) -> Batch:
        """Filled slots in slot order (not insertion order once wrapped)."""
        if self._data is None:
            raise BufferNotReady("buffer is empty")
        return self._gather(np.arange(self.filled))
