"""Experience replay: a uniform ring buffer and a proportional prioritized variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRIORITY_EPS = 1e-6


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float  # n-step accumulated when ``n_step_accumulated``
    next_obs: np.ndarray
    done: bool
    next_mask: np.ndarray
    discount: float = 1.0  # factor applied to the bootstrap value
    n_step_accumulated: bool = False


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    next_masks: np.ndarray
    discounts: np.ndarray
    weights: np.ndarray
    slots: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored column-wise; sampling is uniform."""

    def __init__(self, capacity: int, obs_size: int, n_actions: int):
        if capacity < 1:
            raise ReplayError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_size))
        self.next_obs = np.zeros((capacity, obs_size))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.next_masks = np.zeros((capacity, n_actions), dtype=bool)
        self.discounts = np.ones(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> int:
        slot = self.cursor
        self.obs[slot] = t.obs
        self.next_obs[slot] = t.next_obs
        self.actions[slot] = t.action
        self.rewards[slot] = t.reward
        self.dones[slot] = t.done
        self.next_masks[slot] = t.next_mask
        self.discounts[slot] = t.discount
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot

    def _gather(self, slots: np.ndarray, weights: np.ndarray) -> Batch:
        return Batch(
            self.obs[slots], self.actions[slots], self.rewards[slots], self.next_obs[slots],
            self.dones[slots], self.next_masks[slots], self.discounts[slots], weights, slots,
        )

    def sample_slots(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ReplayError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.0) -> Batch:
        slots = self.sample_slots(batch_size, rng)
        return self._gather(slots, np.ones(batch_size))

    def update_priorities(self, slots, td_errors) -> None:
        pass


def priority_of(td_error: float, alpha: float = 1.0) -> float:
    """Sampling weight of a transition from its last absolute TD error."""
    return (abs(td_error) + PRIORITY_EPS) ** alpha


class SumTree:
    """Binary tree of partial sums over ``capacity`` leaves, stored in one array."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.leaves = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def __getitem__(self, slot):
        return self.tree[self.leaves + np.asarray(slot)]

    def set(self, slots, values) -> None:
        if np.ndim(slots) == 0:
            self._set_one(int(slots), float(values))
            return
        idx = self.leaves + np.atleast_1d(np.asarray(slots, dtype=np.int64))
        self.tree[idx] = values
        idx = np.unique(idx // 2)
        while idx[0] >= 1:
            self.tree[idx] = self.tree[2 * idx] + self.tree[2 * idx + 1]
            if idx[0] == 1:
                break
            idx = np.unique(idx // 2)

    def _set_one(self, slot: int, value: float) -> None:
        tree = self.tree
        i = self.leaves + slot
        tree[i] = value
        i //= 2
        while i >= 1:
            tree[i] = tree[2 * i] + tree[2 * i + 1]
            i //= 2

    def find(self, targets: np.ndarray) -> np.ndarray:
        """Leaf indices whose cumulative-sum interval contains each target (vectorized descent)."""
        idx = np.ones(len(targets), dtype=np.int64)
        targets = np.array(targets, dtype=np.float64)
        while idx[0] < self.leaves:
            left = 2 * idx
            left_sum = self.tree[left]
            go_right = targets >= left_sum
            targets = np.where(go_right, targets - left_sum, targets)
            idx = np.where(go_right, left + 1, left)
        return idx - self.leaves


class PrioritizedReplayBuffer(ReplayBuffer):
    """Proportional prioritized replay.

    Slot ``i`` is drawn with probability ``p_i**alpha / sum(p**alpha)`` where
    ``p_i`` is its last absolute TD error (plus a small epsilon). New
    transitions enter with the largest priority seen so far.
    """

    def __init__(self, capacity: int, obs_size: int, n_actions: int, alpha: float = 0.6):
        super().__init__(capacity, obs_size, n_actions)
        if alpha < 0:
            raise ReplayError("alpha must be >= 0")
        self.alpha = alpha
        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity)
        self.max_priority = 1.0

    def add(self, t: Transition) -> int:
        slot = super().add(t)
        self.priorities[slot] = self.max_priority
        self.tree.set(slot, self.max_priority**self.alpha)
        return slot

    def set_priority(self, slot, priority) -> None:
        slot = np.atleast_1d(np.asarray(slot, dtype=np.int64))
        priority = np.atleast_1d(np.asarray(priority, dtype=np.float64))
        if not np.all(priority > 0):
            raise ReplayError(f"priorities must be positive, got {priority}")
        self.priorities[slot] = priority
        self.tree.set(slot, priority**self.alpha)
        self.max_priority = max(self.max_priority, float(priority.max()))

    def probabilities(self) -> np.ndarray:
        scaled = self.tree[np.arange(self.size)]
        return scaled / scaled.sum()

    def sample_slots(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ReplayError("cannot sample from an empty buffer")
        total = self.tree.total
        slots = self.tree.find(rng.random(batch_size) * total)
        # float round-off at the right edge can land on an empty leaf
        return np.minimum(slots, self.size - 1)

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.4) -> Batch:
        slots = self.sample_slots(batch_size, rng)
        total = self.tree.total
        probs = self.tree[slots] / total
        p_min = self.tree[np.arange(self.size)].min() / total
        weights = (self.size * probs) ** (-beta) / (self.size * p_min) ** (-beta)
        return self._gather(slots, weights)

    def update_priorities(self, slots, td_errors) -> None:
        self.set_priority(slots, np.abs(np.asarray(td_errors, dtype=np.float64)) + PRIORITY_EPS)


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator, beta: float = 0.4) -> tuple[Batch, np.ndarray, np.ndarray]:
    """Returns ``(transitions, importance weights, slot ids)``."""
    batch = buffer.sample(batch_size, rng, beta)
    return batch, batch.weights, batch.slots
