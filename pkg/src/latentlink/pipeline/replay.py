"""Episode replay with whole-episode eviction and uniform window sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..control_jepa import ExperienceBatch


class NotReady(RuntimeError):
    """Not enough stored data yet; retry after more collection."""


@dataclass
class Episode:
    frames: list = field(default_factory=list)      # uint8 (H, W)
    actions: list = field(default_factory=list)     # action that led into the frame, -1 at reset
    rewards: list = field(default_factory=list)
    terminals: list = field(default_factory=list)   # true termination (not timeout)
    channels: list = field(default_factory=list)    # interleaved real vectors
    positions: list = field(default_factory=list)
    closed: bool = False

    def __len__(self):
        return len(self.frames)

    def arrays(self) -> dict:
        return {
            "frames": np.asarray(self.frames, dtype=np.uint8),
            "actions": np.asarray(self.actions, dtype=np.int64),
            "rewards": np.asarray(self.rewards, dtype=np.float64),
            "terminals": np.asarray(self.terminals, dtype=bool),
            "channels": np.asarray(self.channels, dtype=np.float64),
            "positions": np.asarray(self.positions, dtype=np.float64),
        }


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(frame) * 255.0).astype(np.uint8)


class ReplayBuffer:
    """Ring of episodes holding at most ``capacity`` records.

    A record is one (frame, previous action, reward, terminal, channel)
    tuple; the reset frame of every episode counts as a record. When the
    capacity is exceeded the oldest finished episodes are dropped whole.
    """

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: list[Episode] = []
        self._size = 0
        self._cache: dict = {}

    def __len__(self) -> int:
        return self._size

    @property
    def total_episodes(self) -> int:
        return len(self.episodes)

    def start_episode(self, frame, channel, position) -> None:
        if self.episodes and not self.episodes[-1].closed:
            self.episodes[-1].closed = True
        ep = Episode()
        self.episodes.append(ep)
        self._append(ep, frame, -1, 0.0, False, channel, position)

    def add_step(self, frame, action: int, reward: float, terminal: bool, channel, position,
                 done: bool = False) -> None:
        if not self.episodes or self.episodes[-1].closed:
            raise RuntimeError("start_episode must be called first")
        ep = self.episodes[-1]
        self._append(ep, frame, int(action), float(reward), bool(terminal), channel, position)
        if done:
            ep.closed = True

    def _append(self, ep, frame, action, reward, terminal, channel, position) -> None:
        ep.frames.append(to_uint8(frame))
        ep.actions.append(action)
        ep.rewards.append(reward)
        ep.terminals.append(terminal)
        ep.channels.append(np.asarray(channel, dtype=np.float64))
        ep.positions.append(np.asarray(position, dtype=np.float64)[:2].copy())
        self._size += 1
        self._cache.pop(id(ep), None)
        self._evict()

    def _evict(self) -> None:
        while self._size > self.capacity and len(self.episodes) > 1 and self.episodes[0].closed:
            old = self.episodes.pop(0)
            self._cache.pop(id(old), None)
            self._size -= len(old)

    def episode_arrays(self, i: int) -> dict:
        ep = self.episodes[i]
        key = id(ep)
        hit = self._cache.get(key)
        if hit is None or hit[0] != len(ep):
            hit = (len(ep), ep.arrays())
            self._cache[key] = hit
        return hit[1]

    def window_starts(self, length: int) -> list[tuple[int, int]]:
        """All (episode, start) pairs whose window of ``length`` fits inside one episode."""
        return [(i, s) for i, ep in enumerate(self.episodes) for s in range(len(ep) - length + 1)]

    def sample(self, batch_size: int, length: int, rng: np.random.Generator) -> ExperienceBatch:
        """``batch_size`` windows drawn uniformly over all valid start indices."""
        counts = np.array([max(len(ep) - length + 1, 0) for ep in self.episodes], dtype=np.int64)
        total = int(counts.sum())
        if total == 0:
            raise NotReady(f"no stored episode has {length} steps yet")
        flat = rng.integers(0, total, size=batch_size)
        cum = np.cumsum(counts)
        eps = np.searchsorted(cum, flat, side="right")
        starts = flat - (cum[eps] - counts[eps])
        return self.gather(list(zip(eps.tolist(), starts.tolist())), length)

    def gather(self, windows, length: int) -> ExperienceBatch:
        parts = {k: [] for k in ("frames", "actions", "rewards", "terminals", "channels", "positions")}
        for e, s in windows:
            arr = self.episode_arrays(e)
            for k in parts:
                parts[k].append(arr[k][s:s + length])
        return ExperienceBatch(
            frames=np.stack(parts["frames"]).astype(np.float64) / 255.0,
            actions=np.stack(parts["actions"]),
            rewards=np.stack(parts["rewards"]),
            terminals=np.stack(parts["terminals"]),
            channels=np.stack(parts["channels"]),
            positions=np.stack(parts["positions"]),
        )

    # -- persistence ----------------------------------------------------------------------
    def save(self, path) -> None:
        payload = {"capacity": np.array([self.capacity]), "count": np.array([len(self.episodes)])}
        for i, ep in enumerate(self.episodes):
            for k, v in ep.arrays().items():
                payload[f"{i}.{k}"] = v
            payload[f"{i}.closed"] = np.array([ep.closed])
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            buf = cls(int(data["capacity"][0]))
            for i in range(int(data["count"][0])):
                ep = Episode()
                ep.frames = list(data[f"{i}.frames"])
                ep.actions = data[f"{i}.actions"].tolist()
                ep.rewards = data[f"{i}.rewards"].tolist()
                ep.terminals = data[f"{i}.terminals"].tolist()
                ep.channels = list(data[f"{i}.channels"])
                ep.positions = list(data[f"{i}.positions"])
                ep.closed = bool(data[f"{i}.closed"][0])
                buf.episodes.append(ep)
                buf._size += len(ep)
        return buf
