"""
Episode-preserving replay buffer shared by the recurrent agents.

Episodes are stored whole and evicted oldest-first; sequences for recurrent
training are always drawn from within a single episode. Buffers persist as
JSON Lines ("endonav-replay/1"): a header line, then one episode per line.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, Iterator, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

REPLAY_FORMAT = "endonav-replay/1"
MAX_EPISODE_LENGTH = 200
DEFAULT_CAPACITY = 10_000_000


class ReplayFormatError(ValueError):
    """Episode or replay file content is malformed."""


class ReplayVersionError(ReplayFormatError):
    """Replay file has the wrong magic/version header."""


class InsufficientDataError(RuntimeError):
    """Buffer holds no episode long enough to sample from."""


@dataclass
class EpisodeRecord:
    task: str
    tree_id: str
    observations: np.ndarray    # (T + 1, obs_dim)
    actions: np.ndarray         # (T, action_dim)
    rewards: np.ndarray         # (T,)
    terminated: bool = False
    truncated: bool = False
    augment: Optional[Dict[str, Any]] = None
    split: str = "train"

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)

    @property
    def length(self) -> int:
        return len(self.actions)

    def validate(self):
        T = len(self.actions)
        if T == 0:
            raise ReplayFormatError("episode has zero transitions")
        if T > MAX_EPISODE_LENGTH:
            raise ReplayFormatError(f"episode has {T} transitions, limit is {MAX_EPISODE_LENGTH}")
        if len(self.rewards) != T or len(self.observations) != T + 1:
            raise ReplayFormatError(
                f"inconsistent episode: {len(self.observations)} observations, "
                f"{T} actions, {len(self.rewards)} rewards"
            )
        if self.observations.ndim != 2 or self.actions.ndim != 2 or self.rewards.ndim != 1:
            raise ReplayFormatError("episode arrays have the wrong rank")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'task': self.task,
            'tree_id': self.tree_id,
            'observations': self.observations.tolist(),
            'actions': self.actions.tolist(),
            'rewards': self.rewards.tolist(),
            'terminated': self.terminated,
            'truncated': self.truncated,
            'augment': self.augment,
            'split': self.split,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EpisodeRecord':
        try:
            ep = cls(
                task=data['task'],
                tree_id=data['tree_id'],
                observations=data['observations'],
                actions=data['actions'],
                rewards=data['rewards'],
                terminated=bool(data['terminated']),
                truncated=bool(data['truncated']),
                augment=data.get('augment'),
                split=data.get('split', 'train'),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ReplayFormatError(f"malformed episode entry: {e}") from e
        ep.validate()
        return ep

    def equals(self, other: 'EpisodeRecord') -> bool:
        return (self.task == other.task and self.tree_id == other.tree_id
                and np.array_equal(self.observations, other.observations)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards)
                and self.terminated == other.terminated and self.truncated == other.truncated
                and self.augment == other.augment and self.split == other.split)


@dataclass
class SequenceBatch:
    observations: np.ndarray    # (B, L + 1, obs_dim)
    actions: np.ndarray         # (B, L, action_dim)
    rewards: np.ndarray         # (B, L)
    dones: np.ndarray           # (B, L)
    mask: np.ndarray            # (B, L), 0 on padding
    tasks: List[str]
    episode_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    start: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def size(self) -> int:
        return len(self.tasks)

    @property
    def length(self) -> int:
        return self.actions.shape[1]


class ReplayBuffer:
    """
    FIFO-by-episode replay storage.

    Single writer (the collector), many readers (the trainer); a lock keeps
    reads consistent with concurrent pushes.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: Deque[EpisodeRecord] = deque()
        self.transitions = 0
        self.evicted = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.episodes)

    def push_episode(self, ep: EpisodeRecord):
        ep.validate()
        if ep.length > self.capacity:
            raise ReplayFormatError(f"episode of {ep.length} transitions exceeds capacity {self.capacity}")
        with self._lock:
            self.episodes.append(ep)
            self.transitions += ep.length
            while self.transitions > self.capacity:
                old = self.episodes.popleft()
                self.transitions -= old.length
                self.evicted += 1

    def snapshot(self) -> List[EpisodeRecord]:
        with self._lock:
            return list(self.episodes)

    def sample_sequences(self, batch_size: int, length: int, rng: np.random.Generator,
                         allow_partial: bool = False) -> SequenceBatch:
        """
        Draw batch_size sequences of `length` transitions.

        Episodes are chosen in proportion to their transition count, then a start
        is drawn uniformly. With allow_partial, sequences may run past the episode
        end; the tail is padded and masked out.
        """
        episodes = self.snapshot()
        if allow_partial:
            eligible = list(range(len(episodes)))
        else:
            eligible = [i for i, ep in enumerate(episodes) if ep.length >= length]
        if not eligible:
            raise InsufficientDataError(f"no stored episode has at least {length} transitions")
        weights = np.array([episodes[i].length for i in eligible], dtype=float)
        picks = rng.choice(len(eligible), size=batch_size, p=weights / weights.sum())

        first = episodes[eligible[0]]
        obs_dim, act_dim = first.observations.shape[1], first.actions.shape[1]
        obs = np.zeros((batch_size, length + 1, obs_dim))
        act = np.zeros((batch_size, length, act_dim))
        rew = np.zeros((batch_size, length))
        done = np.zeros((batch_size, length))
        mask = np.zeros((batch_size, length))
        tasks, index, starts = [], np.zeros(batch_size, dtype=int), np.zeros(batch_size, dtype=int)
        for b, pick in enumerate(picks):
            ep = episodes[eligible[pick]]
            T = ep.length
            last_start = T - length if not allow_partial else T - 1
            start = int(rng.integers(0, max(last_start, 0) + 1))
            n = min(length, T - start)
            obs[b, :n + 1] = ep.observations[start:start + n + 1]
            obs[b, n + 1:] = ep.observations[start + n]
            act[b, :n] = ep.actions[start:start + n]
            rew[b, :n] = ep.rewards[start:start + n]
            mask[b, :n] = 1.0
            if ep.terminated and start + n == T:
                done[b, n - 1] = 1.0
            tasks.append(ep.task)
            index[b], starts[b] = eligible[pick], start
        return SequenceBatch(obs, act, rew, done, mask, tasks, index, starts)

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save(self, path: Path):
        path = Path(path)
        temp_file = path.with_name(path.name + '.tmp')
        with ReplayWriter(temp_file, capacity=self.capacity, truncate=True) as writer:
            for ep in self.snapshot():
                writer.write(ep)
        temp_file.replace(path)

    @classmethod
    def load(cls, path: Path, capacity: Optional[int] = None) -> 'ReplayBuffer':
        header, episodes = read_replay(path)
        buf = cls(capacity or int(header.get('capacity', DEFAULT_CAPACITY)))
        for ep in episodes:
            buf.push_episode(ep)
        return buf


def save(buf: ReplayBuffer, path: Path):
    buf.save(path)


def load(path: Path, capacity: Optional[int] = None) -> ReplayBuffer:
    return ReplayBuffer.load(path, capacity)


def push_episode(buf: ReplayBuffer, ep: EpisodeRecord):
    buf.push_episode(ep)


def sample_sequences(buf: ReplayBuffer, batch_size: int, length: int, rng: np.random.Generator,
                     allow_partial: bool = False) -> SequenceBatch:
    return buf.sample_sequences(batch_size, length, rng, allow_partial)


class ReplayWriter:
    """Append episodes to a replay file while they are collected."""

    def __init__(self, path: Path, capacity: int = DEFAULT_CAPACITY, truncate: bool = False):
        self.path = Path(path)
        self.capacity = capacity
        self._lock = threading.Lock()
        fresh = truncate or not self.path.exists() or self.path.stat().st_size == 0
        if not fresh:
            read_header(self.path)
            logger.debug("appending to existing replay file %s", self.path)
        self._file = open(self.path, 'w' if truncate else 'a')
        if fresh:
            self._file.write(json.dumps({'format': REPLAY_FORMAT, 'capacity': capacity}) + "\n")
            self._file.flush()
        self.count = 0

    def write(self, ep: EpisodeRecord):
        ep.validate()
        with self._lock:
            self._file.write(json.dumps(ep.to_dict()) + "\n")
            self._file.flush()
            self.count += 1

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def read_header(path: Path) -> Dict[str, Any]:
    with open(path, 'r') as f:
        first = f.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError:
        header = None
    if not isinstance(header, dict) or header.get('format') != REPLAY_FORMAT:
        raise ReplayVersionError(f"{path}: not an {REPLAY_FORMAT} file")
    return header


def iter_episodes(path: Path) -> Iterator[EpisodeRecord]:
    path = Path(path)
    read_header(path)
    with open(path, 'r') as f:
        f.readline()
        for lineno, line in enumerate(f, start=2):
            if not line.endswith("\n"):
                raise ReplayFormatError(f"{path}:{lineno}: truncated episode record")
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise ReplayFormatError(f"{path}:{lineno}: corrupt episode record ({e})") from e
            yield EpisodeRecord.from_dict(data)


def read_replay(path: Path):
    header = read_header(Path(path))
    return header, list(iter_episodes(path))
