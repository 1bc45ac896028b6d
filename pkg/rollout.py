"""
Episode collection and the off-policy training loop shared by both agents.

Agents implement a small protocol (initial_state / act / update / save) so
the same loop drives single-task SAC pretraining and multi-task training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol

import numpy as np

from env import EndovascularEnv, StepInfo
from replay import EpisodeRecord, ReplayBuffer, ReplayWriter
from shutdown_manager import ShutdownManager
from ui import create_step_progress, format_stats

logger = logging.getLogger(__name__)


class Agent(Protocol):
    algo: str

    def initial_state(self) -> Any: ...

    def act(self, obs: np.ndarray, state: Any, task: str, deterministic: bool,
            rng: Optional[np.random.Generator]) -> Any: ...

    def update(self, batch, rng: np.random.Generator) -> Dict[str, float]: ...

    def save(self, path: Path, extra: Optional[dict] = None): ...


@dataclass
class EpisodeResult:
    record: EpisodeRecord
    infos: List[StepInfo]
    initial_pathlength: float
    target_branch: str

    @property
    def success(self) -> bool:
        return bool(self.infos and self.infos[-1].reached)

    @property
    def episode_return(self) -> float:
        return float(self.record.rewards.sum())


def run_episode(env: EndovascularEnv, agent: Optional[Agent], rng: np.random.Generator,
                task: Optional[str] = None, tree_id: Optional[str] = None,
                seed: Optional[int] = None, deterministic: bool = False,
                split: str = "train") -> EpisodeResult:
    """
    Roll out one episode. agent=None takes uniform random actions
    (warm-up exploration).
    """
    options = {}
    if task is not None:
        options['task'] = task
    if tree_id is not None:
        options['tree_id'] = tree_id
    obs, info = env.reset(seed=seed, options=options)
    task_id = info['task']
    state = agent.initial_state() if agent is not None else None
    observations, actions, rewards = [obs], [], []
    terminated = truncated = False
    while not (terminated or truncated):
        if agent is None:
            action = rng.uniform(-1.0, 1.0, size=env.action_space.shape)
        else:
            action, state = agent.act(obs, state, task_id, deterministic, rng)
        obs, reward, terminated, truncated, _ = env.step(action)
        observations.append(obs)
        actions.append(np.asarray(action, dtype=float))
        rewards.append(reward)
    record = EpisodeRecord(
        task=task_id,
        tree_id=info['tree_id'],
        observations=np.array(observations),
        actions=np.array(actions),
        rewards=np.array(rewards),
        terminated=terminated,
        truncated=truncated,
        augment=info['augment'],
        split=split,
    )
    return EpisodeResult(record, list(env.episode_log), info['pathlength'],
                         env.task.target_region.branch)


@dataclass
class LoopConfig:
    steps: int = 20_000
    warmup_steps: int = 1_000
    update_every: int = 8
    updates_per_round: int = 1
    snapshot_every: int = 2_000
    allow_partial: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LoopConfig':
        return cls(**data)


@dataclass
class Snapshot:
    steps: int
    episodes: int
    updates: int
    mean_return: float
    success_rate: float
    losses: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingLog:
    snapshots: List[Snapshot] = field(default_factory=list)
    exploration_steps: int = 0
    episodes: int = 0
    interrupted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'snapshots': [s.to_dict() for s in self.snapshots],
            'exploration_steps': self.exploration_steps,
            'episodes': self.episodes,
            'interrupted': self.interrupted,
        }


def train_agent(agent: Agent, env: EndovascularEnv, buffer: ReplayBuffer, loop: LoopConfig,
                rng: np.random.Generator, writer: Optional[ReplayWriter] = None,
                shutdown: Optional[ShutdownManager] = None,
                on_snapshot: Optional[Callable[[Snapshot], None]] = None,
                start_step: int = 0, description: str = "Training") -> TrainingLog:
    """
    Collect episodes with the current policy, store them, and run agent updates
    every `update_every` environment steps once the buffer holds warm-up data.
    Stops early (between episodes) when the shutdown manager asks.
    """
    log = TrainingLog(exploration_steps=start_step)
    steps = start_step
    pending_updates = 0.0
    recent_returns: List[float] = []
    recent_success: List[bool] = []
    last_losses: Dict[str, float] = {}
    next_snapshot = (steps // loop.snapshot_every + 1) * loop.snapshot_every
    started = time.monotonic()

    with create_step_progress() as progress:
        bar = progress.add_task(description, total=loop.steps, completed=steps, stats="")
        while steps < loop.steps:
            if shutdown is not None and shutdown.shutdown_requested():
                log.interrupted = True
                logger.info("stop requested after %d steps", steps)
                break
            policy = None if steps < loop.warmup_steps else agent
            result = run_episode(env, policy, rng)
            buffer.push_episode(result.record)
            if writer is not None:
                writer.write(result.record)
            length = result.record.length
            steps += length
            log.episodes += 1
            recent_returns.append(result.episode_return)
            recent_success.append(result.success)

            if buffer.transitions >= loop.warmup_steps:
                pending_updates += length * loop.updates_per_round / loop.update_every
                while pending_updates >= 1.0:
                    batch = buffer.sample_sequences(agent.cfg.batch_size, agent.sequence_length, rng,
                                                    allow_partial=loop.allow_partial)
                    last_losses = agent.update(batch, rng)
                    pending_updates -= 1.0

            progress.update(bar, completed=min(steps, loop.steps),
                            stats=format_stats({'R': float(np.mean(recent_returns[-20:])),
                                                'succ': float(np.mean(recent_success[-20:]))}))
            if steps >= next_snapshot or steps >= loop.steps:
                snap = Snapshot(
                    steps=steps,
                    episodes=log.episodes,
                    updates=getattr(agent, 'updates', 0),
                    mean_return=float(np.mean(recent_returns)),
                    success_rate=float(np.mean(recent_success)),
                    losses=dict(last_losses),
                    seconds=time.monotonic() - started,
                )
                log.snapshots.append(snap)
                logger.info("%s: %d steps, return %.3f, success %.2f", description, steps,
                            snap.mean_return, snap.success_rate)
                recent_returns, recent_success = [], []
                next_snapshot += loop.snapshot_every
                if on_snapshot is not None:
                    on_snapshot(snap)
    log.exploration_steps = steps
    return log


def record_episodes(agent: Agent, env: EndovascularEnv, count: int, rng: np.random.Generator,
                    task: Optional[str] = None, writer: Optional[ReplayWriter] = None,
                    description: str = "Recording") -> List[EpisodeRecord]:
    """Roll out the trained stochastic policy `count` times (replay prefill)."""
    records = []
    with create_step_progress() as progress:
        bar = progress.add_task(description, total=count, stats="")
        for _ in range(count):
            result = run_episode(env, agent, rng, task=task)
            records.append(result.record)
            if writer is not None:
                writer.write(result.record)
            progress.advance(bar)
    return records


def train_multi_task(agent: Agent, env: EndovascularEnv, buffer: ReplayBuffer, loop: LoopConfig,
                     rng: np.random.Generator, **kwargs) -> TrainingLog:
    """Multi-task training on a buffer already holding the prefill episodes."""
    missing = [t for t in env.task_ids if t.value not in {ep.task for ep in buffer.snapshot()}]
    if missing:
        logger.warning("prefill buffer has no episodes for %s", [t.value for t in missing])
    return train_agent(agent, env, buffer, loop, rng, **kwargs)
