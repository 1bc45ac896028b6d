"""Tests for rollout.py: episode collection and the shared training loop."""

from types import SimpleNamespace

import numpy as np
import pytest

from helpers import ConstantAgent, StubEnv
from replay import ReplayBuffer, ReplayWriter, iter_episodes
from rollout import LoopConfig, TrainingLog, record_episodes, run_episode, train_agent
from shutdown_manager import ShutdownManager

FORWARD = [1.0, 0.0, 0.0, 0.0]


class CountingAgent(ConstantAgent):
    """Constant policy that counts the batches it is asked to learn from."""

    def __init__(self, action=FORWARD):
        super().__init__(action)
        self.cfg = SimpleNamespace(batch_size=2)
        self.sequence_length = 3
        self.updates = 0
        self.batch_shapes = []

    def update(self, batch, rng):
        self.updates += 1
        self.batch_shapes.append(batch.actions.shape)
        return {'loss': 1.0 / self.updates}


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

class TestRunEpisode:
    def test_reaching_episode(self, rng):
        result = run_episode(StubEnv(reach_after=4), ConstantAgent(FORWARD), rng)
        assert result.success
        assert result.record.length == 4
        assert result.record.terminated and not result.record.truncated
        assert result.initial_pathlength == 100.0
        assert result.target_branch == 'left'
        assert len(result.infos) == 4
        assert result.episode_return == 0.0

    def test_timeout_episode(self, rng):
        result = run_episode(StubEnv(max_steps=6), ConstantAgent(np.zeros(4)), rng)
        assert not result.success
        assert result.record.truncated
        assert result.record.observations.shape == (7, 18)

    def test_random_actions_without_agent(self, rng):
        result = run_episode(StubEnv(), None, rng)
        assert np.all(np.abs(result.record.actions) <= 1.0)

    def test_task_and_tree_options(self, rng):
        result = run_episode(StubEnv(), ConstantAgent(FORWARD), rng, task='A1', tree_id='y1', split='eval')
        assert result.record.task == 'A1'
        assert result.record.tree_id == 'y1'
        assert result.record.split == 'eval'

    def test_record_episodes_to_file(self, tmp_path, rng):
        path = tmp_path / "prefill.jsonl"
        with ReplayWriter(path) as writer:
            records = record_episodes(ConstantAgent(FORWARD), StubEnv(), 3, rng, writer=writer)
        assert len(records) == 3
        assert [ep.length for ep in iter_episodes(path)] == [4, 4, 4]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TestTrainAgent:
    def test_updates_after_warmup(self, rng):
        agent, buffer = CountingAgent(), ReplayBuffer()
        loop = LoopConfig(steps=40, warmup_steps=8, update_every=4, snapshot_every=16)
        log = train_agent(agent, StubEnv(), buffer, loop, rng)
        assert log.exploration_steps >= 40
        assert log.episodes == len(buffer)
        assert buffer.transitions == log.exploration_steps
        assert agent.updates > 0
        assert all(shape == (2, 3, 4) for shape in agent.batch_shapes)
        assert log.snapshots[-1].steps == log.exploration_steps
        assert log.snapshots[-1].losses == {'loss': pytest.approx(1.0 / agent.updates)}

    def test_update_ratio(self, rng):
        agent = CountingAgent()
        loop = LoopConfig(steps=40, warmup_steps=0, update_every=4, updates_per_round=2)
        train_agent(agent, StubEnv(reach_after=4), ReplayBuffer(), loop, rng)
        # 10 episodes of 4 steps, two updates per 4 steps
        assert agent.updates == 20

    def test_snapshot_callback(self, rng):
        seen = []
        loop = LoopConfig(steps=24, warmup_steps=0, update_every=4, snapshot_every=8)
        log = train_agent(CountingAgent(), StubEnv(), ReplayBuffer(), loop, rng, on_snapshot=seen.append)
        assert [s.steps for s in seen] == [8, 16, 24]
        assert seen == log.snapshots

    def test_resume_from_step(self, rng):
        loop = LoopConfig(steps=20, warmup_steps=0, update_every=4, snapshot_every=100)
        log = train_agent(CountingAgent(), StubEnv(), ReplayBuffer(), loop, rng, start_step=12)
        assert log.episodes == 2
        assert log.exploration_steps == 20

    def test_stops_on_shutdown_request(self, rng):
        shutdown = ShutdownManager()
        shutdown.request_shutdown("test")
        loop = LoopConfig(steps=40, warmup_steps=0)
        log = train_agent(CountingAgent(), StubEnv(), ReplayBuffer(), loop, rng, shutdown=shutdown)
        assert log.interrupted
        assert log.episodes == 0
        assert log.exploration_steps == 0


class TestLoopConfig:
    def test_dict_roundtrip(self):
        loop = LoopConfig(steps=100, warmup_steps=10, update_every=2, snapshot_every=50)
        assert LoopConfig.from_dict(loop.to_dict()) == loop

    def test_log_dict(self):
        data = TrainingLog(exploration_steps=5, episodes=1).to_dict()
        assert data == {'snapshots': [], 'exploration_steps': 5, 'episodes': 1, 'interrupted': False}
