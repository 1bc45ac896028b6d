"""Tests for sac.py: targets, loss gradients, updates and checkpoints."""

import math

import numpy as np
import pytest

from env import EndovascularEnv, EpisodeConfig, TaskId
from evalharness import RUPTURE_THRESHOLD, evaluate
from helpers import make_episode, make_y_tree, numerical_grad, sample_indices, tiny_sac_config
from replay import ReplayBuffer, SequenceBatch
from rollout import LoopConfig
from sac import SacAgent, SacConfig, critic_target, sac_update, task_one_hot, train_single_task


def make_batch(rng, size=3, length=5, reward=None, done=None, tasks=None, obs_dim=18):
    rewards = rng.normal(scale=0.1, size=(size, length)) if reward is None else np.full((size, length), reward)
    dones = np.zeros((size, length)) if done is None else np.full((size, length), done)
    return SequenceBatch(
        observations=rng.uniform(-1.0, 1.0, size=(size, length + 1, obs_dim)),
        actions=rng.uniform(-1.0, 1.0, size=(size, length, 4)),
        rewards=rewards,
        dones=dones,
        mask=np.ones((size, length)),
        tasks=tasks or [TaskId.A1.value] * size,
    )


def store_gradient_check(store, loss_fn, rng, names, rtol=1e-4, atol=1e-7):
    store.zero_grad()
    loss_fn().backward()
    for name in names:
        array = store[name].data
        idx = sample_indices(array, rng, count=3)
        analytic = np.array([store[name].grad[i] for i in idx])
        numeric = numerical_grad(lambda: loss_fn().item(), array, idx)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# Targets and helpers
# ---------------------------------------------------------------------------

class TestCriticTarget:
    def test_soft_bellman(self):
        out = critic_target(np.array([1.0]), np.array([0.0]), np.array([2.0]), np.array([3.0]),
                            np.array([-1.0]), alpha=0.5, gamma=0.9)
        # 1 + 0.9 * (min(2, 3) + 0.5)
        np.testing.assert_allclose(out, [3.25])

    def test_done_removes_bootstrap(self):
        out = critic_target(np.array([0.3, -1.0]), np.ones(2), np.full(2, 50.0), np.full(2, 60.0),
                            np.zeros(2), alpha=0.2, gamma=0.99)
        np.testing.assert_array_equal(out, [0.3, -1.0])

    def test_batch_of_terminal_transitions(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        batch = make_batch(rng, reward=1.0, done=1.0)
        targets = agent.td_targets(batch, agent.sample_noise(batch, rng))
        np.testing.assert_array_equal(targets[:, agent.cfg.burn_in:], 1.0)
        np.testing.assert_array_equal(targets[:, :agent.cfg.burn_in], 0.0)

    def test_task_one_hot(self):
        np.testing.assert_array_equal(task_one_hot(['A1', 'A3R'], 5),
                                      [[1, 0, 0, 0, 0], [0, 0, 0, 0, 1]])
        assert task_one_hot(['A1'], 0).shape == (1, 0)


class TestConfig:
    def test_burn_in_shorter_than_sequence(self):
        with pytest.raises(ValueError, match="burn_in"):
            SacConfig(seq_len=8, burn_in=8).validate()

    def test_gamma_range(self):
        with pytest.raises(ValueError, match="gamma"):
            SacConfig(gamma=1.0).validate()

    def test_dict_roundtrip(self):
        cfg = tiny_sac_config(n_tasks=5)
        assert SacConfig.from_dict(cfg.to_dict()) == cfg

    def test_input_dim(self):
        assert SacConfig(n_tasks=5).input_dim == 23


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

class TestGradients:
    def test_critic_loss_gradient(self, rng):
        agent = SacAgent(tiny_sac_config(burn_in=0), rng)
        batch = make_batch(rng)
        noise = agent.sample_noise(batch, rng)
        store_gradient_check(agent.critic, lambda: agent.critic_loss(batch, noise), rng,
                             ['q1.lstm.Wx', 'q1.lstm.Wh', 'q2.mlp.0.W', 'q2.mlp.1.b'])

    def test_actor_loss_gradient(self, rng):
        agent = SacAgent(tiny_sac_config(burn_in=0), rng)
        batch = make_batch(rng)
        noise = agent.sample_noise(batch, rng)
        store_gradient_check(agent.actor, lambda: agent.actor_loss(batch, noise)[0], rng,
                             ['actor.lstm.Wx', 'actor.lstm.b', 'actor.mlp.0.W', 'actor.mlp.1.W'])

    def test_multi_task_gradient(self, rng):
        agent = SacAgent(tiny_sac_config(burn_in=0, n_tasks=5), rng)
        batch = make_batch(rng, tasks=['A1', 'A2L', 'A3R'])
        noise = agent.sample_noise(batch, rng)
        store_gradient_check(agent.critic, lambda: agent.critic_loss(batch, noise), rng, ['q1.lstm.Wx'])

    def test_masked_steps_ignored(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        batch = make_batch(rng)
        noise = agent.sample_noise(batch, rng)
        batch.mask[:, -1] = 0.0
        before = agent.critic_loss(batch, noise).item()
        batch.rewards[:, -1] += 100.0
        assert agent.critic_loss(batch, noise).item() == pytest.approx(before)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

class TestUpdate:
    def test_losses_finite(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        losses = sac_update(agent, make_batch(rng), rng)
        assert set(losses) == {'critic', 'actor', 'alpha'}
        assert all(math.isfinite(v) for v in losses.values())
        assert agent.updates == 1

    def test_target_moves_toward_critic(self, rng):
        agent = SacAgent(tiny_sac_config(tau=0.5), rng)
        before = agent.critic_target['q1.mlp.0.W'].data.copy()
        agent.update(make_batch(rng), rng)
        expected = 0.5 * before + 0.5 * agent.critic['q1.mlp.0.W'].data
        np.testing.assert_allclose(agent.critic_target['q1.mlp.0.W'].data, expected)

    def test_alpha_falls_when_entropy_is_high(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        mask = np.ones((3, 5))
        log_probs = np.full((3, 3), -10.0)    # entropy 10 > target -4
        before = agent.alpha
        agent.alpha_store.zero_grad()
        agent.alpha_loss(log_probs, mask).backward()
        assert float(agent.alpha_store['log_alpha'].grad) == pytest.approx(14.0)
        agent.alpha_opt.step()
        assert agent.alpha < before

    def test_alpha_rises_when_entropy_is_low(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        before = agent.alpha
        agent.alpha_store.zero_grad()
        agent.alpha_loss(np.full((3, 3), 10.0), np.ones((3, 5))).backward()
        agent.alpha_opt.step()
        assert agent.alpha > before

    def test_terminal_regression_reduces_critic_loss(self, rng):
        agent = SacAgent(tiny_sac_config(lr=1e-2), rng)
        batch = make_batch(rng, reward=0.0, done=1.0)
        noise = agent.sample_noise(batch, rng)
        initial = agent.critic_loss(batch, noise).item()
        for _ in range(100):
            agent.update(batch, rng)
        assert agent.critic_loss(batch, noise).item() < initial


# ---------------------------------------------------------------------------
# Acting and persistence
# ---------------------------------------------------------------------------

class TestActing:
    def test_action_bounds_and_state(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        state = agent.initial_state()
        for _ in range(5):
            action, state = agent.act(rng.uniform(-1, 1, 18), state, 'A1', rng=rng)
            assert action.shape == (4,)
            assert np.all(np.abs(action) <= 1.0)
        assert state.hidden.shape == (1, agent.cfg.lstm_hidden)

    def test_deterministic_is_repeatable(self, rng):
        agent = SacAgent(tiny_sac_config(), rng)
        obs = rng.uniform(-1, 1, size=(4, 18))
        np.testing.assert_array_equal(agent.policy_mean(obs, 'A1'), agent.policy_mean(obs, 'A1'))

    def test_save_load(self, tmp_path, rng):
        agent = SacAgent(tiny_sac_config(n_tasks=5), rng)
        agent.update(make_batch(rng, tasks=['A1', 'A2L', 'A2R']), rng)
        path = tmp_path / "sac.npz"
        agent.save(path, extra={'task': 'A1'})
        loaded = SacAgent.load(path)
        obs = rng.uniform(-1, 1, size=(3, 18))
        np.testing.assert_array_equal(loaded.policy_mean(obs, 'A2L'), agent.policy_mean(obs, 'A2L'))
        assert loaded.updates == 1
        assert loaded.alpha == pytest.approx(agent.alpha)
        assert loaded.cfg == agent.cfg


class TestSingleTaskTraining:
    def test_short_run_records_episodes(self, rng):
        loop = LoopConfig(warmup_steps=20, update_every=20, snapshot_every=1000)
        agent, records = train_single_task(
            TaskId.A2L, {'y': make_y_tree()}, steps=40, cfg=tiny_sac_config(), rng=rng,
            episode_cfg=EpisodeConfig(max_steps=10), loop=loop, record=3,
        )
        assert len(records) == 3
        assert all(r.task == TaskId.A2L.value for r in records)
        assert agent.updates > 0

    def test_replay_of_recorded_episodes(self, rng):
        buf = ReplayBuffer()
        for _ in range(3):
            buf.push_episode(make_episode(8, rng=rng))
        agent = SacAgent(tiny_sac_config(), rng)
        batch = buf.sample_sequences(agent.cfg.batch_size, agent.sequence_length, rng)
        assert math.isfinite(agent.update(batch, rng)['critic'])


@pytest.mark.slow
@pytest.mark.timeout(0)
class TestLearnability:
    def test_single_task_on_toy_anatomy(self, rng):
        tree = make_y_tree()
        cfg = SacConfig(lstm_hidden=64, hidden=(64, 64))
        loop = LoopConfig(warmup_steps=2_000, snapshot_every=20_000)
        agent, _ = train_single_task(TaskId.A2L, {'y': tree}, steps=200_000, cfg=cfg, rng=rng,
                                     loop=loop, record=0)
        env = EndovascularEnv({'y': tree}, task_ids=[TaskId.A2L])
        report = evaluate(agent, env, ['A2L'], ['y'], episodes=100, seed=1, model='sac')
        assert report.cell('A2L', 'sac').success_rate >= 90.0
        assert all(ep.force_mean < RUPTURE_THRESHOLD for ep in report.episodes['sac'])
