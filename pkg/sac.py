"""
Recurrent Soft Actor-Critic (single-task and multi-task).

Actor and both critics each own an LSTM over the observation stream followed
by feedforward layers. Multi-task agents append a task one-hot to every
observation. Updates run on replay sequences with an 8-step burn-in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from approx import (
    Adam,
    ParamStore,
    RecurrentState,
    Tensor,
    bounded_log_std,
    check_losses,
    concat,
    load_checkpoint,
    lstm_step,
    minimum,
    mlp_forward,
    no_grad,
    restore,
    save_checkpoint,
    soft_update,
    squashed_gaussian,
    square,
    tsum,
)
from env import EndovascularEnv, EpisodeConfig, TaskId
from replay import EpisodeRecord, ReplayBuffer, ReplayWriter, SequenceBatch
from rollout import LoopConfig, record_episodes, train_agent
from shutdown_manager import ShutdownManager
from vessel import VesselTree

logger = logging.getLogger(__name__)


@dataclass
class SacConfig:
    obs_dim: int = 18
    action_dim: int = 4
    n_tasks: int = 0            # 0 = single-task (no one-hot)
    lstm_hidden: int = 128
    hidden: Tuple[int, ...] = (256, 256)
    activation: str = 'relu'
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    target_entropy: float = -4.0
    batch_size: int = 32
    seq_len: int = 32
    burn_in: int = 8
    init_alpha: float = 0.1

    def validate(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.burn_in >= self.seq_len:
            raise ValueError("burn_in must be shorter than seq_len")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be > 0")

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_tasks

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SacConfig':
        data = dict(data)
        if 'hidden' in data:
            data['hidden'] = tuple(data['hidden'])
        return cls(**data)


def critic_target(reward: np.ndarray, done: np.ndarray, q1_next: np.ndarray, q2_next: np.ndarray,
                  log_prob_next: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Soft Bellman target; done removes the bootstrap term entirely."""
    soft_value = np.minimum(q1_next, q2_next) - alpha * log_prob_next
    return reward + gamma * (1.0 - done) * soft_value


def task_one_hot(tasks: Sequence[str], n_tasks: int) -> np.ndarray:
    out = np.zeros((len(tasks), n_tasks))
    if n_tasks:
        for i, task in enumerate(tasks):
            out[i, TaskId(task).index] = 1.0
    return out


class SacAgent:
    """Recurrent SAC agent. Acting state is the actor LSTM state."""

    algo = 'sac'

    def __init__(self, cfg: SacConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        H, A = cfg.lstm_hidden, cfg.action_dim
        self.actor = ParamStore()
        self.actor.lstm('actor.lstm', cfg.input_dim, H, rng)
        self.actor.mlp('actor.mlp', [H, *cfg.hidden, 2 * A], rng)
        self.critic = ParamStore()
        for q in ('q1', 'q2'):
            self.critic.lstm(f'{q}.lstm', cfg.input_dim, H, rng)
            self.critic.mlp(f'{q}.mlp', [H + A, *cfg.hidden, 1], rng)
        self.critic_target = self.critic.copy()
        self.alpha_store = ParamStore()
        self.alpha_store.add('log_alpha', np.array(math.log(cfg.init_alpha)))

        self.actor_opt = Adam(self.actor, cfg.lr)
        self.critic_opt = Adam(self.critic, cfg.lr)
        self.alpha_opt = Adam(self.alpha_store, cfg.lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(math.exp(self.alpha_store['log_alpha'].data))

    @property
    def layers(self) -> int:
        return len(self.cfg.hidden) + 1

    @property
    def sequence_length(self) -> int:
        return self.cfg.seq_len

    # ------------------------------------------------------------------
    # Acting
    # ------------------------------------------------------------------

    def initial_state(self) -> RecurrentState:
        return RecurrentState.zeros(1, self.cfg.lstm_hidden)

    def _inputs(self, obs: np.ndarray, tasks: Sequence[str]) -> np.ndarray:
        """obs (B, T, obs_dim) -> (B, T, input_dim) with task one-hots appended."""
        onehot = task_one_hot(tasks, self.cfg.n_tasks)
        onehot = np.repeat(onehot[:, None, :], obs.shape[1], axis=1)
        return np.concatenate([obs, onehot], axis=-1)

    def _policy(self, h: Tensor) -> Tuple[Tensor, Tensor]:
        out = mlp_forward(self.actor, 'actor.mlp', h, self.layers, self.cfg.activation)
        A = self.cfg.action_dim
        return out[:, :A], bounded_log_std(out[:, A:])

    def act(self, obs: np.ndarray, state: RecurrentState, task: str = TaskId.A1.value,
            deterministic: bool = False, rng: Optional[np.random.Generator] = None
            ) -> Tuple[np.ndarray, RecurrentState]:
        x = self._inputs(np.asarray(obs, dtype=float).reshape(1, 1, -1), [task])[:, 0]
        with no_grad():
            h, state = lstm_step(self.actor, 'actor.lstm', x, state)
            mean_, log_std = self._policy(h)
            if deterministic:
                action = np.tanh(mean_.data[0])
            else:
                noise = rng.standard_normal(self.cfg.action_dim)
                action = np.tanh(mean_.data[0] + np.exp(log_std.data[0]) * noise)
        return np.clip(action, -1.0, 1.0), state

    def policy_mean(self, obs_seq: np.ndarray, task: str) -> np.ndarray:
        """Deterministic actions along an observation sequence from a zero state."""
        state = self.initial_state()
        actions = []
        for obs in obs_seq:
            a, state = self.act(obs, state, task, deterministic=True)
            actions.append(a)
        return np.array(actions)

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------

    def _unroll(self, store: ParamStore, name: str, inputs: np.ndarray) -> List[Tensor]:
        """Hidden output per step; burn-in steps carry state but no gradient."""
        B, T, _ = inputs.shape
        state = RecurrentState.zeros(B, self.cfg.lstm_hidden)
        outs = []
        for t in range(T):
            if t < self.cfg.burn_in:
                with no_grad():
                    h, state = lstm_step(store, name, inputs[:, t], state)
            else:
                h, state = lstm_step(store, name, inputs[:, t], state)
            outs.append(h)
        return outs

    def _q(self, store: ParamStore, q: str, h: Tensor, a) -> Tensor:
        out = mlp_forward(store, f'{q}.mlp', concat([h, a], axis=-1), self.layers, self.cfg.activation)
        return out[:, 0]

    def sample_noise(self, batch: SequenceBatch, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((batch.size, batch.length + 1, self.cfg.action_dim))

    def _window(self, batch: SequenceBatch):
        return range(self.cfg.burn_in, batch.length)

    def _masked_mean(self, terms: List[Tensor], mask: np.ndarray) -> Tensor:
        count = max(float(mask[:, self.cfg.burn_in:].sum()), 1.0)
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total * (1.0 / count)

    def td_targets(self, batch: SequenceBatch, noise: np.ndarray) -> np.ndarray:
        """Critic targets (B, L); columns before the burn-in end are zero."""
        inputs = self._inputs(batch.observations, batch.tasks)
        targets = np.zeros_like(batch.rewards)
        with no_grad():
            h_pi = self._unroll(self.actor, 'actor.lstm', inputs)
            h_q1 = self._unroll(self.critic_target, 'q1.lstm', inputs)
            h_q2 = self._unroll(self.critic_target, 'q2.lstm', inputs)
            for t in self._window(batch):
                mean_, log_std = self._policy(h_pi[t + 1])
                a_next, logp_next = squashed_gaussian(mean_, log_std, noise[:, t + 1])
                q1 = self._q(self.critic_target, 'q1', h_q1[t + 1], a_next).data
                q2 = self._q(self.critic_target, 'q2', h_q2[t + 1], a_next).data
                targets[:, t] = critic_target(batch.rewards[:, t], batch.dones[:, t], q1, q2,
                                              logp_next.data, self.alpha, self.cfg.gamma)
        return targets

    def critic_loss(self, batch: SequenceBatch, noise: np.ndarray) -> Tensor:
        targets = self.td_targets(batch, noise)
        inputs = self._inputs(batch.observations, batch.tasks)
        h_q1 = self._unroll(self.critic, 'q1.lstm', inputs)
        h_q2 = self._unroll(self.critic, 'q2.lstm', inputs)
        terms = []
        for t in self._window(batch):
            a = batch.actions[:, t]
            m = batch.mask[:, t]
            e1 = square(self._q(self.critic, 'q1', h_q1[t], a) - targets[:, t])
            e2 = square(self._q(self.critic, 'q2', h_q2[t], a) - targets[:, t])
            terms.append(tsum((e1 + e2) * m))
        return self._masked_mean(terms, batch.mask)

    def actor_loss(self, batch: SequenceBatch, noise: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Returns the loss and the sampled log-probabilities (B, window)."""
        inputs = self._inputs(batch.observations, batch.tasks)
        h_pi = self._unroll(self.actor, 'actor.lstm', inputs)
        with no_grad():
            h_q1 = self._unroll(self.critic, 'q1.lstm', inputs)
            h_q2 = self._unroll(self.critic, 'q2.lstm', inputs)
        alpha = self.alpha
        terms, log_probs = [], []
        for t in self._window(batch):
            mean_, log_std = self._policy(h_pi[t])
            a, logp = squashed_gaussian(mean_, log_std, noise[:, t])
            q = minimum(self._q(self.critic, 'q1', h_q1[t].detach(), a),
                        self._q(self.critic, 'q2', h_q2[t].detach(), a))
            terms.append(tsum((alpha * logp - q) * batch.mask[:, t]))
            log_probs.append(logp.data)
        return self._masked_mean(terms, batch.mask), np.stack(log_probs, axis=1)

    def alpha_loss(self, log_probs: np.ndarray, mask: np.ndarray) -> Tensor:
        """Gradient w.r.t. log_alpha is (measured entropy - target entropy)."""
        window = mask[:, self.cfg.burn_in:]
        entropy = float(-(log_probs * window).sum() / max(window.sum(), 1.0))
        return self.alpha_store['log_alpha'] * (entropy - self.cfg.target_entropy)

    # ------------------------------------------------------------------
    # Update
    # ------------------------------------------------------------------

    def update(self, batch: SequenceBatch, rng: np.random.Generator) -> Dict[str, float]:
        noise = self.sample_noise(batch, rng)

        self.critic.zero_grad()
        loss_q = self.critic_loss(batch, noise)
        loss_q.backward()
        self.critic_opt.step()

        self.actor.zero_grad()
        self.critic.zero_grad()
        loss_pi, log_probs = self.actor_loss(batch, noise)
        loss_pi.backward()
        self.actor_opt.step()
        self.critic.zero_grad()

        self.alpha_store.zero_grad()
        loss_alpha = self.alpha_loss(log_probs, batch.mask)
        loss_alpha.backward()
        self.alpha_opt.step()

        soft_update(self.critic_target, self.critic, self.cfg.tau)
        self.updates += 1
        losses = {'critic': loss_q.item(), 'actor': loss_pi.item(), 'alpha': loss_alpha.item()}
        check_losses(losses, self.stores())
        logger.debug("sac update %d: %s", self.updates, losses)
        return losses

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def stores(self) -> Dict[str, ParamStore]:
        return {'actor': self.actor, 'critic': self.critic,
                'critic_target': self.critic_target, 'alpha': self.alpha_store}

    def optimizers(self) -> Dict[str, Adam]:
        return {'actor': self.actor_opt, 'critic': self.critic_opt, 'alpha': self.alpha_opt}

    def save(self, path: Path, extra: Optional[dict] = None):
        meta = {'algo': self.algo, 'config': self.cfg.to_dict(), 'updates': self.updates}
        meta.update(extra or {})
        save_checkpoint(path, self.stores(), self.optimizers(), meta)

    @classmethod
    def load(cls, path: Path) -> 'SacAgent':
        saved, optim, meta = load_checkpoint(path)
        if meta.get('algo') != cls.algo:
            raise ValueError(f"{path}: checkpoint is for '{meta.get('algo')}', not '{cls.algo}'")
        agent = cls(SacConfig.from_dict(meta['config']), np.random.default_rng(0))
        restore(agent.stores(), agent.optimizers(), saved, optim)
        agent.updates = int(meta.get('updates', 0))
        return agent


def sac_update(agent: SacAgent, batch: SequenceBatch, rng: np.random.Generator) -> Dict[str, float]:
    return agent.update(batch, rng)


def train_single_task(task: TaskId, trees: Dict[str, VesselTree], steps: int, cfg: SacConfig,
                      rng: np.random.Generator, episode_cfg: Optional[EpisodeConfig] = None,
                      loop: Optional[LoopConfig] = None, record: int = 250,
                      writer: Optional[ReplayWriter] = None,
                      shutdown: Optional[ShutdownManager] = None) -> Tuple[SacAgent, List[EpisodeRecord]]:
    """
    Train a single-task agent on `trees`, then roll out its stochastic policy
    `record` times; those episodes seed the shared multi-task buffer.
    """
    loop = LoopConfig(**{**(loop or LoopConfig()).to_dict(), 'steps': steps})
    env = EndovascularEnv(trees, episode_cfg, task_ids=[TaskId(task)])
    env.reset(seed=int(rng.integers(2**31)))
    agent = SacAgent(cfg, rng)
    train_agent(agent, env, ReplayBuffer(), loop, rng, shutdown=shutdown,
                description=f"SAC {TaskId(task).value}")
    records = record_episodes(agent, env, record, rng, writer=writer,
                              description=f"Prefill {TaskId(task).value}")
    return agent, records
