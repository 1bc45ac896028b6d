"""
World-model agent: recurrent observation embedder, latent dynamics, reward and
value heads, a squashed-Gaussian policy prior, learnable task embeddings, and
a sampling-based planner over imagined latent rollouts.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from approx import (
    Adam,
    NonFiniteError,
    ParamStore,
    RecurrentState,
    Tensor,
    bounded_log_std,
    check_losses,
    concat,
    dense_forward,
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
from env import TaskId
from replay import SequenceBatch

logger = logging.getLogger(__name__)


@dataclass
class PlanConfig:
    horizon: int = 3
    iterations: int = 6
    samples: int = 512
    elites: int = 64
    policy_samples: int = 24
    temperature: float = 0.01
    gamma: float = 0.99
    min_std: float = 0.05
    max_std: float = 2.0
    init_std: float = 2.0

    def validate(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.elites > self.samples + self.policy_samples:
            raise ValueError(f"elites ({self.elites}) exceed the sampled set")
        if self.elites < 1 or self.iterations < 1:
            raise ValueError("elites and iterations must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PlanConfig':
        return cls(**data)


@dataclass
class TdmpcConfig:
    obs_dim: int = 18
    action_dim: int = 4
    n_tasks: int = 5
    task_dim: int = 16
    latent_dim: int = 64
    lstm_hidden: int = 128
    hidden: Tuple[int, ...] = (256, 256)
    activation: str = 'relu'
    ensemble: int = 5
    gamma: float = 0.99
    tau: float = 0.005
    rho: float = 0.5
    lr: float = 3e-4
    entropy_coef: float = 1e-4
    consistency_coef: float = 20.0
    reward_coef: float = 0.1
    value_coef: float = 0.1
    batch_size: int = 32
    burn_in: int = 8
    plan: PlanConfig = None

    def __post_init__(self):
        if self.plan is None:
            self.plan = PlanConfig(gamma=self.gamma)
        elif isinstance(self.plan, dict):
            self.plan = PlanConfig.from_dict(self.plan)

    def validate(self):
        if self.ensemble < 2:
            raise ValueError("ensemble needs at least 2 members")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not (0.0 < self.gamma < 1.0) or not (0.0 < self.tau <= 1.0):
            raise ValueError("gamma must be in (0, 1) and tau in (0, 1]")
        self.plan.validate()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['hidden'] = list(self.hidden)
        data['plan'] = self.plan.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TdmpcConfig':
        data = dict(data)
        if 'hidden' in data:
            data['hidden'] = tuple(data['hidden'])
        return cls(**data)


@dataclass
class PlanResult:
    action: np.ndarray
    mean: np.ndarray            # (H, A)
    std: np.ndarray             # (H, A)
    predicted_return: float


@dataclass
class TdmpcState:
    """Per-episode acting state: embedder memory and the previous plan."""
    recurrent: RecurrentState
    prev_mean: Optional[np.ndarray] = None


def td_target(reward: np.ndarray, done: np.ndarray, q_next: Sequence[np.ndarray], gamma: float) -> np.ndarray:
    """r + γ(1 - done) · min over all ensemble members."""
    return reward + gamma * (1.0 - done) * np.min(np.stack(q_next), axis=0)


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


class WorldModel:
    """TD-MPC2-style agent over the approx toolkit."""

    algo = 'tdmpc2'

    def __init__(self, cfg: TdmpcConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        Z, A, E, H = cfg.latent_dim, cfg.action_dim, cfg.task_dim, cfg.lstm_hidden
        self.model = ParamStore()
        self.model.add('task_emb', rng.uniform(-1.0, 1.0, size=(cfg.n_tasks, E)))
        self.model.lstm('enc.lstm', cfg.obs_dim + E, H, rng)
        self.model.dense('enc.out', H, Z, rng)
        self.model.mlp('dyn.mlp', [Z + A + E, *cfg.hidden, Z], rng)
        self.model.mlp('rew.mlp', [Z + A + E, *cfg.hidden, 1], rng)
        self.q = ParamStore()
        for i in range(cfg.ensemble):
            self.q.mlp(f'q{i}.mlp', [Z + A + E, *cfg.hidden, 1], rng)
        self.q_target = self.q.copy()
        self.policy = ParamStore()
        self.policy.mlp('pi.mlp', [Z + E, *cfg.hidden, 2 * A], rng)

        self.model_opt = Adam(self.model, cfg.lr)
        self.q_opt = Adam(self.q, cfg.lr)
        self.policy_opt = Adam(self.policy, cfg.lr)
        self.updates = 0

    @property
    def layers(self) -> int:
        return len(self.cfg.hidden) + 1

    @property
    def sequence_length(self) -> int:
        return self.cfg.burn_in + self.cfg.plan.horizon

    # ------------------------------------------------------------------
    # Components
    # ------------------------------------------------------------------

    def task_embedding(self, tasks: Sequence[str]) -> Tensor:
        onehot = np.zeros((len(tasks), self.cfg.n_tasks))
        for i, task in enumerate(tasks):
            onehot[i, TaskId(task).index % self.cfg.n_tasks] = 1.0
        return Tensor(onehot) @ self.model['task_emb']

    def _latent(self, h: Tensor) -> Tensor:
        return dense_forward(self.model, 'enc.out', h, 'tanh')

    def embed_step(self, obs: np.ndarray, task_emb: Tensor,
                   state: RecurrentState) -> Tuple[Tensor, RecurrentState]:
        h, state = lstm_step(self.model, 'enc.lstm', concat([Tensor(obs), task_emb], axis=-1), state)
        return self._latent(h), state

    def encode(self, window: np.ndarray, task: str) -> np.ndarray:
        """Latent after feeding an observation window (T, obs_dim) from a zero state."""
        window = np.asarray(window, dtype=float)
        if window.ndim != 2 or len(window) == 0:
            raise ValueError("encode needs a non-empty (T, obs_dim) window")
        with no_grad():
            emb = self.task_embedding([task])
            state = RecurrentState.zeros(1, self.cfg.lstm_hidden)
            for obs in window:
                z, state = self.embed_step(obs[None, :], emb, state)
        return z.data[0]

    def _broadcast_task(self, task, batch: int) -> Tensor:
        if isinstance(task, Tensor):
            return task
        tasks = [task] * batch if isinstance(task, str) else list(task)
        return self.task_embedding(tasks)

    def imagine(self, z, a, task) -> Tuple[Tensor, Tensor]:
        """One latent transition and the predicted reward, batched."""
        z, a = (z if isinstance(z, Tensor) else Tensor(z)), (a if isinstance(a, Tensor) else Tensor(a))
        e = self._broadcast_task(task, z.shape[0])
        x = concat([z, a, e], axis=-1)
        z_next = mlp_forward(self.model, 'dyn.mlp', x, self.layers, self.cfg.activation, 'tanh')
        reward = mlp_forward(self.model, 'rew.mlp', x, self.layers, self.cfg.activation)[:, 0]
        return z_next, reward

    def policy_sample(self, z, task, noise: np.ndarray) -> Tuple[Tensor, Tensor]:
        z = z if isinstance(z, Tensor) else Tensor(z)
        e = self._broadcast_task(task, z.shape[0])
        out = mlp_forward(self.policy, 'pi.mlp', concat([z, e], axis=-1), self.layers, self.cfg.activation)
        A = self.cfg.action_dim
        return squashed_gaussian(out[:, :A], bounded_log_std(out[:, A:]), noise)

    def q_values(self, z, a, task, members: Optional[Sequence[int]] = None,
                 target: bool = False) -> List[Tensor]:
        store = self.q_target if target else self.q
        z, a = (z if isinstance(z, Tensor) else Tensor(z)), (a if isinstance(a, Tensor) else Tensor(a))
        e = self._broadcast_task(task, z.shape[0])
        x = concat([z, a, e], axis=-1)
        members = range(self.cfg.ensemble) if members is None else members
        return [mlp_forward(store, f'q{i}.mlp', x, self.layers, self.cfg.activation)[:, 0] for i in members]

    # ------------------------------------------------------------------
    # Acting
    # ------------------------------------------------------------------

    def initial_state(self) -> TdmpcState:
        return TdmpcState(RecurrentState.zeros(1, self.cfg.lstm_hidden))

    def act(self, obs: np.ndarray, state: TdmpcState, task: str = TaskId.A1.value,
            deterministic: bool = False, rng: Optional[np.random.Generator] = None
            ) -> Tuple[np.ndarray, TdmpcState]:
        rng = rng if rng is not None else np.random.default_rng(0)
        with no_grad():
            z, recurrent = self.embed_step(np.asarray(obs, dtype=float)[None, :],
                                           self.task_embedding([task]), state.recurrent)
        result = plan(self, z.data[0], task, self.cfg.plan, state.prev_mean, rng, deterministic)
        return result.action, TdmpcState(recurrent, result.mean)

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------

    def _embed_sequence(self, batch: SequenceBatch, emb: Tensor) -> List[Tensor]:
        B, T = batch.observations.shape[:2]
        state = RecurrentState.zeros(B, self.cfg.lstm_hidden)
        latents = []
        for t in range(T):
            if t < self.cfg.burn_in:
                with no_grad():
                    z, state = self.embed_step(batch.observations[:, t], emb, state)
            else:
                z, state = self.embed_step(batch.observations[:, t], emb, state)
            latents.append(z)
        return latents

    def sample_noise(self, batch: SequenceBatch, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((batch.size, self.cfg.plan.horizon + 1, self.cfg.action_dim))

    def model_targets(self, batch: SequenceBatch, noise: np.ndarray) -> Dict[str, np.ndarray]:
        """Stop-gradient targets: next-step latents and TD targets over the horizon."""
        H, b = self.cfg.plan.horizon, self.cfg.burn_in
        with no_grad():
            emb = self.task_embedding(batch.tasks)
            latents = self._embed_sequence(batch, emb)
            next_z = np.stack([latents[b + k + 1].data for k in range(H)], axis=1)
            td = np.zeros((batch.size, H))
            for k in range(H):
                z1 = latents[b + k + 1]
                a1, _ = self.policy_sample(z1, emb, noise[:, k + 1])
                q_next = [q.data for q in self.q_values(z1, a1, emb, target=True)]
                td[:, k] = td_target(batch.rewards[:, b + k], batch.dones[:, b + k], q_next, self.cfg.gamma)
        return {'next_z': next_z, 'td': td}

    def model_loss(self, batch: SequenceBatch, targets: Dict[str, np.ndarray]
                   ) -> Tuple[Tensor, Dict[str, Tensor], List[Tensor]]:
        """Joint consistency/reward/value objective over an H-step latent rollout."""
        cfg = self.cfg
        H, b = cfg.plan.horizon, cfg.burn_in
        emb = self.task_embedding(batch.tasks)
        latents = self._embed_sequence(batch, emb)
        z = latents[b]
        rollout = [z]
        consistency = reward = value = Tensor(0.0)
        for k in range(H):
            t = b + k
            m = batch.mask[:, t]
            count = max(float(m.sum()), 1.0)
            weight = cfg.rho ** k / count
            a = batch.actions[:, t]
            z_next, r_hat = self.imagine(z, a, emb)
            err = tsum(square(z_next - targets['next_z'][:, k]), axis=1)
            consistency = consistency + tsum(err * m) * weight
            reward = reward + tsum(square(r_hat - batch.rewards[:, t]) * m) * weight
            for q in self.q_values(z, a, emb):
                value = value + tsum(square(q - targets['td'][:, k]) * m) * (weight / cfg.ensemble)
            z = z_next
            rollout.append(z)
        total = (cfg.consistency_coef * consistency + cfg.reward_coef * reward
                 + cfg.value_coef * value) * (1.0 / H)
        return total, {'consistency': consistency, 'reward': reward, 'value': value}, rollout

    def policy_loss(self, latents: Sequence[np.ndarray], tasks: Sequence[str], mask: np.ndarray,
                    noise: np.ndarray) -> Tensor:
        """Maximise min-ensemble Q minus an entropy penalty on stop-gradient latents."""
        emb = Tensor(self.task_embedding(tasks).data)
        loss = Tensor(0.0)
        norm = 0.0
        for k, z in enumerate(latents):
            m = mask[:, self.cfg.burn_in + min(k, self.cfg.plan.horizon - 1)]
            a, logp = self.policy_sample(Tensor(z), emb, noise[:, k])
            qs = self.q_values(Tensor(z), a, emb)
            q = qs[0]
            for other in qs[1:]:
                q = minimum(q, other)
            weight = self.cfg.rho ** k
            loss = loss + tsum((self.cfg.entropy_coef * logp - q) * m) * weight
            norm += weight * max(float(m.sum()), 1.0)
        return loss * (1.0 / norm)

    def update(self, batch: SequenceBatch, rng: np.random.Generator) -> Dict[str, float]:
        noise = self.sample_noise(batch, rng)
        targets = self.model_targets(batch, noise)

        self.model.zero_grad()
        self.q.zero_grad()
        total, parts, rollout = self.model_loss(batch, targets)
        total.backward()
        self.model_opt.step()
        self.q_opt.step()

        self.policy.zero_grad()
        self.q.zero_grad()
        self.model.zero_grad()
        loss_pi = self.policy_loss([z.data for z in rollout], batch.tasks, batch.mask, noise)
        loss_pi.backward()
        self.policy_opt.step()
        self.q.zero_grad()
        self.model.zero_grad()

        soft_update(self.q_target, self.q, self.cfg.tau)
        self.updates += 1
        losses = {name: t.item() for name, t in parts.items()}
        losses['policy'] = loss_pi.item()
        check_losses(losses, self.stores())
        logger.debug("tdmpc2 update %d: %s", self.updates, losses)
        return losses

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def stores(self) -> Dict[str, ParamStore]:
        return {'model': self.model, 'q': self.q, 'q_target': self.q_target, 'policy': self.policy}

    def optimizers(self) -> Dict[str, Adam]:
        return {'model': self.model_opt, 'q': self.q_opt, 'policy': self.policy_opt}

    def save(self, path: Path, extra: Optional[dict] = None):
        meta = {'algo': self.algo, 'config': self.cfg.to_dict(), 'updates': self.updates}
        meta.update(extra or {})
        save_checkpoint(path, self.stores(), self.optimizers(), meta)

    @classmethod
    def load(cls, path: Path) -> 'WorldModel':
        saved, optim, meta = load_checkpoint(path)
        if meta.get('algo') != cls.algo:
            raise ValueError(f"{path}: checkpoint is for '{meta.get('algo')}', not '{cls.algo}'")
        agent = cls(TdmpcConfig.from_dict(meta['config']), np.random.default_rng(0))
        restore(agent.stores(), agent.optimizers(), saved, optim)
        agent.updates = int(meta.get('updates', 0))
        return agent


# ----------------------------------------------------------------------
# Planning
# ----------------------------------------------------------------------

def evaluate_sequences(model, z: np.ndarray, task: str, actions: np.ndarray, gamma: float,
                       members: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Discounted imagined return of each action sequence (n, H, A) plus a terminal value."""
    n, H, A = actions.shape
    latent = np.repeat(np.asarray(z, dtype=float)[None, :], n, axis=0)
    returns = np.zeros(n)
    discount = 1.0
    with no_grad():
        for t in range(H):
            latent, reward = model.imagine(latent, actions[:, t], task)
            latent = _np(latent)
            returns += discount * _np(reward)
            discount *= gamma
        a_term, _ = model.policy_sample(latent, task, rng.standard_normal((n, A)))
        qs = model.q_values(latent, _np(a_term), task, members=members)
        returns += discount * np.minimum(_np(qs[0]), _np(qs[1]))
    return returns


def plan(model, z: np.ndarray, task: str, cfg: PlanConfig, prev_mean: Optional[np.ndarray],
         rng: np.random.Generator, deterministic: bool = False) -> PlanResult:
    """
    Iterative elite-refit planner.

    Samples Gaussian action sequences around a warm-started mean plus rollouts
    of the policy prior, scores them by imagined return, and refits mean/std
    from the top-K with weights exp((G - max G) / temperature).
    """
    H, A = cfg.horizon, model.cfg.action_dim
    ensemble = model.cfg.ensemble

    prior = np.zeros((cfg.policy_samples, H, A))
    if cfg.policy_samples:
        with no_grad():
            latent = np.repeat(np.asarray(z, dtype=float)[None, :], cfg.policy_samples, axis=0)
            for t in range(H):
                a, _ = model.policy_sample(latent, task, rng.standard_normal((cfg.policy_samples, A)))
                prior[:, t] = np.clip(_np(a), -1.0, 1.0)
                latent, _ = model.imagine(latent, prior[:, t], task)
                latent = _np(latent)

    mean = np.zeros((H, A))
    if prev_mean is not None:
        mean[:-1] = prev_mean[1:]
    std = np.full((H, A), cfg.init_std)

    elite_returns = np.zeros(1)
    weights = np.ones(1)
    for _ in range(cfg.iterations):
        noise = rng.standard_normal((cfg.samples, H, A))
        sampled = np.clip(mean[None] + std[None] * noise, -1.0, 1.0)
        candidates = np.concatenate([sampled, prior], axis=0)
        members = rng.choice(ensemble, size=2, replace=False)
        returns = evaluate_sequences(model, z, task, candidates, cfg.gamma, members, rng)
        if not np.all(np.isfinite(returns)):
            raise NonFiniteError(f"planner produced non-finite returns (task {task}, "
                                 f"{int(np.sum(~np.isfinite(returns)))} of {len(returns)})")
        elite_idx = np.argsort(-returns, kind='stable')[:cfg.elites]
        elite_returns = returns[elite_idx]
        elite_actions = candidates[elite_idx]
        weights = np.exp((elite_returns - elite_returns.max()) / cfg.temperature)
        weights /= weights.sum()
        mean = np.einsum('k,kha->ha', weights, elite_actions)
        std = np.sqrt(np.einsum('k,kha->ha', weights, (elite_actions - mean[None]) ** 2))
        std = np.clip(std, cfg.min_std, cfg.max_std)

    if deterministic:
        action = mean[0]
    else:
        action = mean[0] + std[0] * rng.standard_normal(A)
    return PlanResult(np.clip(action, -1.0, 1.0), mean, std, float(np.dot(weights, elite_returns)))


def act_tdmpc2(model: WorldModel, obs: np.ndarray, state: TdmpcState, task: str,
               deterministic: bool, rng: np.random.Generator) -> Tuple[np.ndarray, TdmpcState]:
    return model.act(obs, state, task, deterministic, rng)


def tdmpc2_update(model: WorldModel, batch: SequenceBatch, rng: np.random.Generator) -> Dict[str, float]:
    return model.update(batch, rng)


def planner_improvement(model: WorldModel, latents: np.ndarray, task: str,
                        rng: np.random.Generator) -> float:
    """
    Fraction of probe latents where the planner's predicted return is at least
    the return of following the policy prior alone.
    """
    cfg = model.cfg.plan
    wins = 0
    for z in latents:
        result = plan(model, z, task, cfg, None, rng, deterministic=True)
        with no_grad():
            latent = np.asarray(z, dtype=float)[None, :]
            prior = np.zeros((1, cfg.horizon, model.cfg.action_dim))
            for t in range(cfg.horizon):
                a, _ = model.policy_sample(latent, task, np.zeros((1, model.cfg.action_dim)))
                prior[:, t] = _np(a)
                latent = _np(model.imagine(latent, prior[:, t], task)[0])
        baseline = evaluate_sequences(model, z, task, prior, cfg.gamma, [0, 1], rng)[0]
        planned = evaluate_sequences(model, z, task, result.mean[None], cfg.gamma, [0, 1], rng)[0]
        wins += planned >= baseline
    return wins / max(len(latents), 1)
