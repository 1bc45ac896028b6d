"""Shared test helpers, importable from any test module."""

import math
from typing import Dict, List, Optional

import networkx as nx
import numpy as np

from env import StepInfo, TaskId
from evalharness import EpisodeMetrics
from replay import EpisodeRecord
from sac import SacConfig
from tdmpc2 import PlanConfig, TdmpcConfig
from vessel import (
    ArcPosition,
    Attachment,
    Branch,
    ToyAnatomySpec,
    VesselTree,
    generate_toy_anatomy,
)


def make_straight_tree(length: float = 100.0, radius: float = 5.0) -> VesselTree:
    """Single straight tube along +y starting at the origin."""
    n = int(length) + 1
    pts = np.array([[0.0, y, 0.0] for y in np.linspace(0.0, length, n)])
    return VesselTree([Branch('main', pts, np.full(n, radius))])


def make_y_tree() -> VesselTree:
    """Noise-free toy Y: trunk along +y (120 mm), 'left' toward +x, 'right' toward -x."""
    return generate_toy_anatomy(ToyAnatomySpec(radius_noise=0.0), np.random.default_rng(0))


def make_random_tree(rng: np.random.Generator, n_branches: int = 4) -> VesselTree:
    """Straight branches, each attached on a random earlier branch at a random arc."""
    length = float(rng.uniform(20.0, 60.0))
    branches = [Branch('b0', np.array([[0.0, 0.0, 0.0], [0.0, length, 0.0]]), np.array([3.0, 3.0]))]
    for i in range(1, n_branches):
        parent = branches[int(rng.integers(len(branches)))]
        s = float(rng.uniform(0.2, 0.8) * parent.length)
        start = parent.point_at(s)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        child_len = float(rng.uniform(10.0, 40.0))
        pts = np.array([start, start + child_len * direction])
        branches.append(Branch(f'b{i}', pts, np.array([2.0, 2.0]), Attachment(parent.id, s)))
    return VesselTree(branches)


def brute_force_path_length(tree: VesselTree, a: ArcPosition, b: ArcPosition) -> float:
    """Shortest path over a graph holding every centerline vertex, join point and query point."""
    stops: Dict[str, set] = {bid: set(float(s) for s in br.arcs) for bid, br in tree.branches.items()}
    for br in tree.branches.values():
        if br.parent is not None:
            stops[br.parent.branch].add(float(br.parent.s))
    stops[a.branch].add(float(a.s))
    stops[b.branch].add(float(b.s))
    graph = nx.Graph()
    for bid, values in stops.items():
        ordered = sorted(values)
        for s0, s1 in zip(ordered[:-1], ordered[1:]):
            graph.add_edge((bid, s0), (bid, s1), weight=s1 - s0)
    for br in tree.branches.values():
        if br.parent is not None:
            parent = tree.branch(br.parent.branch)
            gap = float(np.linalg.norm(br.positions[0] - parent.point_at(br.parent.s)))
            graph.add_edge((br.id, 0.0), (parent.id, float(br.parent.s)), weight=gap)
    if a == b:
        return 0.0
    return float(nx.shortest_path_length(graph, (a.branch, float(a.s)), (b.branch, float(b.s)),
                                         weight='weight'))


def scan_nearest_distance(tree: VesselTree, p: np.ndarray, step: float = 0.01) -> float:
    """Distance to the centerlines by scanning every segment at `step` mm resolution."""
    best = math.inf
    for br in tree.branches.values():
        for p0, p1 in zip(br.positions[:-1], br.positions[1:]):
            n = max(2, int(np.linalg.norm(p1 - p0) / step) + 1)
            pts = p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)
            best = min(best, float(np.min(np.linalg.norm(pts - p, axis=1))))
    return best


def numerical_grad(f, array: np.ndarray, indices: List[tuple], eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() w.r.t. array entries at `indices` (array perturbed in place)."""
    out = []
    for idx in indices:
        original = array[idx]
        array[idx] = original + eps
        plus = f()
        array[idx] = original - eps
        minus = f()
        array[idx] = original
        out.append((plus - minus) / (2.0 * eps))
    return np.array(out)


def sample_indices(array: np.ndarray, rng: np.random.Generator, count: int = 4) -> List[tuple]:
    flat = rng.choice(array.size, size=min(count, array.size), replace=False)
    return [np.unravel_index(int(i), array.shape) for i in flat]


def make_episode(length: int = 10, task: str = TaskId.A1.value, tree_id: str = "t0",
                 rng: Optional[np.random.Generator] = None, obs_dim: int = 18,
                 terminated: bool = False, split: str = "train") -> EpisodeRecord:
    rng = rng if rng is not None else np.random.default_rng(0)
    return EpisodeRecord(
        task=task,
        tree_id=tree_id,
        observations=rng.uniform(-1.0, 1.0, size=(length + 1, obs_dim)),
        actions=rng.uniform(-1.0, 1.0, size=(length, 4)),
        rewards=rng.normal(scale=0.01, size=length),
        terminated=terminated,
        truncated=not terminated,
        split=split,
    )


def tiny_sac_config(**overrides) -> SacConfig:
    defaults = dict(n_tasks=0, lstm_hidden=6, hidden=(8,), activation='tanh',
                    batch_size=3, seq_len=5, burn_in=2)
    defaults.update(overrides)
    return SacConfig(**defaults)


def tiny_tdmpc_config(**overrides) -> TdmpcConfig:
    defaults = dict(n_tasks=5, task_dim=3, latent_dim=5, lstm_hidden=6, hidden=(8,),
                    activation='tanh', ensemble=3, batch_size=3, burn_in=2,
                    plan=PlanConfig(horizon=2, iterations=2, samples=16, elites=4,
                                    policy_samples=4))
    defaults.update(overrides)
    return TdmpcConfig(**defaults)


def make_metrics(task: str = "A1", seed: int = 0, success: bool = True, force: float = 0.1,
                 time: float = 1.0, tree_id: str = "t0") -> EpisodeMetrics:
    """Hand-built evaluation episode; failed ones carry path ratio 0.5."""
    return EpisodeMetrics(task=task, tree_id=tree_id, seed=seed, success=success, steps=5,
                          procedure_time=time if success else None,
                          path_ratio=None if success else 0.5,
                          force_mean=force, force_max=2 * force, speed_mean=10.0, speed_max=20.0)


def make_step_info(step: int, pathlength: float = 50.0, force: float = 0.0, speed: float = 10.0,
                   reached: bool = False, tip_branch: str = "trunk",
                   insertion: float = 10.0) -> StepInfo:
    return StepInfo(pathlength=pathlength, delta_pathlength=0.0, tip_force=force, tip_speed=speed,
                    reached=reached, step_index=step, tip_branch=tip_branch, insertion_length=insertion)


class ConstantAgent:
    """Agent protocol stub returning one fixed action."""

    algo = 'constant'

    def __init__(self, action):
        self.action = np.asarray(action, dtype=float)

    def initial_state(self):
        return None

    def act(self, obs, state, task, deterministic=False, rng=None):
        return self.action.copy(), state


class StubEnv:
    """
    Minimal stand-in for EndovascularEnv: the episode reaches the target
    after `reach_after` steps of positive first action component, otherwise
    times out at `max_steps`.
    """

    class _Cfg:
        def __init__(self, dt, max_steps):
            self.dt = dt
            self.max_steps = max_steps

    class _Region:
        branch = 'left'

    class _Task:
        target_region = None

    def __init__(self, reach_after: int = 4, max_steps: int = 10, dt: float = 0.135):
        self.cfg = self._Cfg(dt, max_steps)
        self.reach_after = reach_after
        self.anatomies = {'y0': make_y_tree(), 'y1': make_y_tree()}
        self.task = self._Task()
        self.task.target_region = self._Region()
        self.episode_log: List[StepInfo] = []
        self._steps = 0
        self._task_id = TaskId.A2L.value
        self._tree_id = 'y0'

    class _Space:
        shape = (4,)

    action_space = _Space()

    def reset(self, *, seed=None, options=None):
        options = options or {}
        self._task_id = options.get('task', TaskId.A2L.value)
        self._tree_id = options.get('tree_id', 'y0')
        self._steps = 0
        self.episode_log = []
        return np.zeros(18), {'task': self._task_id, 'tree_id': self._tree_id,
                              'pathlength': 100.0, 'augment': None}

    def step(self, action):
        self._steps += 1
        forward = float(action[0]) > 0
        reached = forward and self._steps >= self.reach_after
        pathlength = 100.0 - (25.0 * self._steps if forward else 0.0)
        info = make_step_info(self._steps, pathlength=max(pathlength, 0.0),
                              force=0.1 if forward else 0.0, speed=20.0 if forward else 0.0,
                              reached=reached, tip_branch='left' if forward else 'trunk')
        self.episode_log.append(info)
        truncated = not reached and self._steps >= self.cfg.max_steps
        return np.zeros(18), 0.0, reached, truncated, info.to_dict()
