"""
Multi-task navigation environment.

Wraps the device simulator in a gymnasium Env: task definitions, per-episode
augmentation, fluoroscopy-style 2D observations, progress reward and
termination.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from devicesim import (
    CONTROL_DT,
    MAX_ROTATION_SPEED,
    MAX_TRANSLATION_SPEED,
    DeviceParams,
    SimState,
    default_catheter,
    default_guidewire,
    reset_devices,
    sim_step,
    tip_force_norm,
)
from vessel import ArcPosition, AugmentParams, Region, VesselTree

logger = logging.getLogger(__name__)

OBS_DIM = 18
ACTION_DIM = 4
STEP_PENALTY = 0.00015
PROGRESS_WEIGHT = 0.001
ACTION_SCALE = np.array([MAX_TRANSLATION_SPEED, MAX_ROTATION_SPEED,
                         MAX_TRANSLATION_SPEED, MAX_ROTATION_SPEED])


class LifecycleError(RuntimeError):
    """Environment stepped outside an active episode."""


class ResetError(RuntimeError):
    """Task regions cannot be realised on the episode anatomy."""


class NormalizationError(ValueError):
    """Projected bounding box is degenerate."""


class TaskId(str, Enum):
    A1 = "A1"
    A2L = "A2L"
    A2R = "A2R"
    A3L = "A3L"
    A3R = "A3R"

    @property
    def index(self) -> int:
        return list(TaskId).index(self)


ALL_TASKS = list(TaskId)


@dataclass(frozen=True)
class TaskSpec:
    id: TaskId
    start_region: Region
    target_region: Region
    # +1 points the initial heading along increasing arc, -1 against it
    heading_sign: float = 1.0


@dataclass
class EpisodeConfig:
    max_steps: int = 200
    success_radius: float = 5.0
    augment: bool = False
    dt: float = CONTROL_DT

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EpisodeConfig':
        return cls(**data)


@dataclass
class Observation:
    tracking_now: np.ndarray    # (3, 2)
    tracking_prev: np.ndarray   # (3, 2)
    target: np.ndarray          # (2,)
    prev_action: np.ndarray     # (4,)

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.tracking_now.ravel(), self.tracking_prev.ravel(),
            self.target, self.prev_action,
        ]).astype(float)


@dataclass
class StepInfo:
    pathlength: float
    delta_pathlength: float
    tip_force: float
    tip_speed: float
    reached: bool
    step_index: int
    tip_branch: str = ""
    insertion_length: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ----------------------------------------------------------------------
# Reward, projection, normalization
# ----------------------------------------------------------------------

def compute_reward(delta_pathlength: float, reached: bool) -> float:
    """Step penalty, progress term along the centerline and the success bonus."""
    return -STEP_PENALTY - PROGRESS_WEIGHT * delta_pathlength + (1.0 if reached else 0.0)


def project_fluoro(p: Sequence[float]) -> np.ndarray:
    """Anterior-posterior orthographic projection: drop the depth axis."""
    p = np.asarray(p, dtype=float)
    return p[..., :2].copy()


def _projected_box(tree: VesselTree) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = tree.bounding_box
    lo2, hi2 = lo[:2], hi[:2]
    if np.any(hi2 - lo2 <= 0) or not np.all(np.isfinite(hi2 - lo2)):
        raise NormalizationError(f"degenerate projected bounding box {lo2.tolist()} .. {hi2.tolist()}")
    return lo2, hi2


def normalize_obs(p2: Sequence[float], tree: VesselTree) -> np.ndarray:
    lo, hi = _projected_box(tree)
    scaled = 2.0 * (np.asarray(p2, dtype=float) - lo) / (hi - lo) - 1.0
    return np.clip(scaled, -1.0, 1.0)


def denormalize_obs(q2: Sequence[float], tree: VesselTree) -> np.ndarray:
    lo, hi = _projected_box(tree)
    return lo + (np.asarray(q2, dtype=float) + 1.0) * (hi - lo) / 2.0


def scale_action(action: Sequence[float]) -> np.ndarray:
    """[-1, 1]^4 -> (v_gw mm/s, ω_gw rad/s, v_cath mm/s, ω_cath rad/s)."""
    return np.clip(np.asarray(action, dtype=float), -1.0, 1.0) * ACTION_SCALE


# ----------------------------------------------------------------------
# Tasks
# ----------------------------------------------------------------------

def _distal(tree: VesselTree, branch: str, lo: float, hi: float) -> Region:
    length = tree.branch(branch).length
    return Region(branch, lo * length, hi * length)


def build_tasks(tree: VesselTree) -> Dict[TaskId, TaskSpec]:
    """The five navigation tasks on a generated aortic-arch anatomy."""
    try:
        top = tree.landmarks['descending_top'].s
        apex = tree.landmarks['arch_apex'].s
    except KeyError as e:
        raise ResetError(f"anatomy lacks landmark {e} needed for task regions") from e
    aorta = tree.branch('aorta').length
    return {
        TaskId.A1: TaskSpec(TaskId.A1, Region('aorta', 0.0, min(30.0, aorta)),
                            Region('aorta', max(top - 10.0, 0.0), top)),
        TaskId.A2L: TaskSpec(TaskId.A2L, Region('aorta', max(apex - 5.0, 0.0), min(apex + 5.0, aorta)),
                             _distal(tree, 'lcca', 0.6, 0.8)),
        TaskId.A2R: TaskSpec(TaskId.A2R, Region('aorta', max(apex - 5.0, 0.0), min(apex + 5.0, aorta)),
                             _distal(tree, 'rcca', 0.6, 0.8)),
        TaskId.A3L: TaskSpec(TaskId.A3L, _distal(tree, 'lcca', 0.1, 0.3), _distal(tree, 'lica', 0.6, 0.9)),
        TaskId.A3R: TaskSpec(TaskId.A3R, _distal(tree, 'rcca', 0.1, 0.3), _distal(tree, 'rica', 0.6, 0.9)),
    }


def toy_task(tree: VesselTree) -> Dict[TaskId, TaskSpec]:
    """Single trunk-to-left-branch task on the Y anatomy."""
    return {TaskId.A2L: TaskSpec(TaskId.A2L, Region('trunk', 20.0, 40.0),
                                 _distal(tree, 'left', 0.6, 0.85))}


def default_tasks(tree: VesselTree) -> Dict[TaskId, TaskSpec]:
    return toy_task(tree) if 'trunk' in tree.branches else build_tasks(tree)


def _realise_region(base: VesselTree, tree: VesselTree, region: Region,
                    params: Optional[AugmentParams]) -> Region:
    """Carry a base-tree region onto the episode tree."""
    if params is None:
        return region
    matrix = params.matrix()
    ends = [tree.project_to_branch(region.branch, matrix @ base.branch(region.branch).point_at(s))
            for s in (region.s_min, region.s_max)]
    return Region(region.branch, min(ends[0].s, ends[1].s), max(ends[0].s, ends[1].s))


# ----------------------------------------------------------------------
# Environment
# ----------------------------------------------------------------------

class EndovascularEnv(gym.Env):
    """
    Guidewire/catheter navigation environment.

    Observations are the flattened 18-vector of Observation; actions are
    normalized speed commands in [-1, 1]^4. reset() options:
      task:    TaskId (or its string); default drawn uniformly from `task_ids`
      tree_id: key into `anatomies`; default drawn uniformly
      tree:    a VesselTree to register (under tree_id, default "custom") and use
    """

    metadata = {"render_modes": []}

    def __init__(self, anatomies: Dict[str, VesselTree], cfg: Optional[EpisodeConfig] = None,
                 task_ids: Optional[Sequence[TaskId]] = None,
                 guidewire: Optional[DeviceParams] = None,
                 catheter: Optional[DeviceParams] = None,
                 task_factory: Callable[[VesselTree], Dict[TaskId, TaskSpec]] = default_tasks):
        super().__init__()
        if not anatomies:
            raise ValueError("environment needs at least one anatomy")
        self.anatomies = dict(anatomies)
        self.cfg = cfg or EpisodeConfig()
        self.guidewire = guidewire or default_guidewire()
        self.catheter = catheter or default_catheter()
        self.task_factory = task_factory
        self._tasks = {tree_id: task_factory(tree) for tree_id, tree in self.anatomies.items()}
        if task_ids is None:
            task_ids = sorted({t for tasks in self._tasks.values() for t in tasks}, key=lambda t: t.index)
        self.task_ids = [TaskId(t) for t in task_ids]

        self.observation_space = spaces.Box(-1.0, 1.0, shape=(OBS_DIM,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(ACTION_DIM,), dtype=np.float64)

        self.task: Optional[TaskSpec] = None
        self.tree_id: Optional[str] = None
        self.base_tree: Optional[VesselTree] = None
        self.tree: Optional[VesselTree] = None
        self.augment_params: Optional[AugmentParams] = None
        self.sim: Optional[SimState] = None
        self.observation: Optional[Observation] = None
        self.target_point: Optional[np.ndarray] = None
        self.target_arc: Optional[ArcPosition] = None
        self.initial_pathlength = 0.0
        self.pathlength = 0.0
        self.step_index = 0
        self.episode_log: List[StepInfo] = []
        self._active = False

    def tasks_for(self, tree_id: str) -> Dict[TaskId, TaskSpec]:
        return self._tasks[tree_id]

    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None):
        super().reset(seed=seed)
        options = options or {}
        rng = self.np_random

        tree_id = options.get('tree_id')
        if options.get('tree') is not None:
            tree_id = tree_id or 'custom'
            self.anatomies[tree_id] = options['tree']
            self._tasks[tree_id] = self.task_factory(options['tree'])
        if tree_id is None:
            ids = sorted(self.anatomies)
            tree_id = ids[int(rng.integers(len(ids)))]
        if tree_id not in self.anatomies:
            raise ResetError(f"unknown anatomy '{tree_id}'")
        task_id = options.get('task')
        if task_id is None:
            task_id = self.task_ids[int(rng.integers(len(self.task_ids)))]
        task_id = TaskId(task_id)
        tasks = self._tasks[tree_id]
        if task_id not in tasks:
            raise ResetError(f"task {task_id.value} not defined on anatomy '{tree_id}'")

        self.task = tasks[task_id]
        self.tree_id = tree_id
        self.base_tree = self.anatomies[tree_id]
        self.augment_params = AugmentParams.sample(rng) if self.cfg.augment else None
        self.tree = (self.base_tree.apply_augmentation(self.augment_params)
                     if self.augment_params else self.base_tree)

        try:
            start = _realise_region(self.base_tree, self.tree, self.task.start_region, self.augment_params)
            target = _realise_region(self.base_tree, self.tree, self.task.target_region, self.augment_params)
            self.target_point, self.target_arc = self.tree.sample_region(target, rng)
            insertion, start_arc = self.tree.sample_region(start, rng)
            heading = self.task.heading_sign * self.tree.branch(start_arc.branch).tangent_at(start_arc.s)
            self.sim = reset_devices(self.tree, insertion, heading, self.guidewire, self.catheter)
        except (ValueError, KeyError) as e:
            raise ResetError(f"task {task_id.value} on '{tree_id}': {e}") from e

        now = self._tracking()
        self.observation = Observation(now, now.copy(), self._project(self.target_point), np.zeros(ACTION_DIM))
        self.pathlength = self._pathlength()
        self.initial_pathlength = self.pathlength
        self.step_index = 0
        self.episode_log = []
        self._active = True
        logger.debug("reset %s on %s: pathlength %.1f mm", task_id.value, tree_id, self.pathlength)
        return self.observation.flatten(), self._reset_info()

    def step(self, action):
        if not self._active:
            raise LifecycleError("step() called without an active episode; call reset() first")
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        outcome = sim_step(self.sim, self.tree, scale_action(a), self.cfg.dt)
        self.step_index += 1

        previous = self.pathlength
        self.pathlength = self._pathlength()
        delta = self.pathlength - previous
        tip = self.sim.tip_position()
        reached = bool(np.linalg.norm(tip - self.target_point) <= self.cfg.success_radius)
        reward = compute_reward(delta, reached)

        terminated = reached
        truncated = (not terminated) and self.step_index >= self.cfg.max_steps
        if terminated or truncated:
            self._active = False

        self.observation = Observation(
            self._tracking(outcome.tracking_points), self.observation.tracking_now,
            self.observation.target, a,
        )
        info = StepInfo(
            pathlength=self.pathlength,
            delta_pathlength=delta,
            tip_force=tip_force_norm(outcome.contacts),
            tip_speed=outcome.tip_displacement / self.cfg.dt,
            reached=reached,
            step_index=self.step_index,
            tip_branch=self.tree.nearest_lumen_point(tip).arc.branch,
            insertion_length=self.sim.guidewire.insertion_length,
        )
        self.episode_log.append(info)
        return self.observation.flatten(), reward, terminated, truncated, info.to_dict()

    # ------------------------------------------------------------------

    def _project(self, p: np.ndarray) -> np.ndarray:
        # Base-tree box so augmentation shifts stay visible
        return normalize_obs(project_fluoro(p), self.base_tree)

    def _tracking(self, points: Optional[np.ndarray] = None) -> np.ndarray:
        if points is None:
            points = self.sim.tracking_points()
        return np.array([self._project(p) for p in points])

    def _pathlength(self) -> float:
        tip_arc = self.tree.nearest_lumen_point(self.sim.tip_position()).arc
        return self.tree.path_length(tip_arc, self.target_arc)

    def _reset_info(self) -> Dict[str, Any]:
        return {
            'task': self.task.id.value,
            'tree_id': self.tree_id,
            'pathlength': self.pathlength,
            'augment': self.augment_params.to_dict() if self.augment_params else None,
        }

    @property
    def active(self) -> bool:
        return self._active
