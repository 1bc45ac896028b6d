"""
Run configuration, manifest and the two-stage training pipeline.

Stages: gen-anatomy -> pretrain (one single-task SAC per task + replay prefill)
-> train (multi-task SAC or TD-MPC2 on the shared buffer) -> eval (hold-out
anatomies, paired comparison) and the augmentation ablation.
"""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from approx import load_checkpoint
from devicesim import DeviceParams, default_catheter, default_guidewire
from env import EndovascularEnv, EpisodeConfig, TaskId, default_tasks
from evalharness import AggregateReport, compare, evaluate, write_report
from replay import ReplayBuffer, ReplayWriter, iter_episodes
from rollout import LoopConfig, Snapshot, train_multi_task
from sac import SacAgent, SacConfig, train_single_task
from shutdown_manager import get_shutdown_manager
from tdmpc2 import TdmpcConfig, WorldModel
from ui import console, create_stage_table, format_seconds, info, success, warning
from vessel import (
    AnatomyError,
    AnatomySpec,
    ArchType,
    ToyAnatomySpec,
    VesselTree,
    generate_synthetic_anatomy,
    generate_toy_anatomy,
    load_tree_file,
    save_tree,
)

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

SEED_ENV_VAR = "ENDONAV_SEED"
MANIFEST_NAME = "manifest.json"
ALGOS = ('sac', 'tdmpc2')
ANATOMY_SOURCES = ('synthetic', 'toy', 'files')
STAGE_CODES = {'gen-anatomy': 1, 'pretrain': 2, 'train': 3, 'eval': 4, 'ablate-aug': 5}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; the manifest records it as failed."""
    pass


def _build(cls, data: Dict[str, Any], section: str):
    """Dataclass from a dict, rejecting keys the dataclass does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls.from_dict(data) if hasattr(cls, 'from_dict') else cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'spec':
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

@dataclass
class AnatomyConfig:
    source: str = 'synthetic'
    count: int = 15
    holdout: int = 5
    spec: Dict[str, Any] = field(default_factory=dict)    # AnatomySpec / ToyAnatomySpec overrides
    train_files: List[str] = field(default_factory=list)
    holdout_files: List[str] = field(default_factory=list)

    def validate(self):
        if self.source not in ANATOMY_SOURCES:
            raise ConfigError(f"anatomy.source must be one of {ANATOMY_SOURCES}, got '{self.source}'")
        if self.source == 'files':
            missing = [p for p in self.train_files + self.holdout_files if not Path(p).exists()]
            if missing:
                raise ConfigError(f"anatomy files not found: {', '.join(missing)}")
            overlap = {Path(p).stem for p in self.train_files} & {Path(p).stem for p in self.holdout_files}
            if overlap:
                raise ConfigError(f"hold-out anatomies also listed for training: {sorted(overlap)}")
            return
        if self.count < 0 or not (0 <= self.holdout <= self.count):
            raise ConfigError(f"anatomy split {self.count - self.holdout}/{self.holdout} is invalid")
        if self.count and self.holdout == self.count:
            raise ConfigError("at least one anatomy must remain for training")
        try:
            self.shape_spec().validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"anatomy.spec: {e}") from e

    def shape_spec(self):
        if self.source == 'toy':
            return ToyAnatomySpec(**self.spec)
        return AnatomySpec.from_dict(self.spec)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AnatomyConfig':
        return cls(**data)


@dataclass
class StageConfig:
    tasks: List[str] = field(default_factory=lambda: [t.value for t in TaskId])
    pretrain_steps: int = 20_000
    prefill_episodes: int = 250
    train_steps: int = 100_000
    replay_capacity: int = 1_000_000
    eval_episodes: int = 10
    eval_seed: int = 1234
    pretrain_loop: LoopConfig = field(default_factory=LoopConfig)
    train_loop: LoopConfig = field(default_factory=lambda: LoopConfig(warmup_steps=0, snapshot_every=5_000))

    def validate(self):
        bad = [t for t in self.tasks if t not in {x.value for x in TaskId}]
        if bad or not self.tasks:
            raise ConfigError(f"stages.tasks: unknown or empty task list {bad or self.tasks}")
        for name in ('pretrain_steps', 'prefill_episodes', 'train_steps', 'replay_capacity', 'eval_episodes'):
            if getattr(self, name) < 0:
                raise ConfigError(f"stages.{name} must be >= 0")
        if self.replay_capacity == 0:
            raise ConfigError("stages.replay_capacity must be > 0")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['pretrain_loop'] = self.pretrain_loop.to_dict()
        data['train_loop'] = self.train_loop.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StageConfig':
        data = dict(data)
        for key in ('pretrain_loop', 'train_loop'):
            if key in data:
                data[key] = _build(LoopConfig, data[key], f"stages.{key}")
        return cls(**data)


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    anatomy: AnatomyConfig = field(default_factory=AnatomyConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    guidewire: DeviceParams = field(default_factory=default_guidewire)
    catheter: DeviceParams = field(default_factory=default_catheter)
    sac: SacConfig = field(default_factory=lambda: SacConfig(n_tasks=len(TaskId)))
    tdmpc2: TdmpcConfig = field(default_factory=lambda: TdmpcConfig(n_tasks=len(TaskId)))
    stages: StageConfig = field(default_factory=StageConfig)
    parallel: int = 1

    SECTIONS = {
        'anatomy': AnatomyConfig, 'episode': EpisodeConfig, 'guidewire': DeviceParams,
        'catheter': DeviceParams, 'sac': SacConfig, 'tdmpc2': TdmpcConfig, 'stages': StageConfig,
    }

    def validate(self) -> 'RunConfig':
        self.anatomy.validate()
        self.stages.validate()
        for name in ('sac', 'tdmpc2'):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from e
        if self.sac.n_tasks < len(TaskId) or self.tdmpc2.n_tasks < len(TaskId):
            raise ConfigError("multi-task agents need n_tasks >= 5")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        return self

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> Dict[str, Any]:
        data = {'out_dir': self.out_dir, 'seed': self.seed, 'parallel': self.parallel}
        for name in self.SECTIONS:
            data[name] = getattr(self, name).to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        known = {'out_dir', 'seed', 'parallel', *cls.SECTIONS}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(unknown)}")
        kwargs = {k: data[k] for k in ('out_dir', 'seed', 'parallel') if k in data}
        for name, section_cls in cls.SECTIONS.items():
            if name in data:
                kwargs[name] = _build(section_cls, data[name], name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Optional[Path] = None, base: Optional['RunConfig'] = None) -> 'RunConfig':
        """
        Read a JSON config layered over `base` (desk defaults when None).
        ENDONAV_SEED overrides the seed.
        """
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                with open(path, 'r') as f:
                    data = json.load(f)
            except FileNotFoundError as e:
                raise ConfigError(f"config file not found: {path}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if base is not None:
            data = _merge(base.to_dict(), data)
        cfg = cls.from_dict(data)
        override = os.environ.get(SEED_ENV_VAR)
        if override is not None:
            try:
                cfg.seed = int(override)
            except ValueError as e:
                raise ConfigError(f"{SEED_ENV_VAR}={override!r} is not an integer") from e
        return cfg.validate()

    @classmethod
    def full_profile(cls, out_dir: str = "runs/full") -> 'RunConfig':
        """Full-scale budgets: 15 anatomies (10/5), 250 prefill episodes per task, 1e7 steps."""
        return cls(
            out_dir=out_dir,
            anatomy=AnatomyConfig(count=15, holdout=5),
            episode=EpisodeConfig(augment=True),
            stages=StageConfig(
                pretrain_steps=1_000_000,
                prefill_episodes=250,
                train_steps=10_000_000,
                replay_capacity=10_000_000,
                eval_episodes=50,
                train_loop=LoopConfig(warmup_steps=0, snapshot_every=100_000),
            ),
        )


def stage_rng(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_CODES[stage], index])


# ----------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------

@dataclass
class StageRecord:
    status: str = "pending"
    seconds: Optional[float] = None
    artifacts: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    progress: Dict[str, Any] = field(default_factory=dict)
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StageRecord':
        return cls(**data)


class RunManifest:
    """
    Record of one run directory: config echo, version, seeds, per-stage
    status, wall clock and artifacts. Rewritten atomically at stage boundaries.
    """

    def __init__(self, out_dir: Path, config: Dict[str, Any], seed: int):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_NAME
        self.config = config
        self.seed = seed
        self.version = __version__
        self.stages: Dict[str, StageRecord] = {}

    @classmethod
    def open(cls, cfg: RunConfig) -> 'RunManifest':
        out = cfg.out
        out.mkdir(parents=True, exist_ok=True)
        manifest = cls(out, cfg.to_dict(), cfg.seed)
        if manifest.path.exists():
            with open(manifest.path, 'r') as f:
                data = json.load(f)
            manifest.stages = {k: StageRecord.from_dict(v) for k, v in data.get('stages', {}).items()}
        return manifest

    @classmethod
    def read(cls, out_dir: Path) -> 'RunManifest':
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, 'r') as f:
            data = json.load(f)
        manifest = cls(Path(out_dir), data.get('config', {}), data.get('seed', 0))
        manifest.version = data.get('version', '')
        manifest.stages = {k: StageRecord.from_dict(v) for k, v in data.get('stages', {}).items()}
        return manifest

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': self.version,
            'seed': self.seed,
            'config': self.config,
            'stages': {k: v.to_dict() for k, v in self.stages.items()},
        }

    def save(self):
        temp_file = self.path.with_suffix('.tmp')
        with open(temp_file, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        temp_file.replace(self.path)

    def record(self, name: str) -> StageRecord:
        return self.stages.setdefault(name, StageRecord())

    def relative(self, path: Path) -> str:
        path = Path(path)
        try:
            return str(path.resolve().relative_to(self.out_dir.resolve()))
        except ValueError:
            return str(path)

    def add_artifact(self, stage: str, path: Path):
        rel = self.relative(path)
        for name, rec in self.stages.items():
            if name != stage and rel in rec.artifacts:
                rec.artifacts.remove(rel)
        rec = self.record(stage)
        if rel not in rec.artifacts:
            rec.artifacts.append(rel)

    def artifacts(self) -> List[str]:
        return [a for rec in self.stages.values() for a in rec.artifacts]

    @contextmanager
    def stage(self, name: str, seed: Optional[int] = None) -> Iterator[StageRecord]:
        """Time a stage; failures are recorded and re-raised as StageError."""
        rec = self.record(name)
        rec.status = "running"
        rec.seed = seed
        rec.message = ""
        self.save()
        started = time.monotonic()
        try:
            yield rec
        except (StageError, ConfigError):
            rec.status = "failed"
            rec.seconds = time.monotonic() - started
            self.save()
            raise
        except Exception as e:
            rec.status = "failed"
            rec.message = f"{type(e).__name__}: {e}"
            rec.seconds = time.monotonic() - started
            self.save()
            raise StageError(f"stage '{name}' failed: {rec.message}") from e
        if rec.status == "running":
            rec.status = "done"
        rec.seconds = time.monotonic() - started
        self.save()
        logger.info("stage %s %s in %s", name, rec.status, format_seconds(rec.seconds))


# ----------------------------------------------------------------------
# Anatomies
# ----------------------------------------------------------------------

def anatomy_dir(cfg: RunConfig) -> Path:
    return cfg.out / "anatomy"


def cmd_gen_anatomy(cfg: RunConfig, manifest: RunManifest) -> Dict[str, List[str]]:
    """
    Write `count` anatomy files plus split.json. Synthetic anatomies draw
    their arch type per file; the split is a seeded permutation.
    """
    directory = anatomy_dir(cfg)
    directory.mkdir(parents=True, exist_ok=True)
    rng = stage_rng(cfg.seed, 'gen-anatomy')
    with manifest.stage('gen-anatomy', cfg.seed):
        source = cfg.anatomy.source
        trees: Dict[str, VesselTree] = {}
        if source == 'files':
            for p in cfg.anatomy.train_files + cfg.anatomy.holdout_files:
                try:
                    trees[Path(p).stem] = load_tree_file(Path(p))
                except (OSError, AnatomyError) as e:
                    raise StageError(f"{p}: {e}") from e
            split = {'train': [Path(p).stem for p in cfg.anatomy.train_files],
                     'holdout': [Path(p).stem for p in cfg.anatomy.holdout_files]}
        else:
            ids = [f"anat-{i:02d}" for i in range(cfg.anatomy.count)]
            for tree_id in ids:
                if source == 'toy':
                    trees[tree_id] = generate_toy_anatomy(cfg.anatomy.shape_spec(), rng)
                else:
                    arch = ArchType.TYPE_I if rng.random() < 0.5 else ArchType.TYPE_II
                    spec = replace(cfg.anatomy.shape_spec(), arch_type=arch)
                    trees[tree_id] = generate_synthetic_anatomy(spec, rng)
            order = [ids[i] for i in rng.permutation(len(ids))]
            n_train = len(ids) - cfg.anatomy.holdout
            split = {'train': sorted(order[:n_train]), 'holdout': sorted(order[n_train:])}

        for tree_id, tree in trees.items():
            path = directory / f"{tree_id}.json"
            save_tree(tree, path)
            manifest.add_artifact('gen-anatomy', path)
        split_path = directory / "split.json"
        temp_file = split_path.with_suffix('.tmp')
        with open(temp_file, 'w') as f:
            json.dump(split, f, indent=2)
        temp_file.replace(split_path)
        manifest.add_artifact('gen-anatomy', split_path)
    success(f"{len(trees)} anatomies: {len(split['train'])} train / {len(split['holdout'])} hold-out")
    return split


def load_split(cfg: RunConfig) -> Tuple[Dict[str, VesselTree], Dict[str, VesselTree]]:
    directory = anatomy_dir(cfg)
    split_path = directory / "split.json"
    if not split_path.exists():
        raise StageError(f"{split_path} missing; run gen-anatomy first")
    with open(split_path, 'r') as f:
        split = json.load(f)
    def load(ids: List[str]) -> Dict[str, VesselTree]:
        return {i: load_tree_file(directory / f"{i}.json") for i in ids}

    return load(split['train']), load(split['holdout'])


def stage_tasks(cfg: RunConfig, trees: Dict[str, VesselTree]) -> List[TaskId]:
    """Configured tasks that every anatomy in `trees` defines."""
    defined = None
    for tree in trees.values():
        ids = set(default_tasks(tree))
        defined = ids if defined is None else defined & ids
    tasks = [TaskId(t) for t in cfg.stages.tasks if defined and TaskId(t) in defined]
    if not tasks:
        raise StageError(f"none of the tasks {cfg.stages.tasks} is defined on these anatomies")
    skipped = [t for t in cfg.stages.tasks if TaskId(t) not in tasks]
    if skipped:
        warning(f"Tasks not defined on these anatomies, skipped: {', '.join(skipped)}")
    return tasks


def make_env(cfg: RunConfig, trees: Dict[str, VesselTree], tasks: List[TaskId],
             episode: Optional[EpisodeConfig] = None) -> EndovascularEnv:
    return EndovascularEnv(trees, episode or cfg.episode, task_ids=tasks,
                           guidewire=cfg.guidewire, catheter=cfg.catheter)


# ----------------------------------------------------------------------
# Pretrain: single-task SAC + replay prefill
# ----------------------------------------------------------------------

def prefill_path(cfg: RunConfig) -> Path:
    return cfg.out / "prefill.jsonl"


def checkpoint_dir(cfg: RunConfig) -> Path:
    path = cfg.out / "checkpoints"
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_pretrain(cfg: RunConfig, manifest: RunManifest) -> Path:
    train_trees, _ = load_split(cfg)
    tasks = stage_tasks(cfg, train_trees)
    single = replace(cfg.sac, n_tasks=0)
    shutdown = get_shutdown_manager()
    shutdown.reset()
    with manifest.stage('pretrain', cfg.seed) as rec, shutdown:
        with ReplayWriter(prefill_path(cfg), cfg.stages.replay_capacity, truncate=True) as writer:
            for i, task in enumerate(tasks):
                rng = stage_rng(cfg.seed, 'pretrain', i)
                agent, records = train_single_task(
                    task, train_trees, cfg.stages.pretrain_steps, single, rng,
                    episode_cfg=cfg.episode, loop=cfg.stages.pretrain_loop,
                    record=cfg.stages.prefill_episodes, writer=writer, shutdown=shutdown,
                )
                path = checkpoint_dir(cfg) / f"sac_{task.value}.npz"
                agent.save(path, {'task': task.value, 'stage': 'pretrain'})
                manifest.add_artifact('pretrain', path)
                rec.progress[task.value] = len(records)
                manifest.save()
                info(f"{task.value}: {len(records)} prefill episodes")
                if shutdown.shutdown_requested():
                    rec.status = "interrupted"
                    break
        manifest.add_artifact('pretrain', prefill_path(cfg))
    return prefill_path(cfg)


# ----------------------------------------------------------------------
# Multi-task training
# ----------------------------------------------------------------------

def make_agent(cfg: RunConfig, algo: str, rng: np.random.Generator):
    if algo == 'sac':
        return SacAgent(cfg.sac, rng)
    if algo == 'tdmpc2':
        return WorldModel(cfg.tdmpc2, rng)
    raise ConfigError(f"unknown algorithm '{algo}' (expected one of {ALGOS})")


def load_agent(path: Path):
    _, _, meta = load_checkpoint(path)
    algo = meta.get('algo')
    if algo == 'sac':
        return SacAgent.load(path)
    if algo == 'tdmpc2':
        return WorldModel.load(path)
    raise StageError(f"{path}: unknown checkpoint algorithm '{algo}'")


def check_holdout(replay_file: Path, holdout_ids: List[str]):
    """No hold-out anatomy may appear in a training episode."""
    leaked = sorted({ep.tree_id for ep in iter_episodes(replay_file) if ep.tree_id in holdout_ids})
    if leaked:
        raise StageError(f"{replay_file}: hold-out anatomies used in training: {leaked}")


def _train(cfg: RunConfig, manifest: RunManifest, algo: str, stage: str, tag: str) -> Path:
    """Multi-task training from the prefill buffer; resumes an interrupted run."""
    if algo not in ALGOS:
        raise ConfigError(f"unknown algorithm '{algo}' (expected one of {ALGOS})")
    if not prefill_path(cfg).exists():
        raise StageError(f"{prefill_path(cfg)} missing; run pretrain first")
    train_trees, holdout = load_split(cfg)
    tasks = stage_tasks(cfg, train_trees)
    checkpoint = checkpoint_dir(cfg) / f"{tag}.npz"
    replay_file = cfg.out / f"replay_{tag}.jsonl"
    rng = stage_rng(cfg.seed, 'train')
    shutdown = get_shutdown_manager()
    shutdown.reset()

    with manifest.stage(stage, cfg.seed) as rec, shutdown:
        buffer = ReplayBuffer(cfg.stages.replay_capacity)
        for ep in iter_episodes(prefill_path(cfg)):
            buffer.push_episode(ep)
        start_step = int(rec.progress.get('steps', 0)) if checkpoint.exists() else 0
        if start_step:
            agent = load_agent(checkpoint)
            for ep in iter_episodes(replay_file):
                buffer.push_episode(ep)
            info(f"Resuming {tag} at {start_step:,} steps")
        else:
            agent = make_agent(cfg, algo, rng)
        env = make_env(cfg, train_trees, tasks)
        env.reset(seed=int(rng.integers(2**31 - 1)))

        def on_snapshot(snap: Snapshot):
            agent.save(checkpoint, {'stage': stage, 'steps': snap.steps})
            rec.progress.update({'steps': snap.steps, 'episodes': snap.episodes})
            rec.progress.setdefault('snapshots', []).append(snap.to_dict())
            manifest.save()

        loop = replace(cfg.stages.train_loop, steps=cfg.stages.train_steps)
        with ReplayWriter(replay_file, cfg.stages.replay_capacity, truncate=not start_step) as writer:
            log = train_multi_task(agent, env, buffer, loop, rng, writer=writer, shutdown=shutdown,
                                   on_snapshot=on_snapshot, start_step=start_step,
                                   description=f"Training {tag}")
        agent.save(checkpoint, {'stage': stage, 'steps': log.exploration_steps})
        rec.progress['steps'] = log.exploration_steps
        rec.progress['exploration_steps'] = log.exploration_steps
        if log.interrupted:
            rec.status = "interrupted"
            rec.message = shutdown.reason or ""
        check_holdout(replay_file, list(holdout))
        manifest.add_artifact(stage, checkpoint)
        manifest.add_artifact(stage, replay_file)
    return checkpoint


def cmd_train(cfg: RunConfig, manifest: RunManifest, algo: str) -> Path:
    return _train(cfg, manifest, algo, f"train-{algo}", algo)


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------

def _evaluate_checkpoints(cfg: RunConfig, checkpoints: Dict[str, Path], manifest: RunManifest,
                          episode: Optional[EpisodeConfig] = None) -> AggregateReport:
    _, holdout = load_split(cfg)
    if not holdout:
        raise StageError("no hold-out anatomies to evaluate on")
    tasks = stage_tasks(cfg, holdout)
    reports = []
    for name, path in checkpoints.items():
        if not Path(path).exists():
            raise StageError(f"checkpoint {path} not found")
        agent = load_agent(Path(path))
        env = make_env(cfg, holdout, tasks, episode or replace(cfg.episode, augment=False))
        steps = 0
        for rec in manifest.stages.values():
            if manifest.relative(path) in rec.artifacts:
                steps = int(rec.progress.get('exploration_steps', 0))
        reports.append(evaluate(agent, env, [t.value for t in tasks], sorted(holdout),
                                cfg.stages.eval_episodes, cfg.stages.eval_seed, model=name,
                                parallel=cfg.parallel, exploration_steps=steps))
    report = reports[0]
    if len(reports) == 2:
        report = compare(report, reports[1])
    return report


def _emit(report: AggregateReport, manifest: RunManifest, stage: str, stem: str) -> List[Path]:
    paths = [write_report(report, manifest.out_dir / f"{stem}.csv", 'csv'),
             write_report(report, manifest.out_dir / f"{stem}.json", 'json')]
    for path in paths:
        manifest.add_artifact(stage, path)
    return paths


def cmd_eval(cfg: RunConfig, manifest: RunManifest,
             checkpoints: Optional[Dict[str, Path]] = None) -> AggregateReport:
    if checkpoints is None:
        checkpoints = {algo: checkpoint_dir(cfg) / f"{algo}.npz" for algo in ALGOS
                       if (checkpoint_dir(cfg) / f"{algo}.npz").exists()}
    if not checkpoints:
        raise StageError("no trained checkpoints to evaluate; run train first")
    if len(checkpoints) > 2:
        raise ConfigError(f"eval compares at most two models, got {len(checkpoints)}")
    with manifest.stage('eval', cfg.stages.eval_seed):
        report = _evaluate_checkpoints(cfg, checkpoints, manifest)
        _emit(report, manifest, 'eval', 'report')
    return report


def ablation_arms(cfg: RunConfig) -> Tuple[RunConfig, RunConfig]:
    """Two configs that differ only in the augmentation flag."""
    on = replace(cfg, episode=replace(cfg.episode, augment=True))
    off = replace(cfg, episode=replace(cfg.episode, augment=False))
    return on, off


def cmd_ablate_augmentation(cfg: RunConfig, manifest: RunManifest, algo: str = 'tdmpc2') -> AggregateReport:
    on, off = ablation_arms(cfg)
    checkpoints = {
        f"{algo}+aug": _train(on, manifest, algo, f"ablate-{algo}-aug", f"{algo}_aug"),
        f"{algo}-noaug": _train(off, manifest, algo, f"ablate-{algo}-noaug", f"{algo}_noaug"),
    }
    with manifest.stage('ablate-aug', cfg.stages.eval_seed):
        report = _evaluate_checkpoints(cfg, checkpoints, manifest)
        _emit(report, manifest, 'ablate-aug', 'ablation')
    return report


def show_manifest(manifest: RunManifest):
    console.print(create_stage_table({k: v.to_dict() for k, v in manifest.stages.items()},
                                     title=f"Run {manifest.out_dir}"))
