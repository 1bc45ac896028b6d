"""
Evaluation harness for EndoNav

Runs deterministic evaluation episodes, computes per-episode metrics (success,
procedure time, path ratio, tip force, tip speed), aggregates them per task and
model, runs two-tailed paired t-tests between models on matched episode seeds,
and writes csv/json reports.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.table import Table
from scipy import stats

from env import EndovascularEnv, TaskId
from rollout import Agent, EpisodeResult, run_episode
from ui import create_step_progress

logger = logging.getLogger(__name__)

RUPTURE_THRESHOLD = 1.5             # N
RETRACTED_INSERTION = 0.5           # mm of guidewire left inside
MEAN_ROW = "Mean"
SIGNIFICANCE = ((0.001, '***'), (0.01, '**'), (0.05, '*'))

# (csv column, EpisodeMetrics attribute); order follows the results table layout
METRICS: Tuple[Tuple[str, str], ...] = (
    ('success', 'success'),
    ('time', 'procedure_time'),
    ('path_ratio', 'path_ratio'),
    ('force_mean', 'force_mean'),
    ('force_max', 'force_max'),
    ('speed_mean', 'speed_mean'),
    ('speed_max', 'speed_max'),
)


class PairingError(ValueError):
    """Two evaluations do not share the same (task, tree, episode seed) cells."""
    pass


class FailureMode:
    WRONG_BRANCH = "wrong_branch"
    RETRACTED = "retracted"
    TIMEOUT = "timeout"


# ----------------------------------------------------------------------
# Metric primitives
# ----------------------------------------------------------------------

def path_ratio(initial_path: float, final_path: float) -> float:
    """Fraction of the initial pathlength covered, clamped to [0, 1]."""
    if not initial_path > 0:
        raise ValueError(f"initial pathlength must be positive, got {initial_path}")
    return float(min(max((initial_path - final_path) / initial_path, 0.0), 1.0))


def force_stats(forces: Sequence[float]) -> Tuple[float, float]:
    if len(forces) == 0:
        raise ValueError("force_stats needs at least one step")
    values = np.asarray(forces, dtype=float)
    return float(values.mean()), float(values.max())


def speed_stats(displacements: Sequence[float], dt: float) -> Tuple[float, float]:
    if len(displacements) == 0:
        raise ValueError("speed_stats needs at least one step")
    if dt <= 0:
        raise ValueError("dt must be positive")
    speeds = np.asarray(displacements, dtype=float) / dt
    return float(speeds.mean()), float(speeds.max())


def significance_stars(p: Optional[float]) -> str:
    if p is None or not math.isfinite(p):
        return ""
    for threshold, stars in SIGNIFICANCE:
        if p < threshold:
            return stars
    return ""


@dataclass
class TTestResult:
    t: Optional[float]
    p: Optional[float]
    n: int
    degenerate: bool = False
    reason: str = ""

    @property
    def significant(self) -> bool:
        return (not self.degenerate) and self.p is not None and self.p < 0.05

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['significant'] = self.significant
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TTestResult':
        data = {k: v for k, v in data.items() if k != 'significant'}
        return cls(**data)


def paired_t_test(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """
    Two-tailed paired Student's t-test.

    Degenerate inputs (fewer than two pairs, zero variance of the differences)
    come back flagged instead of raising.
    """
    if len(x) != len(y):
        raise ValueError(f"paired samples differ in length ({len(x)} vs {len(y)})")
    n = len(x)
    if n < 2:
        return TTestResult(None, None, n, degenerate=True, reason="fewer than two pairs")
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    sd = float(np.std(d, ddof=1))
    if not sd > 0:
        return TTestResult(None, None, n, degenerate=True, reason="zero variance of differences")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t, p, n)


# ----------------------------------------------------------------------
# Per-episode metrics
# ----------------------------------------------------------------------

@dataclass
class EpisodeMetrics:
    task: str
    tree_id: str
    seed: int
    success: bool
    steps: int
    procedure_time: Optional[float] = None      # s, successful episodes only
    path_ratio: Optional[float] = None          # failed episodes only
    force_mean: float = 0.0
    force_max: float = 0.0
    speed_mean: float = 0.0
    speed_max: float = 0.0
    failure_mode: Optional[str] = None
    forces: List[float] = field(default_factory=list)
    displacements: List[float] = field(default_factory=list)

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.task, self.tree_id, self.seed)

    def value(self, attr: str) -> Optional[float]:
        v = getattr(self, attr)
        if v is None:
            return None
        return 100.0 * float(v) if attr == 'success' else float(v)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EpisodeMetrics':
        return cls(**data)


def classify_failure(result: EpisodeResult, route: Sequence[str]) -> str:
    last = result.infos[-1]
    if last.insertion_length <= RETRACTED_INSERTION:
        return FailureMode.RETRACTED
    if last.tip_branch and last.tip_branch not in route:
        return FailureMode.WRONG_BRANCH
    return FailureMode.TIMEOUT


def episode_metrics(result: EpisodeResult, dt: float, seed: int,
                    route: Sequence[str] = ()) -> EpisodeMetrics:
    """Metrics of one finished episode; forces/displacements kept for recomputation."""
    infos = result.infos
    forces = [info.tip_force for info in infos]
    displacements = [info.tip_speed * dt for info in infos]
    f_mean, f_max = force_stats(forces)
    s_mean, s_max = speed_stats(displacements, dt)
    metrics = EpisodeMetrics(
        task=result.record.task,
        tree_id=result.record.tree_id,
        seed=seed,
        success=result.success,
        steps=len(infos),
        force_mean=f_mean,
        force_max=f_max,
        speed_mean=s_mean,
        speed_max=s_max,
        forces=forces,
        displacements=displacements,
    )
    if result.success:
        metrics.procedure_time = len(infos) * dt
    else:
        metrics.path_ratio = path_ratio(result.initial_pathlength, infos[-1].pathlength)
        metrics.failure_mode = classify_failure(result, route)
    if f_max >= RUPTURE_THRESHOLD:
        logger.warning("tip force %.3f N above the rupture threshold (%s on %s, seed %d)",
                       f_max, metrics.task, metrics.tree_id, seed)
    return metrics


# ----------------------------------------------------------------------
# Aggregation
# ----------------------------------------------------------------------

@dataclass
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> 'MetricSummary':
        if not values:
            return cls(None, None, 0)
        arr = np.asarray(values, dtype=float)
        return cls(float(arr.mean()), float(arr.std()), len(arr))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CellReport:
    task: str
    model: str
    n: int
    metrics: Dict[str, MetricSummary]
    failure_modes: Dict[str, int] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return self.metrics['success'].mean or 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'task': self.task,
            'model': self.model,
            'n': self.n,
            'metrics': {k: v.to_dict() for k, v in self.metrics.items()},
            'failure_modes': dict(self.failure_modes),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CellReport':
        return cls(data['task'], data['model'], data['n'],
                   {k: MetricSummary(**v) for k, v in data['metrics'].items()},
                   dict(data.get('failure_modes', {})))


def summarize(task: str, model: str, episodes: Sequence[EpisodeMetrics]) -> CellReport:
    metrics = {}
    for column, attr in METRICS:
        values = [ep.value(attr) for ep in episodes]
        metrics[column] = MetricSummary.of([v for v in values if v is not None])
    modes: Dict[str, int] = {}
    for ep in episodes:
        if ep.failure_mode:
            modes[ep.failure_mode] = modes.get(ep.failure_mode, 0) + 1
    return CellReport(task, model, len(episodes), metrics, modes)


def mean_row(model: str, cells: Sequence[CellReport]) -> CellReport:
    """Unweighted mean across task rows, as in the bottom row of the results table."""
    metrics = {}
    for column, _ in METRICS:
        means = [c.metrics[column].mean for c in cells if c.metrics[column].mean is not None]
        stds = [c.metrics[column].std for c in cells if c.metrics[column].std is not None]
        metrics[column] = MetricSummary(
            float(np.mean(means)) if means else None,
            float(np.mean(stds)) if stds else None,
            sum(c.metrics[column].n for c in cells),
        )
    return CellReport(MEAN_ROW, model, sum(c.n for c in cells), metrics)


@dataclass
class Comparison:
    task: str
    models: Tuple[str, str]
    tests: Dict[str, TTestResult]

    def to_dict(self) -> Dict[str, Any]:
        return {'task': self.task, 'models': list(self.models),
                'tests': {k: v.to_dict() for k, v in self.tests.items()}}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Comparison':
        return cls(data['task'], tuple(data['models']),
                   {k: TTestResult.from_dict(v) for k, v in data['tests'].items()})


@dataclass
class AggregateReport:
    cells: List[CellReport] = field(default_factory=list)
    comparisons: List[Comparison] = field(default_factory=list)
    episodes: Dict[str, List[EpisodeMetrics]] = field(default_factory=dict)
    exploration_steps: Dict[str, int] = field(default_factory=dict)

    @property
    def models(self) -> List[str]:
        return list(self.episodes)

    def cell(self, task: str, model: str) -> CellReport:
        for c in self.cells:
            if c.task == task and c.model == model:
                return c
        raise KeyError(f"no cell for task {task} / model {model}")

    def comparison(self, task: str) -> Optional[Comparison]:
        for c in self.comparisons:
            if c.task == task:
                return c
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'cells': [c.to_dict() for c in self.cells],
            'comparisons': [c.to_dict() for c in self.comparisons],
            'episodes': {m: [e.to_dict() for e in eps] for m, eps in self.episodes.items()},
            'exploration_steps': dict(self.exploration_steps),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AggregateReport':
        return cls(
            cells=[CellReport.from_dict(c) for c in data.get('cells', [])],
            comparisons=[Comparison.from_dict(c) for c in data.get('comparisons', [])],
            episodes={m: [EpisodeMetrics.from_dict(e) for e in eps]
                      for m, eps in data.get('episodes', {}).items()},
            exploration_steps=dict(data.get('exploration_steps', {})),
        )


def aggregate(model: str, episodes: Sequence[EpisodeMetrics], exploration_steps: int = 0) -> AggregateReport:
    """Per-task cells plus the Mean row for one model."""
    by_task: Dict[str, List[EpisodeMetrics]] = {}
    for ep in episodes:
        by_task.setdefault(ep.task, []).append(ep)
    order = sorted(by_task, key=lambda t: TaskId(t).index)
    cells = [summarize(task, model, by_task[task]) for task in order]
    if cells:
        cells.append(mean_row(model, cells))
    return AggregateReport(cells, [], {model: list(episodes)}, {model: exploration_steps})


def _paired_values(a: Sequence[EpisodeMetrics], b: Sequence[EpisodeMetrics],
                   attr: str) -> Tuple[List[float], List[float]]:
    xs, ys = [], []
    for ea, eb in zip(a, b):
        va, vb = ea.value(attr), eb.value(attr)
        if va is not None and vb is not None:
            xs.append(va)
            ys.append(vb)
    return xs, ys


def compare(first: AggregateReport, second: AggregateReport) -> AggregateReport:
    """
    Merge two single-model reports and add paired t-tests per task.

    Episodes are paired on (task, tree, seed); any mismatch is a PairingError.
    Conditional metrics (time, path ratio) pair only episodes where both values exist.
    """
    (model_a, eps_a), = first.episodes.items()
    (model_b, eps_b), = second.episodes.items()
    if model_a == model_b:
        model_b = f"{model_b} (2)"
    keys_a = sorted(e.key for e in eps_a)
    keys_b = sorted(e.key for e in eps_b)
    if keys_a != keys_b:
        missing = sorted(set(keys_a) ^ set(keys_b))[:5]
        raise PairingError(f"evaluation cells differ between {model_a} and {model_b}: {missing}")
    a_sorted = sorted(eps_a, key=lambda e: e.key)
    b_sorted = sorted(eps_b, key=lambda e: e.key)

    second_cells = [CellReport(c.task, model_b, c.n, c.metrics, c.failure_modes) for c in second.cells]
    tasks = sorted({e.task for e in eps_a}, key=lambda t: TaskId(t).index)
    comparisons = []
    for task in tasks + [MEAN_ROW]:
        pa = [e for e in a_sorted if task == MEAN_ROW or e.task == task]
        pb = [e for e in b_sorted if task == MEAN_ROW or e.task == task]
        tests = {column: paired_t_test(*_paired_values(pa, pb, attr)) for column, attr in METRICS}
        comparisons.append(Comparison(task, (model_a, model_b), tests))

    cells = []
    for task in tasks + [MEAN_ROW]:
        cells.extend(c for c in first.cells if c.task == task)
        cells.extend(c for c in second_cells if c.task == task)
    return AggregateReport(
        cells=cells,
        comparisons=comparisons,
        episodes={model_a: list(eps_a), model_b: list(eps_b)},
        exploration_steps={model_a: next(iter(first.exploration_steps.values()), 0),
                           model_b: next(iter(second.exploration_steps.values()), 0)},
    )


# ----------------------------------------------------------------------
# Running evaluations
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EvalCell:
    task: str
    tree_id: str
    seed: int


def evaluation_plan(tasks: Sequence[str], tree_ids: Sequence[str], episodes: int,
                    seed: int) -> List[EvalCell]:
    """
    Fixed (task, tree, episode seed) cells. The plan depends only on its
    arguments, so two agents evaluated with the same arguments are paired.
    """
    rng = np.random.default_rng(seed)
    cells = []
    for task in tasks:
        for tree_id in tree_ids:
            for _ in range(episodes):
                cells.append(EvalCell(TaskId(task).value, tree_id, int(rng.integers(2**31 - 1))))
    return cells


def _route(env: EndovascularEnv, tree_id: str, branch: str) -> List[str]:
    return env.anatomies[tree_id].ancestry(branch)


def run_cell(agent: Agent, env: EndovascularEnv, cell: EvalCell) -> EpisodeMetrics:
    result = run_episode(env, agent, np.random.default_rng(cell.seed), task=cell.task,
                         tree_id=cell.tree_id, seed=cell.seed, deterministic=True, split="eval")
    return episode_metrics(result, env.cfg.dt, cell.seed, _route(env, cell.tree_id, result.target_branch))


def evaluate(agent: Agent, env: EndovascularEnv, tasks: Sequence[str], tree_ids: Sequence[str],
             episodes: int, seed: int, model: Optional[str] = None, parallel: int = 1,
             exploration_steps: int = 0) -> AggregateReport:
    """
    Deterministic-mode evaluation over tasks x trees x episodes.

    With parallel > 1 cells run on a thread pool, each worker on its own copy
    of the environment; results are reduced in plan order.
    """
    model = model or getattr(agent, 'algo', 'agent')
    plan = evaluation_plan(tasks, tree_ids, episodes, seed)
    results: List[Optional[EpisodeMetrics]] = [None] * len(plan)

    with create_step_progress() as progress:
        bar = progress.add_task(f"Evaluating {model}", total=len(plan), stats="")
        if parallel <= 1:
            for i, cell in enumerate(plan):
                results[i] = run_cell(agent, env, cell)
                progress.advance(bar)
        else:
            local = threading.local()

            def worker(idx: int) -> Tuple[int, EpisodeMetrics]:
                if not hasattr(local, 'env'):
                    local.env = copy.deepcopy(env)
                return idx, run_cell(agent, local.env, plan[idx])

            with ThreadPoolExecutor(max_workers=parallel) as executor:
                futures = [executor.submit(worker, i) for i in range(len(plan))]
                for future in as_completed(futures):
                    idx, metrics = future.result()
                    results[idx] = metrics
                    progress.advance(bar)

    report = aggregate(model, results, exploration_steps)
    for cell in report.cells:
        logger.info("%s %s: success %.1f%% (n=%d)", model, cell.task, cell.success_rate, cell.n)
    return report


def success_rate_from_log(episodes: Sequence[EpisodeMetrics]) -> float:
    if not episodes:
        return 0.0
    return 100.0 * sum(1 for e in episodes if e.success) / len(episodes)


# ----------------------------------------------------------------------
# Report files
# ----------------------------------------------------------------------

def report_columns() -> List[str]:
    columns = ['task', 'model', 'n']
    for column, _ in METRICS:
        columns += [column, f"{column}_std"]
    columns += [f"{column}_sig" for column, _ in METRICS]
    return columns


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def report_rows(report: AggregateReport) -> List[Dict[str, str]]:
    rows = []
    for cell in report.cells:
        row = {'task': cell.task, 'model': cell.model, 'n': str(cell.n)}
        comparison = report.comparison(cell.task)
        for column, _ in METRICS:
            summary = cell.metrics[column]
            row[column] = _fmt(summary.mean)
            row[f"{column}_std"] = _fmt(summary.std)
            test = comparison.tests.get(column) if comparison else None
            row[f"{column}_sig"] = significance_stars(test.p) if test else ""
        rows.append(row)
    return rows


def write_report(report: AggregateReport, path: Path, fmt: str = 'csv') -> Path:
    """
    Write the report atomically. csv holds the results-table rows; json is the
    structured twin with comparisons and every per-episode log.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(path.name + '.tmp')
    if fmt == 'csv':
        with open(temp_file, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=report_columns())
            writer.writeheader()
            writer.writerows(report_rows(report))
    elif fmt == 'json':
        with open(temp_file, 'w') as f:
            json.dump(report.to_dict(), f, indent=2)
    else:
        raise ValueError(f"unknown report format '{fmt}' (expected csv or json)")
    temp_file.replace(path)
    return path


def read_report_csv(path: Path) -> List[Dict[str, Any]]:
    """Parse a csv report back; numeric cells become floats, empty cells None."""
    rows = []
    with open(path, newline='') as f:
        for raw in csv.DictReader(f):
            row: Dict[str, Any] = {}
            for key, value in raw.items():
                if key in ('task', 'model') or key.endswith('_sig'):
                    row[key] = value
                elif key == 'n':
                    row[key] = int(value)
                else:
                    row[key] = float(value) if value != "" else None
            rows.append(row)
    return rows


def load_report(path: Path) -> AggregateReport:
    with open(path) as f:
        return AggregateReport.from_dict(json.load(f))


def render_report(report: AggregateReport, title: str = "Evaluation") -> Table:
    """Rich table in the results-table layout: mean ± std with significance stars."""
    table = Table(title=title, show_header=True, header_style="bold cyan")
    table.add_column("Task", style="task", no_wrap=True)
    table.add_column("Model")
    table.add_column("n", justify="right")
    headers = {'success': "Success %", 'time': "Time s", 'path_ratio': "Path ratio",
               'force_mean': "F mean N", 'force_max': "F max N",
               'speed_mean': "v mean mm/s", 'speed_max': "v max mm/s"}
    for column, _ in METRICS:
        table.add_column(headers[column], justify="right")
    for cell in report.cells:
        comparison = report.comparison(cell.task)
        values = []
        for column, _ in METRICS:
            s = cell.metrics[column]
            if s.mean is None:
                values.append("[dim]--[/dim]")
                continue
            stars = significance_stars(comparison.tests[column].p) if comparison else ""
            scale = 100.0 if column == 'path_ratio' else 1.0
            values.append(f"{s.mean * scale:.2f} ± {s.std * scale:.2f}{stars}")
        table.add_row(cell.task, cell.model, str(cell.n), *values)
    if report.exploration_steps:
        table.caption = "exploration steps: " + ", ".join(
            f"{m}={s:,}" for m, s in report.exploration_steps.items())
    return table
