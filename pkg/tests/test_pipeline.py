"""Tests for pipeline.py and the endonav CLI: configuration, manifest, stages and exit codes."""

import json

import pytest

from endonav import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from env import EpisodeConfig, TaskId
from evalharness import aggregate, load_report, write_report
from helpers import make_episode, make_metrics, tiny_sac_config, tiny_tdmpc_config
from pipeline import (
    SEED_ENV_VAR,
    AnatomyConfig,
    ConfigError,
    RunConfig,
    RunManifest,
    StageConfig,
    StageError,
    ablation_arms,
    check_holdout,
    cmd_ablate_augmentation,
    cmd_eval,
    cmd_gen_anatomy,
    cmd_pretrain,
    cmd_train,
    load_split,
    make_agent,
    stage_tasks,
)
from replay import ReplayWriter, iter_episodes
from rollout import LoopConfig


def make_cfg(tmp_path, source='toy', count=3, holdout=1, **kwargs) -> RunConfig:
    cfg = RunConfig(
        out_dir=str(tmp_path / "run"),
        seed=3,
        anatomy=AnatomyConfig(source=source, count=count, holdout=holdout),
        episode=EpisodeConfig(max_steps=10),
        sac=tiny_sac_config(n_tasks=5),
        tdmpc2=tiny_tdmpc_config(),
        stages=StageConfig(
            tasks=['A2L'], pretrain_steps=30, prefill_episodes=2, train_steps=30,
            replay_capacity=10_000, eval_episodes=1,
            pretrain_loop=LoopConfig(warmup_steps=10, update_every=10, snapshot_every=1000),
            train_loop=LoopConfig(warmup_steps=0, update_every=10, snapshot_every=1000),
        ),
        **kwargs,
    )
    return cfg.validate()


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestRunConfig:
    def test_defaults_validate(self):
        cfg = RunConfig.load()
        assert cfg.seed == 0
        assert cfg.sac.n_tasks == len(TaskId)

    def test_dict_roundtrip(self, tmp_path):
        cfg = make_cfg(tmp_path)
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            RunConfig.from_dict({'seeds': 3})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="sac: unknown key"):
            RunConfig.from_dict({'sac': {'lr': 1e-3, 'learning_rate': 1e-3}})

    def test_unknown_loop_key(self):
        with pytest.raises(ConfigError, match="stages.train_loop"):
            RunConfig.from_dict({'stages': {'train_loop': {'warmup': 5}}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_path / "missing.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            RunConfig.load(path)

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "42")
        assert RunConfig.load(write_config(tmp_path, {'seed': 1})).seed == 42

    def test_bad_seed_environment(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "abc")
        with pytest.raises(ConfigError, match=SEED_ENV_VAR):
            RunConfig.load()

    def test_layered_over_full_profile(self, tmp_path):
        path = write_config(tmp_path, {'stages': {'eval_episodes': 3}})
        cfg = RunConfig.load(path, base=RunConfig.full_profile())
        assert cfg.stages.eval_episodes == 3
        assert cfg.stages.train_steps == 10_000_000
        assert cfg.episode.augment

    @pytest.mark.parametrize("data,match", [
        ({'anatomy': {'count': 5, 'holdout': 5}}, "training"),
        ({'anatomy': {'count': 5, 'holdout': 6}}, "split"),
        ({'anatomy': {'source': 'scans'}}, "anatomy.source"),
        ({'stages': {'tasks': ['A9']}}, "stages.tasks"),
        ({'stages': {'replay_capacity': 0}}, "replay_capacity"),
        ({'sac': {'n_tasks': 1}}, "n_tasks"),
        ({'parallel': 0}, "parallel"),
        ({'tdmpc2': {'ensemble': 1}}, "tdmpc2"),
    ])
    def test_validation(self, tmp_path, data, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.load(write_config(tmp_path, data))

    def test_missing_anatomy_files(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            AnatomyConfig(source='files', train_files=[str(tmp_path / "a.json")]).validate()

    def test_holdout_file_listed_for_training(self, anatomy_file):
        with pytest.raises(ConfigError, match="hold-out"):
            AnatomyConfig(source='files', train_files=[str(anatomy_file)],
                          holdout_files=[str(anatomy_file)]).validate()


class TestAblationArms:
    def test_differ_only_in_augmentation(self, tmp_path):
        on, off = ablation_arms(make_cfg(tmp_path))
        assert on.episode.augment and not off.episode.augment
        a, b = on.to_dict(), off.to_dict()
        a['episode'].pop('augment')
        b['episode'].pop('augment')
        assert a == b


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

class TestManifest:
    def test_stage_success(self, tmp_path):
        cfg = make_cfg(tmp_path)
        manifest = RunManifest.open(cfg)
        with manifest.stage('gen-anatomy', seed=3) as rec:
            rec.progress['n'] = 1
        again = RunManifest.read(cfg.out)
        assert again.stages['gen-anatomy'].status == "done"
        assert again.stages['gen-anatomy'].seed == 3
        assert again.stages['gen-anatomy'].seconds >= 0.0
        assert again.config == json.loads(json.dumps(cfg.to_dict()))

    def test_stage_failure(self, tmp_path):
        manifest = RunManifest.open(make_cfg(tmp_path))
        with pytest.raises(StageError, match="boom"):
            with manifest.stage('pretrain'):
                raise RuntimeError("boom")
        rec = RunManifest.read(manifest.out_dir).stages['pretrain']
        assert rec.status == "failed"
        assert "RuntimeError" in rec.message

    def test_artifacts_move_between_stages(self, tmp_path):
        manifest = RunManifest.open(make_cfg(tmp_path))
        path = manifest.out_dir / "checkpoints" / "sac.npz"
        manifest.add_artifact('train-sac', path)
        manifest.add_artifact('ablate-sac-aug', path)
        assert manifest.stages['train-sac'].artifacts == []
        assert manifest.artifacts() == ["checkpoints/sac.npz"]

    def test_reopen_keeps_stages(self, tmp_path):
        cfg = make_cfg(tmp_path)
        with RunManifest.open(cfg).stage('gen-anatomy'):
            pass
        assert RunManifest.open(cfg).stages['gen-anatomy'].status == "done"


# ---------------------------------------------------------------------------
# Anatomy stage
# ---------------------------------------------------------------------------

class TestGenAnatomy:
    def test_split_sizes(self, tmp_path):
        cfg = make_cfg(tmp_path, count=15, holdout=5)
        split = cmd_gen_anatomy(cfg, RunManifest.open(cfg))
        assert len(split['train']) == 10
        assert len(split['holdout']) == 5
        assert not set(split['train']) & set(split['holdout'])
        train, holdout = load_split(cfg)
        assert sorted(train) == split['train']
        assert len(RunManifest.read(cfg.out).stages['gen-anatomy'].artifacts) == 16

    def test_zero_count(self, tmp_path):
        cfg = make_cfg(tmp_path, count=0, holdout=0)
        split = cmd_gen_anatomy(cfg, RunManifest.open(cfg))
        assert split == {'train': [], 'holdout': []}

    def test_seeded(self, tmp_path):
        texts = []
        for name in ("a", "b"):
            cfg = make_cfg(tmp_path / name)
            cmd_gen_anatomy(cfg, RunManifest.open(cfg))
            texts.append([(cfg.out / "anatomy" / f"anat-{i:02d}.json").read_text() for i in range(3)]
                         + [(cfg.out / "anatomy" / "split.json").read_text()])
        assert texts[0] == texts[1]

    def test_synthetic_arches(self, tmp_path):
        cfg = make_cfg(tmp_path, source='synthetic', count=2, holdout=1)
        cmd_gen_anatomy(cfg, RunManifest.open(cfg))
        train, holdout = load_split(cfg)
        for tree in list(train.values()) + list(holdout.values()):
            assert 'aorta' in tree.branches
            assert len(tree.landmarks) > 0

    def test_imported_files(self, tmp_path, y_tree_document):
        a, b = tmp_path / "left_a.json", tmp_path / "held_b.json"
        a.write_text(json.dumps(y_tree_document))
        b.write_text(json.dumps(y_tree_document))
        cfg = make_cfg(tmp_path)
        cfg.anatomy = AnatomyConfig(source='files', train_files=[str(a)], holdout_files=[str(b)])
        split = cmd_gen_anatomy(cfg.validate(), RunManifest.open(cfg))
        assert split == {'train': ['left_a'], 'holdout': ['held_b']}

    def test_split_missing(self, tmp_path):
        with pytest.raises(StageError, match="gen-anatomy"):
            load_split(make_cfg(tmp_path))

    def test_stage_tasks_on_toy_anatomies(self, tmp_path):
        cfg = make_cfg(tmp_path)
        cfg.stages.tasks = [t.value for t in TaskId]
        cmd_gen_anatomy(cfg, RunManifest.open(cfg))
        train, _ = load_split(cfg)
        assert stage_tasks(cfg, train) == [TaskId.A2L]


# ---------------------------------------------------------------------------
# Training guards
# ---------------------------------------------------------------------------

class TestTrainingGuards:
    def test_unknown_algorithm(self, tmp_path, rng):
        with pytest.raises(ConfigError, match="unknown algorithm"):
            make_agent(make_cfg(tmp_path), 'ppo', rng)

    def test_train_needs_prefill(self, tmp_path):
        cfg = make_cfg(tmp_path)
        cmd_gen_anatomy(cfg, RunManifest.open(cfg))
        with pytest.raises(StageError, match="pretrain"):
            cmd_train(cfg, RunManifest.open(cfg), 'sac')

    def test_eval_needs_checkpoints(self, tmp_path):
        cfg = make_cfg(tmp_path)
        with pytest.raises(StageError, match="no trained checkpoints"):
            cmd_eval(cfg, RunManifest.open(cfg))

    def test_eval_compares_at_most_two(self, tmp_path):
        cfg = make_cfg(tmp_path)
        checkpoints = {name: tmp_path / f"{name}.npz" for name in ('a', 'b', 'c')}
        with pytest.raises(ConfigError, match="at most two"):
            cmd_eval(cfg, RunManifest.open(cfg), checkpoints)

    def test_holdout_leak_detected(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        with ReplayWriter(path) as writer:
            writer.write(make_episode(3, tree_id='anat-00'))
            writer.write(make_episode(3, tree_id='anat-02'))
        check_holdout(path, ['anat-01'])
        with pytest.raises(StageError, match="anat-02"):
            check_holdout(path, ['anat-02'])


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

class TestCli:
    def test_config_error_exit_code(self, tmp_path):
        path = write_config(tmp_path, {'bogus': 1})
        assert main(['-c', str(path), 'status']) == EXIT_CONFIG

    def test_gen_anatomy_and_status(self, tmp_path):
        path = write_config(tmp_path, {'anatomy': {'source': 'toy'}})
        out = str(tmp_path / "run")
        assert main(['-c', str(path), '-o', out, 'gen-anatomy', '--count', '4', '--holdout', '1']) == EXIT_OK
        split = json.loads((tmp_path / "run" / "anatomy" / "split.json").read_text())
        assert len(split['train']) == 3
        assert main(['-o', out, 'status']) == EXIT_OK

    def test_seed_flag(self, tmp_path):
        path = write_config(tmp_path, {'anatomy': {'source': 'toy', 'count': 2, 'holdout': 1}})
        out = tmp_path / "run"
        assert main(['-c', str(path), '-o', str(out), '--seed', '9', 'gen-anatomy']) == EXIT_OK
        assert RunManifest.read(out).seed == 9

    def test_stage_error_exit_code(self, tmp_path):
        path = write_config(tmp_path, {'anatomy': {'source': 'toy', 'count': 2, 'holdout': 1}})
        out = str(tmp_path / "run")
        main(['-c', str(path), '-o', out, 'gen-anatomy'])
        assert main(['-c', str(path), '-o', out, 'train', '--algo', 'sac']) == EXIT_STAGE

    def test_bad_checkpoint_argument(self, tmp_path):
        assert main(['-o', str(tmp_path / "run"), 'eval', '--checkpoint', 'no-equals']) == EXIT_CONFIG

    def test_report_command(self, tmp_path):
        report = aggregate('sac', [make_metrics('A1', s) for s in range(3)])
        path = write_report(report, tmp_path / "report.json", 'json')
        csv_path = tmp_path / "table.csv"
        assert main(['report', str(path), '--csv', str(csv_path)]) == EXIT_OK
        assert csv_path.read_text().startswith("task,model,n,success")

    def test_unknown_algo_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            main(['train', '--algo', 'ppo'])


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.timeout(0)
class TestToyPipeline:
    def test_full_run(self, tmp_path):
        cfg = make_cfg(tmp_path)
        manifest = RunManifest.open(cfg)
        split = cmd_gen_anatomy(cfg, manifest)
        prefill = cmd_pretrain(cfg, manifest)
        episodes = list(iter_episodes(prefill))
        assert len(episodes) == 2
        assert all(ep.tree_id in split['train'] for ep in episodes)

        for algo in ('sac', 'tdmpc2'):
            assert cmd_train(cfg, manifest, algo).exists()
        report = cmd_eval(cfg, manifest)
        assert report.models == ['sac', 'tdmpc2']
        assert report.comparison('A2L') is not None
        assert (cfg.out / "report.csv").exists()
        assert load_report(cfg.out / "report.json").models == ['sac', 'tdmpc2']

        stages = RunManifest.read(cfg.out).stages
        for name in ('gen-anatomy', 'pretrain', 'train-sac', 'train-tdmpc2', 'eval'):
            assert stages[name].status == "done"
        assert stages['train-sac'].progress['exploration_steps'] >= 30

    def test_same_seed_same_report(self, tmp_path):
        tables = []
        for name in ("first", "second"):
            cfg = make_cfg(tmp_path / name)
            manifest = RunManifest.open(cfg)
            cmd_gen_anatomy(cfg, manifest)
            cmd_pretrain(cfg, manifest)
            cmd_train(cfg, manifest, 'sac')
            cmd_eval(cfg, manifest)
            tables.append((cfg.out / "report.csv").read_text())
        assert tables[0] == tables[1]

    def test_augmentation_ablation(self, tmp_path):
        cfg = make_cfg(tmp_path)
        manifest = RunManifest.open(cfg)
        cmd_gen_anatomy(cfg, manifest)
        cmd_pretrain(cfg, manifest)
        report = cmd_ablate_augmentation(cfg, manifest, 'sac')
        assert report.models == ['sac+aug', 'sac-noaug']
        assert report.comparison('A2L') is not None
        assert (cfg.out / "ablation.csv").exists()
        stages = RunManifest.read(cfg.out).stages
        for name in ('ablate-sac-aug', 'ablate-sac-noaug', 'ablate-aug'):
            assert stages[name].status == "done"
