"""Tests for replay.py: episode storage, sequence sampling and the JSON Lines format."""

import json

import numpy as np
import pytest

from helpers import make_episode
from replay import (
    REPLAY_FORMAT,
    EpisodeRecord,
    InsufficientDataError,
    ReplayBuffer,
    ReplayFormatError,
    ReplayVersionError,
    ReplayWriter,
    iter_episodes,
    read_header,
    read_replay,
)


def filled_buffer(lengths, capacity=10_000, terminated=False):
    buf = ReplayBuffer(capacity)
    rng = np.random.default_rng(0)
    for i, T in enumerate(lengths):
        buf.push_episode(make_episode(T, tree_id=f"t{i}", rng=rng, terminated=terminated))
    return buf


# ---------------------------------------------------------------------------
# Episode records
# ---------------------------------------------------------------------------

class TestEpisodeRecord:
    def test_length(self):
        assert make_episode(7).length == 7

    def test_inconsistent_arrays(self):
        ep = make_episode(5)
        ep.rewards = ep.rewards[:-1]
        with pytest.raises(ReplayFormatError, match="inconsistent episode"):
            ep.validate()

    def test_too_long(self):
        with pytest.raises(ReplayFormatError, match="limit is 200"):
            make_episode(201).validate()

    def test_empty(self):
        ep = EpisodeRecord('A1', 't0', np.zeros((1, 18)), np.zeros((0, 4)), np.zeros(0))
        with pytest.raises(ReplayFormatError, match="zero transitions"):
            ep.validate()

    def test_dict_roundtrip(self):
        ep = make_episode(4, terminated=True)
        ep.augment = {'scale': [1.0, 1.1, 0.9], 'rot_x': 0.1, 'rot_y': -0.2}
        again = EpisodeRecord.from_dict(json.loads(json.dumps(ep.to_dict())))
        assert again.equals(ep)

    def test_from_dict_missing_key(self):
        data = make_episode(3).to_dict()
        del data['actions']
        with pytest.raises(ReplayFormatError, match="malformed episode"):
            EpisodeRecord.from_dict(data)


# ---------------------------------------------------------------------------
# Buffer
# ---------------------------------------------------------------------------

class TestBuffer:
    def test_push_counts_transitions(self):
        buf = filled_buffer([10, 20, 5])
        assert len(buf) == 3
        assert buf.transitions == 35

    def test_evicts_oldest_whole_episodes(self):
        buf = filled_buffer([10, 10, 10], capacity=25)
        assert len(buf) == 2
        assert buf.transitions == 20
        assert buf.evicted == 1
        assert [ep.tree_id for ep in buf.snapshot()] == ['t1', 't2']

    def test_episode_larger_than_capacity(self):
        buf = ReplayBuffer(capacity=5)
        with pytest.raises(ReplayFormatError, match="exceeds capacity"):
            buf.push_episode(make_episode(6))

    def test_invalid_capacity(self):
        with pytest.raises(ValueError):
            ReplayBuffer(capacity=0)

    def test_snapshot_is_a_copy(self):
        buf = filled_buffer([3])
        snap = buf.snapshot()
        buf.push_episode(make_episode(2))
        assert len(snap) == 1


class TestSampleSequences:
    def test_shapes(self, rng):
        buf = filled_buffer([12, 30])
        batch = buf.sample_sequences(8, 10, rng)
        assert batch.size == 8
        assert batch.length == 10
        assert batch.observations.shape == (8, 11, 18)
        assert batch.actions.shape == (8, 10, 4)
        assert batch.rewards.shape == (8, 10)
        assert np.all(batch.mask == 1.0)

    def test_sequences_come_from_one_episode(self, rng):
        buf = filled_buffer([12, 30, 15])
        episodes = buf.snapshot()
        batch = buf.sample_sequences(32, 10, rng)
        for b in range(batch.size):
            ep = episodes[batch.episode_index[b]]
            s = batch.start[b]
            np.testing.assert_array_equal(batch.observations[b], ep.observations[s:s + 11])
            np.testing.assert_array_equal(batch.actions[b], ep.actions[s:s + 10])
            np.testing.assert_array_equal(batch.rewards[b], ep.rewards[s:s + 10])
            assert batch.tasks[b] == ep.task

    def test_short_episodes_skipped(self, rng):
        buf = filled_buffer([3, 40])
        batch = buf.sample_sequences(16, 10, rng)
        assert set(batch.episode_index.tolist()) == {1}

    def test_no_long_enough_episode(self, rng):
        buf = filled_buffer([3, 4])
        with pytest.raises(InsufficientDataError):
            buf.sample_sequences(4, 10, rng)

    def test_partial_sequences_are_masked(self, rng):
        buf = filled_buffer([4], terminated=True)
        batch = buf.sample_sequences(16, 6, rng, allow_partial=True)
        for b in range(batch.size):
            n = int(batch.mask[b].sum())
            assert n == 4 - batch.start[b]
            assert np.all(batch.mask[b, n:] == 0.0)
            assert np.all(batch.actions[b, n:] == 0.0)
            # terminal done flag on the last real transition
            assert batch.dones[b, n - 1] == 1.0
            assert batch.dones[b].sum() == 1.0

    def test_truncated_episode_has_no_done(self, rng):
        buf = filled_buffer([10], terminated=False)
        batch = buf.sample_sequences(8, 10, rng)
        assert batch.dones.sum() == 0.0

    def test_done_only_at_episode_end(self, rng):
        buf = filled_buffer([20], terminated=True)
        batch = buf.sample_sequences(64, 5, rng)
        for b in range(batch.size):
            if batch.start[b] + 5 == 20:
                assert batch.dones[b, -1] == 1.0
            else:
                assert batch.dones[b].sum() == 0.0

    def test_sampling_weighted_by_length(self):
        buf = filled_buffer([10, 90])
        batch = buf.sample_sequences(2000, 5, np.random.default_rng(1))
        share = float(np.mean(batch.episode_index == 1))
        assert 0.85 < share < 0.95

    def test_seeded(self):
        buf = filled_buffer([15, 25])
        a = buf.sample_sequences(6, 5, np.random.default_rng(4))
        b = buf.sample_sequences(6, 5, np.random.default_rng(4))
        np.testing.assert_array_equal(a.observations, b.observations)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

class TestPersistence:
    def test_save_load(self, tmp_path):
        buf = filled_buffer([5, 8, 3], capacity=500)
        path = tmp_path / "replay.jsonl"
        buf.save(path)
        loaded = ReplayBuffer.load(path)
        assert loaded.capacity == 500
        assert all(a.equals(b) for a, b in zip(loaded.snapshot(), buf.snapshot()))
        assert not (tmp_path / "replay.jsonl.tmp").exists()

    def test_header_line(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        filled_buffer([2]).save(path)
        header = json.loads(path.read_text().splitlines()[0])
        assert header['format'] == REPLAY_FORMAT
        assert read_header(path)['capacity'] == 10_000

    def test_writer_appends(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        with ReplayWriter(path) as writer:
            writer.write(make_episode(3, tree_id='a'))
        with ReplayWriter(path) as writer:
            writer.write(make_episode(4, tree_id='b'))
            assert writer.count == 1
        assert [ep.tree_id for ep in iter_episodes(path)] == ['a', 'b']
        assert path.read_text().count(REPLAY_FORMAT) == 1

    def test_writer_truncates(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        with ReplayWriter(path) as writer:
            writer.write(make_episode(3))
        with ReplayWriter(path, truncate=True):
            pass
        assert list(iter_episodes(path)) == []

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        path.write_text(json.dumps({'format': 'endonav-replay/0'}) + "\n")
        with pytest.raises(ReplayVersionError):
            read_replay(path)
        with pytest.raises(ReplayVersionError):
            ReplayWriter(path)

    def test_truncated_last_line(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        filled_buffer([3, 3]).save(path)
        text = path.read_text()
        path.write_text(text[:-10])
        with pytest.raises(ReplayFormatError, match="truncated"):
            read_replay(path)

    def test_corrupt_line(self, tmp_path):
        path = tmp_path / "replay.jsonl"
        filled_buffer([3]).save(path)
        with open(path, 'a') as f:
            f.write("{broken\n")
        with pytest.raises(ReplayFormatError, match=":3: corrupt"):
            read_replay(path)
