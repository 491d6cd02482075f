import numpy as np
import pytest

from uniloco import dataset as dsm
from uniloco import sim
from uniloco.terrain import SCAN_SIZE, EpisodeOutcome

MODEL = sim.RobotModel()


def rand_state(rng, n=1):
    return sim.BatchState(
        theta=rng.normal(0, 0.3, (n, 6)),
        theta_dot=rng.normal(0, 1, (n, 6)),
        base_pos=rng.normal(0, 1, (n, 2)) + (5.0, 0.8),
        base_vel=rng.normal(0, 0.5, (n, 2)),
        pitch=rng.normal(0, 0.1, n),
        pitch_rate=rng.normal(0, 0.5, n),
    )


def make_episode(t, seed, kind="flat", n_rewards=3):
    rng = np.random.default_rng(seed)
    rec = dsm.EpisodeRecorder(MODEL, kind, difficulty=2, seed=seed)
    for _ in range(t):
        rec.record_step(
            rand_state(rng),
            rng.normal(size=sim.OBS_DIM),
            rng.normal(size=6),
            rng.normal(size=n_rewards),
        )
    return rec.close(EpisodeOutcome(True, 18.0, 18.0))


@pytest.fixture
def ds():
    return dsm.Dataset([make_episode(12, 0), make_episode(8, 1, "stair"), make_episode(20, 2)],
                       model=MODEL, seed=7, reward_names=("a", "b", "c"))


class TestRecorder:
    def test_three_frames_then_close(self):
        ep = make_episode(3, 0)
        assert ep.t == 3
        assert ep.actions.shape == (3, 6)
        assert ep.heightmap.shape == (3, SCAN_SIZE)
        assert ep.rigid_body_states.shape == (3, 5, 13)

    def test_append_after_close_rejected(self):
        rng = np.random.default_rng(0)
        rec = dsm.EpisodeRecorder(MODEL, "flat", 0, 0)
        rec.record_step(rand_state(rng), rng.normal(size=sim.OBS_DIM), np.zeros(6), np.zeros(3))
        rec.close(EpisodeOutcome(False, 1.0, 18.0, fall=True))
        with pytest.raises(RuntimeError):
            rec.record_step(rand_state(rng), rng.normal(size=sim.OBS_DIM), np.zeros(6), np.zeros(3))

    def test_reward_terms_round_trip(self):
        rng = np.random.default_rng(1)
        rec = dsm.EpisodeRecorder(MODEL, "flat", 0, 0)
        terms = np.array([0.5, -0.25, 0.125])  # exactly representable in f32
        rec.record_step(rand_state(rng), rng.normal(size=sim.OBS_DIM), np.zeros(6), terms)
        ep = rec.close(EpisodeOutcome(True, 18.0, 18.0))
        d = dsm.Dataset([ep])
        np.testing.assert_array_equal(d.episodes[0].rewards[0], terms)

    def test_scan_block_becomes_heightmap(self):
        rng = np.random.default_rng(2)
        rec = dsm.EpisodeRecorder(MODEL, "flat", 0, 0)
        obs = rng.normal(size=sim.OBS_DIM)
        rec.record_step(rand_state(rng), obs, np.zeros(6), np.zeros(1))
        ep = rec.close(EpisodeOutcome(True, 18.0, 18.0))
        np.testing.assert_array_equal(
            ep.heightmap[0], obs[sim.PROPRIO_DIM : sim.PROPRIO_DIM + SCAN_SIZE]
        )

    def test_flattened_states_match_simulator(self):
        rng = np.random.default_rng(3)
        st = rand_state(rng)
        rec = dsm.EpisodeRecorder(MODEL, "flat", 0, 0)
        rec.record_step(st, rng.normal(size=sim.OBS_DIM), np.zeros(6), np.zeros(1))
        ep = rec.close(EpisodeOutcome(True, 18.0, 18.0))
        got = dsm.flattened_states(dsm.Dataset([ep]).episodes[0])[0]
        expect = sim.flatten_state(MODEL, st)[0]
        np.testing.assert_allclose(got, expect, atol=1e-5)


class TestPersistence:
    def test_round_trip_byte_identical(self, ds, tmp_path):
        p = tmp_path / "skills.dpsk"
        ds.save(p)
        loaded = dsm.Dataset.load(p)
        assert loaded.n_episodes == 3 and loaded.n_frames == 40
        for a, b in zip(ds.episodes, loaded.episodes):
            for name in dsm.ARRAY_FIELDS:
                np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
            assert a.kind == b.kind and a.outcome == b.outcome
        loaded.save(tmp_path / "again.dpsk")
        assert p.read_bytes() == (tmp_path / "again.dpsk").read_bytes()

    def test_empty_dataset_valid(self, tmp_path):
        p = tmp_path / "empty.dpsk"
        dsm.Dataset([]).save(p)
        assert dsm.Dataset.load(p).n_episodes == 0

    def test_size_formula_oracle(self, ds, tmp_path):
        p = tmp_path / "skills.dpsk"
        ds.save(p)
        manifest = ds.manifest_text().encode()
        expect = 4 + 2 + 4 + len(manifest) + 4  # magic, version, manifest, count
        for ep in ds.episodes:
            expect += 2 + len(ep.kind) + 43 + 2  # kind, header, field count
            for name in dsm.ARRAY_FIELDS:
                arr = getattr(ep, name)
                expect += 2 + len(name) + 4 + 4 * arr.ndim + 4 * arr.size
        assert p.stat().st_size == expect

    def test_manifest_counts_and_stats(self, ds):
        text = ds.manifest_text()
        assert "episodes 3" in text and "frames 40" in text
        assert "terrain flat 2" in text and "terrain stair 1" in text

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.dpsk"
        p.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(ValueError, match="magic"):
            dsm.Dataset.load(p)

    def test_truncated_with_offset(self, ds, tmp_path):
        p = tmp_path / "x.dpsk"
        ds.save(p)
        p.write_bytes(p.read_bytes()[:-50])
        with pytest.raises(ValueError, match="truncated.*offset"):
            dsm.Dataset.load(p)

    def test_tampered_manifest_rejected(self, ds, tmp_path):
        p = tmp_path / "x.dpsk"
        ds.save(p)
        raw = bytearray(p.read_bytes())
        i = raw.find(b"frames 40")
        raw[i : i + 9] = b"frames 41"
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="manifest"):
            dsm.Dataset.load(p)


class TestWindows:
    def test_two_frame_episode_single_window(self):
        d = dsm.Dataset([make_episode(2, 5)])
        assert dsm.window_count(2, h=1) == 1
        w = dsm.sample_window(d, np.random.default_rng(0), k=1, h=1)
        assert w.offset == 0 and w.history.shape == (1, sim.STATE_DIM)
        assert w.future.shape == (1, sim.STATE_DIM)

    def test_offset_zero_pads_history_with_first_frame(self, ds):
        rng = np.random.default_rng(1)
        for _ in range(200):
            w = dsm.sample_window(ds, rng, k=4, h=2, normalized=False)
            if w.offset == 0:
                states = dsm.flattened_states(ds.episodes[w.episode])
                for row in w.history:
                    np.testing.assert_array_equal(row, states[0])
                return
        pytest.fail("offset 0 never sampled")

    def test_uniform_over_pairs(self, ds):
        rng = np.random.default_rng(2)
        h = 4
        counts = {}
        n = 20_000
        for _ in range(n):
            w = dsm.sample_window(ds, rng, k=2, h=h)
            counts[(w.episode, w.offset)] = counts.get((w.episode, w.offset), 0) + 1
        total_pairs = sum(dsm.window_count(ep.t, h) for ep in ds.episodes)
        expect = n / total_pairs
        sigma = np.sqrt(n * (1 / total_pairs) * (1 - 1 / total_pairs))
        assert len(counts) == total_pairs
        for c in counts.values():
            assert abs(c - expect) <= 4 * sigma

    def test_no_window_crosses_episode_boundary(self, ds):
        rng = np.random.default_rng(3)
        for _ in range(500):
            w = dsm.sample_window(ds, rng, k=3, h=5)
            assert w.offset + 5 <= ds.episodes[w.episode].t - 1

    def test_horizon_too_long_rejected(self):
        d = dsm.Dataset([make_episode(3, 6)])
        with pytest.raises(ValueError):
            dsm.sample_window(d, np.random.default_rng(0), k=1, h=10)

    def test_normalization_invertible(self, ds):
        rng = np.random.default_rng(4)
        states = dsm.flattened_states(ds.episodes[0])
        back = ds.denormalize(ds.normalize(states))
        np.testing.assert_allclose(back, states, atol=1e-9)
        _ = rng


class TestSubset:
    def test_full_fraction_identical(self, ds):
        sub = dsm.subset(ds, 1.0, np.random.default_rng(0))
        assert sub.n_episodes == ds.n_episodes and sub.n_frames == ds.n_frames

    def test_fraction_hits_target_within_one_episode(self):
        eps = [make_episode(10, s) for s in range(40)]
        d = dsm.Dataset(eps)
        sub = dsm.subset(d, 0.25, np.random.default_rng(1))
        assert abs(sub.n_frames - 100) <= 10

    def test_deterministic_per_seed(self, ds):
        a = dsm.subset(ds, 0.5, np.random.default_rng(2))
        b = dsm.subset(ds, 0.5, np.random.default_rng(2))
        assert [id(e) for e in a.episodes] == [id(e) for e in b.episodes]

    def test_invalid_fraction(self, ds):
        for frac in (0.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                dsm.subset(ds, frac, np.random.default_rng(0))

    def test_stats_recomputed(self):
        eps = [make_episode(10, s) for s in range(6)]
        d = dsm.Dataset(eps)
        sub = dsm.subset(d, 0.34, np.random.default_rng(3))
        manual = dsm.Dataset(sub.episodes)
        np.testing.assert_array_equal(sub.state_mean, manual.state_mean)
