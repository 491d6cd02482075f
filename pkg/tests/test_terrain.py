import numpy as np
import pytest

from uniloco import terrain as tr


def make_field(kind, difficulty=None, seed=0):
    spec = tr.TerrainSpec.for_kind(kind)
    if difficulty is None:
        difficulty = spec.max_terrain_level
    return tr.generate_heightfield(spec, difficulty, seed)


class TestCurriculum:
    def test_difficulty_zero_returns_p0_exactly(self):
        rng = np.random.default_rng(0)
        r = tr.ParamRange(0.15, 0.30)
        for _ in range(100):
            assert tr.sample_curriculum_param(r, 0, 9, rng) == 0.15

    def test_max_difficulty_spans_full_range(self):
        rng = np.random.default_rng(1)
        r = tr.ParamRange(0.15, 0.30)
        vals = [tr.sample_curriculum_param(r, 9, 9, rng) for _ in range(10_000)]
        assert min(vals) >= 0.15 and max(vals) <= 0.30

    def test_decreasing_range_draws_between_endpoints(self):
        # c = -0.2 -> u in [-0.2, 0]; all samples stay inside [0.4, 0.6]
        rng = np.random.default_rng(2)
        r = tr.ParamRange(0.6, 0.4)
        vals = np.array([tr.sample_curriculum_param(r, 9, 9, rng) for _ in range(10_000)])
        assert vals.min() >= 0.4 and vals.max() <= 0.6

    def test_all_table_rows_at_all_levels(self):
        rng = np.random.default_rng(3)
        max_level = 9
        for kind in tr.SINGLE_KINDS + tr.UNSEEN_KINDS:
            for name, r in tr.default_params(kind).items():
                for level in range(max_level + 1):
                    c = (r.p1 - r.p0) / max_level * level
                    lo, hi = min(r.p0, r.p0 + c), max(r.p0, r.p0 + c)
                    vals = np.array(
                        [tr.sample_curriculum_param(r, level, max_level, rng) for _ in range(50)]
                    )
                    assert (vals >= lo - 1e-12).all() and (vals <= hi + 1e-12).all()

    def test_monotone_envelope(self):
        # for increasing ranges the attainable maximum grows with difficulty
        r = tr.ParamRange(0.15, 0.30)
        bounds = [r.p0 + (r.p1 - r.p0) / 9 * d for d in range(10)]
        assert all(b2 >= b1 for b1, b2 in zip(bounds, bounds[1:]))

    def test_invalid_difficulty_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            tr.sample_curriculum_param(tr.ParamRange(0, 1), 10, 9, rng)
        with pytest.raises(ValueError):
            tr.sample_curriculum_param(tr.ParamRange(0, 1), -1, 9, rng)


class TestGeneration:
    @pytest.mark.parametrize("kind", tr.KINDS)
    def test_deterministic_bit_identical(self, kind):
        a = make_field(kind, seed=1234)
        b = make_field(kind, seed=1234)
        assert np.array_equal(a.heights, b.heights)
        assert np.array_equal(a.walkable, b.walkable)

    def test_flat_is_all_zero(self):
        f = make_field("flat", difficulty=4)
        assert not f.heights.any()
        assert f.walkable.all()

    def test_stair_geometry(self):
        f = make_field("stair", seed=7)
        mid = f.heights[:, f.heights.shape[1] // 2]
        steps = np.diff(mid)
        rises = steps[steps > 1e-9]
        assert 5 <= rises.size <= 10
        assert (rises >= 0.15 - 1e-9).all() and (rises <= 0.30 + 1e-9).all()

    def test_slope_bridge_amplitude(self):
        for seed in range(5):
            f = make_field("slope_bridge", seed=seed)
            span = f.heights[f.walkable].max() - f.heights[f.walkable].min()
            assert 1.5 - 1e-9 <= span <= 2.5 + 1e-9

    def test_gap_has_void_cells(self):
        f = make_field("gap", seed=3)
        assert (~f.walkable).any()
        assert (f.heights[~f.walkable] == tr.VOID_DEPTH).all()

    def test_bridge_strip_width(self):
        spec = tr.TerrainSpec.for_kind("bridge")
        f = tr.generate_heightfield(spec, spec.max_terrain_level, seed=11)
        mid_row = f.walkable[f.walkable.shape[0] // 2]
        width = mid_row.sum() * spec.cell_m
        assert 0.15 <= width <= 0.55  # sampled strip plus one cell of quantization

    def test_multistage_length_and_continuity(self):
        spec = tr.TerrainSpec.for_kind("stage4")
        f = tr.generate_heightfield(spec, 5, seed=2)
        assert f.length_m > 9.0 * 5  # five segments plus junction platforms
        assert np.isfinite(f.heights).all()

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            tr.TerrainSpec(kind="volcano")

    def test_bad_difficulty_rejected(self):
        spec = tr.TerrainSpec.for_kind("flat")
        with pytest.raises(ValueError):
            tr.generate_heightfield(spec, spec.max_terrain_level + 1, seed=0)


class TestRoughness:
    def test_zero_difficulty_unchanged(self):
        f = make_field("flat")
        g = tr.add_base_roughness(f, 0.0, np.random.default_rng(0))
        assert np.array_equal(f.heights, g.heights)

    def test_full_difficulty_bounded(self):
        f = tr.HeightField(heights=np.zeros((1000, 1000)), cell_m=0.05)
        g = tr.add_base_roughness(f, 1.0, np.random.default_rng(1))
        assert np.abs(g.heights).max() <= 0.05

    def test_half_difficulty_std_matches_uniform_oracle(self):
        # uniform on [-a, a] has std a / sqrt(3); here a = 0.025
        f = tr.HeightField(heights=np.zeros((1000, 1000)), cell_m=0.05)
        g = tr.add_base_roughness(f, 0.5, np.random.default_rng(2))
        expect = 0.025 / np.sqrt(3.0)
        assert abs(g.heights.std() - expect) / expect < 0.05

    def test_void_cells_untouched(self):
        f = make_field("gap", seed=5)
        g = tr.add_base_roughness(f, 1.0, np.random.default_rng(3))
        assert np.array_equal(f.heights[~f.walkable], g.heights[~g.walkable])


class TestScan:
    def test_flat_field_reports_negative_base_height(self):
        f = tr.HeightField(heights=np.zeros((400, 80)), cell_m=0.05)
        scan = tr.egocentric_scan(f, (5.0, 2.0, 0.0), base_z=0.8)
        assert scan.shape == (396,)
        np.testing.assert_allclose(scan, -0.8)

    def test_void_cells_return_sentinel(self):
        f = make_field("gap", seed=3)
        # place the base just before the first gap
        first_gap_row = np.argmin(f.walkable[:, f.walkable.shape[1] // 2])
        x = first_gap_row * f.cell_m - 0.1
        scan = tr.egocentric_scan(f, (x, f.width_m / 2, 0.0), base_z=0.8)
        assert (scan == tr.VOID_SENTINEL).any()

    def test_matches_direct_lookup_oracle(self):
        f = make_field("stair", seed=9)
        pose = (4.0, 2.0, 0.3)
        base_z = 1.1
        scan = tr.egocentric_scan(f, pose, base_z)
        x, y, yaw = pose
        k = 0
        for dx in tr.SCAN_X:
            for dy in tr.SCAN_Y:
                px = x + np.cos(yaw) * dx - np.sin(yaw) * dy
                py = y + np.sin(yaw) * dx + np.cos(yaw) * dy
                i = int(np.clip((px - f.origin[0]) / f.cell_m, 0, f.heights.shape[0] - 1))
                j = int(np.clip((py - f.origin[1]) / f.cell_m, 0, f.heights.shape[1] - 1))
                expect = f.heights[i, j] - base_z if f.walkable[i, j] else tr.VOID_SENTINEL
                assert scan[k] == expect
                k += 1

    def test_whole_cell_translation_invariance(self):
        f = make_field("stair", seed=9)
        shift = (10 * f.cell_m, 4 * f.cell_m)
        g = tr.HeightField(
            heights=f.heights,
            cell_m=f.cell_m,
            origin=(f.origin[0] + shift[0], f.origin[1] + shift[1]),
            walkable=f.walkable,
        )
        a = tr.egocentric_scan(f, (4.0, 2.0, 0.2), base_z=1.0)
        b = tr.egocentric_scan(g, (4.0 + shift[0], 2.0 + shift[1], 0.2), base_z=1.0)
        assert np.array_equal(a, b)


class TestMetrics:
    def test_all_success(self):
        outs = [tr.EpisodeOutcome(True, 18.0, 18.0) for _ in range(4)]
        assert tr.episode_metrics(outs) == (1.0, 1.0)

    def test_half_distance_fall(self):
        outs = [tr.EpisodeOutcome(False, 9.0, 18.0, fall=True)]
        assert tr.episode_metrics(outs) == (0.0, 0.5)

    def test_mixed_hand_computed(self):
        outs = [
            tr.EpisodeOutcome(True, 18.0, 18.0),
            tr.EpisodeOutcome(False, 4.5, 18.0, fall=True),
        ]
        r_succ, r_cmp = tr.episode_metrics(outs)
        assert r_succ == 0.5
        assert r_cmp == 0.625

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tr.episode_metrics([])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        f = make_field("gap_bridge", seed=21)
        path = tmp_path / "field.hfld"
        f.save(path)
        g = tr.HeightField.load(path)
        np.testing.assert_array_equal(f.heights.astype(np.float32), g.heights.astype(np.float32))
        assert np.array_equal(f.walkable, g.walkable)
        assert g.cell_m == f.cell_m
        # second save is byte-identical
        g.save(tmp_path / "field2.hfld")
        assert (tmp_path / "field.hfld").read_bytes() == (tmp_path / "field2.hfld").read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.hfld"
        p.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ValueError, match="magic"):
            tr.HeightField.load(p)

    def test_truncated(self, tmp_path):
        f = make_field("flat")
        p = tmp_path / "x.hfld"
        f.save(p)
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(ValueError, match="truncated"):
            tr.HeightField.load(p)
