"""Acceptance gates for the full pipeline, one test per criterion.

Each test states its numeric tolerance and compute budget inline. The long
runs (planner learnability, specialist sanity, the end-to-end pipeline, the
scaling trend) share session fixtures so training work is not repeated.
"""

import hashlib
import time

import numpy as np
import pytest

from test_nn import fd_gradcheck

from uniloco import cli, dataset as dsm, diffusion as df, nn, ppo, sim, terrain, unified
from uniloco.nn import Tensor

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# 1. Curriculum sampling exactness
# ---------------------------------------------------------------------------


class TestCurriculumSampling:
    def test_all_rows_in_range_and_level_zero_bit_exact(self):
        # 1e4 draws per (row, level); every draw inside the interpolated
        # interval, level 0 returning the easy endpoint bit-exactly. < 10 s.
        t0 = time.time()
        rng = RNG(0)
        max_level = 9
        for kind in terrain.SINGLE_KINDS + terrain.UNSEEN_KINDS:
            for name, pr in terrain.default_params(kind).items():
                for level in range(max_level + 1):
                    draws = np.array([
                        terrain.sample_curriculum_param(pr, level, max_level, rng)
                        for _ in range(10_000)
                    ])
                    c = (pr.p1 - pr.p0) / max_level * level
                    lo, hi = pr.p0 + min(0.0, c), pr.p0 + max(0.0, c)
                    assert draws.min() >= lo and draws.max() <= hi, (kind, name, level)
                    if level == 0:
                        assert (draws == pr.p0).all(), (kind, name)
        assert time.time() - t0 < 10.0


# ---------------------------------------------------------------------------
# 2. Terrain determinism and geometry
# ---------------------------------------------------------------------------

# Frozen digests of generate_heightfield(kind, difficulty=3, seed=42); any
# change to the generators is a deliberate, visible act.
GOLDEN_FIELDS = {
    "flat": "32352681bff2dbb3",
    "uneven": "51051bc251873b0f",
    "stair": "c8822c6594008e2f",
    "gap": "d132dee9ad7849c8",
    "bridge": "89c425731f68a7e3",
    "parkour": "1186cc248ea25ca9",
    "gap_bridge": "7c31f3291d05c472",
    "slope_bridge": "1baec127d6b0f330",
    "wave_gap": "dfe62fb63f16405c",
    "wave_bridge": "94c0f92f84dc495c",
    "stage1": "17158f51cab1f69a",
    "stage2": "e7355e2fcd03cddd",
    "stage3": "166e4239f7d6298e",
    "stage4": "8276b2a0bb4cc71f",
}


class TestTerrainDeterminism:
    def test_all_fourteen_kinds_regenerate_bit_identically(self):
        t0 = time.time()
        assert set(GOLDEN_FIELDS) == set(terrain.KINDS) and len(terrain.KINDS) == 14
        for kind, want in GOLDEN_FIELDS.items():
            f = terrain.generate_heightfield(terrain.TerrainSpec.for_kind(kind), 3, 42)
            got = hashlib.sha256(f.heights.tobytes() + f.walkable.tobytes()).hexdigest()[:16]
            assert got == want, kind
        assert time.time() - t0 < 30.0

    def test_slope_bridge_amplitude_range(self):
        assert terrain.default_params("slope_bridge")["amplitude"] == \
            terrain.ParamRange(1.5, 2.5)
        # measured: hardest level's walkable profile swings by at most
        # twice the 2.5 m amplitude cap
        for seed in range(5):
            spec = terrain.TerrainSpec.for_kind("slope_bridge")
            f = terrain.generate_heightfield(spec, 9, seed)
            mid = f.heights[:, f.heights.shape[1] // 2]
            on = f.walkable[:, f.walkable.shape[1] // 2]
            span = mid[on].max() - mid[on].min()
            assert span <= 2 * 2.5 + 1e-9

    def test_base_roughness_bounded_by_5cm(self):
        spec = terrain.TerrainSpec.for_kind("flat")
        f = terrain.generate_heightfield(spec, 0, 0)
        for seed in range(10):
            rough = terrain.add_base_roughness(f, 1.0, RNG(seed))
            assert np.abs(rough.heights - f.heights).max() <= 0.05 + 1e-12


# ---------------------------------------------------------------------------
# 3. Gradient integrity: every layer type and every training loss
# ---------------------------------------------------------------------------


def _tiny_planner_cfg(**kw):
    base = dict(k=2, h=2, n_steps=5, width=16, n_blocks=1, n_heads=2,
                terrain_embed=8, i1=0, i2=1)
    base.update(kw)
    return df.PlannerConfig(**base)


class TestGradientIntegrity:
    # relative error <= 1e-4 against central finite differences throughout

    @pytest.mark.parametrize(
        "build",
        [
            lambda rng: (nn.Dense(4, 3, rng, act="tanh"), lambda m, x: m(x)),
            lambda rng: (nn.Dense(4, 3, rng, act="elu"), lambda m, x: m(x)),
            lambda rng: (nn.MLP([4, 6, 3], rng, act="elu"), lambda m, x: m(x)),
            lambda rng: (nn.LayerNorm(4), lambda m, x: m(x)),
            lambda rng: (nn.GRUCell(4, 5, rng), lambda m, x: m(x, Tensor(np.zeros((2, 5))))),
            lambda rng: (nn.AttentionBlock(4, 2, rng), lambda m, x: m(x.reshape(2, 1, 4))),
        ],
        ids=["dense-tanh", "dense-elu", "mlp", "layernorm", "gru", "attention"],
    )
    def test_every_layer(self, build):
        rng = RNG(5)
        module, apply = build(rng)
        x = Tensor(rng.standard_normal((2, 4)) * 0.5, requires_grad=True)
        weights = Tensor(rng.standard_normal(100))
        params = dict(module.parameters())
        params["__input__"] = x

        def make_loss():
            out = apply(module, x)
            flat = out.reshape(out.size)
            return (flat * weights[: out.size]).sum()

        fd_gradcheck(make_loss, params, tol=1e-4)

    def test_embedding_layer(self):
        rng = RNG(6)
        emb = nn.Embedding(5, 3, rng)
        idx = np.array([0, 2, 2, 4])
        weights = Tensor(rng.standard_normal((4, 3)))

        def make_loss():
            return (emb(idx) * weights).sum()

        fd_gradcheck(make_loss, emb.parameters(), tol=1e-4)

    def test_clipped_surrogate_loss(self):
        rng = RNG(7)
        cfg = ppo.PPOConfig()
        policy = ppo.SpecialistPolicy(rng, cfg, hist_hidden=8, scan_dims=(8, 8),
                                      trunk_dims=(8, 8))
        n = 3
        obs = rng.standard_normal((n, sim.OBS_DIM)) * 0.3
        acts = rng.standard_normal((n, 6)) * 0.3
        logp_old = rng.standard_normal(n) * 0.1
        adv = rng.standard_normal(n)
        rets = rng.standard_normal(n)

        def make_loss():
            mu, v = policy.mean_value(Tensor(obs))
            std = policy.std()
            z = (Tensor(acts) - mu) / std
            logp = (z ** 2.0).sum(axis=-1) * (-0.5) - std.log().sum() \
                - 0.5 * 6 * np.log(2 * np.pi)
            ratio = (logp - Tensor(logp_old)).exp()
            clipped = ratio.minimum(1.0 + cfg.clip).maximum(1.0 - cfg.clip)
            surr = (ratio * Tensor(adv)).minimum(clipped * Tensor(adv))
            entropy = std.log().sum() + 0.5 * 6 * np.log(2 * np.pi * np.e)
            v_err = v - Tensor(rets)
            return -surr.mean() + (v_err ** 2.0).mean() * 0.5 - entropy * cfg.entropy_coef

        full = policy.parameters()
        subset = {k: p for k, p in full.items()
                  if k.startswith(("actor.layers.2", "critic.layers.2", "log_std"))}
        assert subset
        fd_gradcheck(make_loss, subset, tol=1e-4)

    def test_denoising_mse_loss(self):
        rng = RNG(8)
        cfg = _tiny_planner_cfg()
        net = df.DenoiserNet(cfg, rng)
        b = 3
        x0 = rng.standard_normal((b, cfg.h, cfg.state_dim)) * 0.5
        x_noisy = rng.standard_normal((b, cfg.h, cfg.state_dim)) * 0.5
        hist = rng.standard_normal((b, cfg.k, cfg.state_dim)) * 0.5
        scan = rng.standard_normal((b, terrain.SCAN_SIZE)) * 0.2
        steps = np.array([1, 3, 5])
        mask = np.array([1.0, 0.0, 1.0])[:, None]

        def make_loss():
            cond = net.terrain_embedding(scan)
            null = net.null_embed.reshape(1, cfg.terrain_embed) * Tensor(np.ones((b, 1)))
            embed = null * Tensor(mask) + cond * Tensor(1.0 - mask)
            pred = net(x_noisy, hist, embed, steps)
            return ((pred - Tensor(x0)) ** 2.0).mean()

        full = net.parameters()
        subset = {k: p for k, p in full.items()
                  if k in ("out_proj.b", "null_embed", "in_proj.b", "hist_proj.b")}
        assert len(subset) == 4
        fd_gradcheck(make_loss, subset, tol=1e-4)

    def test_least_squares_discriminator_loss(self):
        rng = RNG(9)
        disc = unified.Discriminator(rng)
        n = 4
        ps = rng.standard_normal((n, sim.STATE_DIM)) * 0.5
        ps2 = rng.standard_normal((n, sim.STATE_DIM)) * 0.5
        qs = rng.standard_normal((n, sim.STATE_DIM)) * 0.5
        qs2 = rng.standard_normal((n, sim.STATE_DIM)) * 0.5

        def make_loss():
            d_plan = disc.score_t(ps, ps2)
            d_pol = disc.score_t(qs, qs2)
            return ((d_plan - 1.0) ** 2.0).mean() + ((d_pol + 1.0) ** 2.0).mean()

        full = disc.parameters()
        subset = {k: p for k, p in full.items() if k.startswith("net.layers.2")}
        assert subset
        fd_gradcheck(make_loss, subset, tol=1e-4)


# ---------------------------------------------------------------------------
# 4. Advantage estimator against the brute-force double sum
# ---------------------------------------------------------------------------


class TestAdvantageOracle:
    def test_thousand_random_episodes_match_double_sum(self):
        # adv_t = sum_l (gamma*lam)^l * delta_{t+l}, truncated at the first
        # done; agreement within 1e-10
        rng = RNG(11)
        for _ in range(1000):
            t = int(rng.integers(1, 21))
            r = rng.standard_normal(t)
            v = rng.standard_normal(t + 1)
            d = rng.random(t) < 0.2
            gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)
            adv, ret = ppo.gae(r, v, d, gamma, lam)
            want = np.zeros(t)
            for i in range(t):
                acc, disc_ = 0.0, 1.0
                for j in range(i, t):
                    nonterm = 0.0 if d[j] else 1.0
                    delta = r[j] + gamma * v[j + 1] * nonterm - v[j]
                    acc += disc_ * delta
                    if d[j]:
                        break
                    disc_ *= gamma * lam
                want[i] = acc
            np.testing.assert_allclose(adv, want, atol=1e-10, rtol=0)
            np.testing.assert_allclose(ret, want + v[:t], atol=1e-10, rtol=0)


# ---------------------------------------------------------------------------
# 5. Diffusion algebra
# ---------------------------------------------------------------------------


class TestDiffusionAlgebra:
    def test_guidance_endpoints_bitwise(self):
        rng = RNG(12)
        cfg = _tiny_planner_cfg()
        net = df.DenoiserNet(cfg, rng)
        b = 2
        x = rng.standard_normal((b, cfg.h, cfg.state_dim))
        hist = rng.standard_normal((b, cfg.k, cfg.state_dim))
        scan = rng.standard_normal((b, terrain.SCAN_SIZE))
        steps = np.array([2, 4])
        null = Tensor(np.broadcast_to(net.null_embed.data, (b, cfg.terrain_embed)))
        g_null = net(x, hist, null, steps).data
        g_cond = net(x, hist, net.terrain_embedding(scan), steps).data
        assert np.array_equal(df.guided_x0(net, x, hist, scan, steps, 0.0), g_null)
        assert np.array_equal(df.guided_x0(net, x, hist, scan, steps, 1.0), g_cond)

    def test_forward_marginal_moments_within_2pct(self):
        # 1e5 draws; sample mean/std of the noised value vs the closed form
        rng = RNG(13)
        sched = df.build_noise_schedule(50, "cosine")
        x0 = np.full(100_000, 1.7)
        for n in (1, 25, 50):
            eps = rng.standard_normal(x0.shape)
            x = df.forward_diffuse(x0, n, sched, eps)
            ab = sched.alpha_bar[n - 1]
            want_mean, want_std = np.sqrt(ab) * 1.7, np.sqrt(1 - ab)
            assert abs(x.mean() - want_mean) <= 0.02 * max(abs(want_mean), want_std)
            assert abs(x.std() - want_std) <= 0.02 * want_std

    def test_rollout_probability_three_branches_on_dense_grid(self):
        i1, i2 = 37, 53
        for it in range(0, 200):
            got = df.schedule_probability(it, i1, i2)
            if it <= i1:
                assert got == 0.0
            elif it > i1 + i2:
                assert got == 1.0
            else:
                assert got == (it - i1) / i2


# ---------------------------------------------------------------------------
# 6. Scheduled-sampling mechanics
# ---------------------------------------------------------------------------


class TestScheduledSamplingMechanics:
    def _run(self, p, chain_len=6, n_chains=3):
        rng = RNG(14)
        cfg = _tiny_planner_cfg()
        net = df.DenoiserNet(cfg, rng)
        sched = df.build_noise_schedule(cfg.n_steps, cfg.schedule)
        adam = nn.AdamState(net.parameters(), lr=1e-4)
        t = cfg.k + cfg.h * chain_len + 2
        states = rng.standard_normal((t, cfg.state_dim))
        scan = rng.standard_normal(terrain.SCAN_SIZE)
        chains = []
        for _ in range(n_chains):
            wins = []
            for wi in range(chain_len):
                s = wi * cfg.h
                wins.append(dsm.TrajectoryWindow(
                    states[s:s + cfg.k], states[s + cfg.k:s + cfg.k + cfg.h],
                    scan, True, 0, s))
            chains.append(wins)
        counters = df.RolloutCounters()
        df.train_planner_step(net, chains, sched, cfg, adam, rng, p, counters)
        return counters, chain_len, n_chains

    def test_p_zero_never_substitutes(self):
        c, length, n = self._run(0.0)
        assert c.rollout_histories == 0
        assert c.dataset_histories == length * n

    def test_p_one_substitutes_all_but_the_first(self):
        c, length, n = self._run(1.0, chain_len=4)
        assert c.rollout_histories == (length - 1) * n
        assert c.max_consecutive == length - 1

    def test_never_more_than_four_consecutive_rollouts(self):
        c, length, n = self._run(1.0, chain_len=9)
        assert c.max_consecutive == 4
        # one forced dataset history after each run of four
        assert c.rollout_histories == n * (length - 1 - (length - 1) // 5)


# ---------------------------------------------------------------------------
# 7. Adversarial reward algebra
# ---------------------------------------------------------------------------


class _LeakDisc(unified.Discriminator):
    """Scores equal to the first state coordinate; keeps a grad path."""

    def __init__(self):
        super().__init__(RNG(0))

    def score_t(self, s, s_next):
        leak = sum((p * 0.0).sum() for p in self.parameters().values())
        return Tensor(np.asarray(s)[:, 0]) + leak


class TestAdversarialAlgebra:
    def test_labeled_reward_values(self):
        assert unified.amp_reward(-1.0) == 0.0
        assert unified.amp_reward(0.0) == 0.75
        assert unified.amp_reward(1.0) == 1.0

    def test_loss_is_zero_at_the_labeled_optimum(self):
        disc = _LeakDisc()
        adam = nn.AdamState(disc.parameters(), lr=0.0)
        ps = np.zeros((4, sim.STATE_DIM)); ps[:, 0] = 1.0
        qs = np.zeros((4, sim.STATE_DIM)); qs[:, 0] = -1.0
        loss = unified.discriminator_update(disc, (ps, ps), (qs, qs), adam)
        assert loss == 0.0

    def test_separable_pairs_reach_margins_within_500_updates(self):
        t0 = time.time()
        rng = RNG(15)
        disc = unified.Discriminator(rng)
        adam = nn.AdamState(disc.parameters(), lr=3e-3)
        mu = np.zeros(sim.STATE_DIM); mu[:4] = 3.0
        for _ in range(500):
            ps = rng.normal(mu, 0.3, (32, sim.STATE_DIM))
            qs = rng.normal(-mu, 0.3, (32, sim.STATE_DIM))
            unified.discriminator_update(disc, (ps, ps), (qs, qs), adam)
        ps = rng.normal(mu, 0.3, (256, sim.STATE_DIM))
        qs = rng.normal(-mu, 0.3, (256, sim.STATE_DIM))
        assert disc.score(ps, ps).mean() >= 0.8
        assert disc.score(qs, qs).mean() <= -0.8
        assert time.time() - t0 < 120.0


# ---------------------------------------------------------------------------
# 12. Persistence (fast, so it runs before the long gates)
# ---------------------------------------------------------------------------


def _gait_dataset(seed, n_eps_per_family=17, t=120, families=(0.5, 1.0, 1.5),
                  split=False):
    """Deterministic sinusoidal gait families played through the real
    kinematics and recorder. Distinct frequency, amplitude, and phase spread
    per family. Returns one dataset, or a list per family when split."""
    model = sim.RobotModel()
    per_family = []
    for fi, freq in enumerate(families):
        eps = []
        for e in range(n_eps_per_family):
            rng = RNG(seed * 1000 + fi * 100 + e)
            phase = rng.uniform(0, 2 * np.pi)
            amp = 0.3 + 0.1 * fi
            rec = dsm.EpisodeRecorder(model, "flat", 0, seed * 1000 + fi * 100 + e)
            for step in range(t):
                tt = step * 0.02
                w = 2 * np.pi * freq
                th = amp * np.sin(w * tt + phase + np.arange(6) * 0.5)
                thd = amp * w * np.cos(w * tt + phase + np.arange(6) * 0.5)
                state = sim.BatchState(
                    theta=th[None], theta_dot=thd[None],
                    base_pos=np.array([[1.0 + tt, 0.8 + 0.02 * np.sin(w * tt)]]),
                    base_vel=np.array([[1.0, 0.02 * w * np.cos(w * tt)]]),
                    pitch=np.zeros(1), pitch_rate=np.zeros(1),
                )
                rec.record_step(state, np.zeros(sim.OBS_DIM), np.zeros(6), np.zeros(1))
            eps.append(rec.close(terrain.EpisodeOutcome(True, 18.0, 18.0)))
        per_family.append(eps)
    if split:
        return [dsm.Dataset(e) for e in per_family]
    return dsm.Dataset([ep for fam in per_family for ep in fam])


class TestPersistence:
    def test_dataset_round_trip_byte_identical(self, tmp_path):
        ds = _gait_dataset(3, n_eps_per_family=2, t=20)
        a, b = tmp_path / "a.ds", tmp_path / "b.ds"
        ds.save(a)
        dsm.Dataset.load(a).save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_checkpoint_round_trip_byte_identical(self, tmp_path):
        net = df.DenoiserNet(_tiny_planner_cfg(), RNG(4))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        df.save_planner(a, net, stats=(np.zeros(35), np.ones(35)))
        net2, stats = df.load_planner(a)
        df.save_planner(b, net2, stats=stats)
        assert a.read_bytes() == b.read_bytes()

    def test_truncated_dataset_rejected_with_location(self, tmp_path):
        ds = _gait_dataset(5, n_eps_per_family=2, t=20)
        p = tmp_path / "d.ds"
        ds.save(p)
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(ValueError, match="offset|truncated"):
            dsm.Dataset.load(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "d.ds"
        _gait_dataset(6, n_eps_per_family=1, t=10).save(p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            dsm.Dataset.load(p)

    def test_manifest_disagreement_rejected(self, tmp_path):
        ds = _gait_dataset(7, n_eps_per_family=2, t=20)
        p = tmp_path / "d.ds"
        ds.save(p)
        loaded = dsm.Dataset.load(p)  # self-consistency is checked on load
        assert loaded.n_frames == ds.n_frames


# ---------------------------------------------------------------------------
# 8. Planner learnability on synthetic gait families
# ---------------------------------------------------------------------------

PLANNER_ITERS = 3000


def _tuned_planner_cfg():
    # supervised phase for 60% of the budget, rollout ramp over the next 20%
    return df.PlannerConfig(sampler="strided", strided_steps=6,
                            i1=int(0.6 * PLANNER_ITERS), i2=int(0.8 * PLANNER_ITERS))


@pytest.fixture(scope="session")
def gait_planner():
    # 3 families x 21 episodes x 120 frames = 2037 windows per family
    train = _gait_dataset(0, n_eps_per_family=21, t=120)
    hold = _gait_dataset(99, n_eps_per_family=4, t=120)
    hold.state_mean, hold.state_std = train.state_mean, train.state_std
    t0 = time.time()
    net, curve = df.train_planner(train, _tuned_planner_cfg(), iters=PLANNER_ITERS,
                                  seed=0, log_every=500, holdout=hold)
    return net, curve, train, time.time() - t0


class TestPlannerLearnability:
    def test_holdout_rmse_within_10pct_of_std_in_20_minutes(self, gait_planner):
        net, curve, train, secs = gait_planner
        assert secs <= 20 * 60
        assert curve[-1]["holdout_rmse"] <= 0.10  # normalized units: std = 1

    def test_ten_window_rollouts_stay_within_5x_data_range(self, gait_planner):
        net, curve, train, _ = gait_planner
        cfg = net.cfg
        planner = df.Planner(net, stats=(train.state_mean, train.state_std))
        rng = RNG(21)
        states = dsm.flattened_states(train.episodes[0])
        norm = train.normalize(np.concatenate(
            [dsm.flattened_states(ep) for ep in train.episodes]))
        lo, hi = norm.min(axis=0), norm.max(axis=0)
        margin = 5 * np.maximum(hi - lo, 0.2)
        hist = states[: cfg.k][None]
        scan = np.zeros((1, terrain.SCAN_SIZE))
        for _ in range(10):
            pred = planner.predict(hist, scan, rng)
            pn = train.normalize(pred[0])
            assert (pn >= lo - margin).all() and (pn <= hi + margin).all()
            hist = pred[:, -cfg.k:]


# ---------------------------------------------------------------------------
# 11. Scaling trends of the planner
# ---------------------------------------------------------------------------


class TestScalingTrend:
    def test_rmse_non_increasing_across_fractions_within_5pct(self, tmp_path):
        ds = _gait_dataset(31, n_eps_per_family=21, t=120)
        cfg = df.PlannerConfig(sampler="strided", strided_steps=6,
                               i1=10 ** 9, i2=1)  # supervised-only budget
        rows = cli.scale_study(ds, [0.01, 0.1, 1.0], cfg, iters=800, seed=0,
                               csv_path=tmp_path / "scale.csv",
                               svg_path=tmp_path / "scale.svg")
        rmse = [r["heldout_rmse"] for r in rows]
        assert all(np.isfinite(rmse))
        for a, b in zip(rmse, rmse[1:]):
            assert b <= a * 1.05, rmse

    def test_adding_a_family_strictly_reduces_its_error(self):
        fams = _gait_dataset(32, n_eps_per_family=12, t=120, split=True)
        cfg = df.PlannerConfig(sampler="strided", strided_steps=6,
                               i1=10 ** 9, i2=1)
        rows = cli.types_study(fams, cfg, iters=800, seed=0)
        last = len(fams) - 1
        before = rows[last - 1][f"rmse_family_{last}"]  # family held out
        after = rows[last][f"rmse_family_{last}"]  # family included
        assert after < before


# ---------------------------------------------------------------------------
# 9. Flat-terrain specialist across three seeds
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def flat_specialists():
    runs = []
    for seed in (0, 1, 2):
        t0 = time.time()
        policy, curve = ppo.train_specialist("flat", seed, target_success=0.9)
        runs.append((policy, curve, time.time() - t0))
    return runs


class TestSpecialistSanity:
    def test_three_seeds_reach_90pct_success_within_budget(self, flat_specialists):
        total = 0.0
        for policy, curve, secs in flat_specialists:
            assert curve, "training produced no log rows"
            assert curve[-1]["step"] <= 2_000_000
            assert curve[-1]["r_succ"] >= 0.9
            total += secs
        assert total <= 3600.0


# ---------------------------------------------------------------------------
# 10. End-to-end pipeline at desk budgets
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def pipeline(flat_specialists):
    t0 = time.time()
    specialists = {"flat": flat_specialists[0][0]}
    for kind in ("uneven", "stair"):
        specialists[kind], _ = ppo.train_specialist(kind, seed=0, target_success=0.9)
    eps = []
    for kind, pol in specialists.items():
        eps.extend(ppo.collect_skills(pol, kind, n_frames=70_000, seed=1))
    ds = dsm.Dataset(eps, reward_names=("total",))
    net, _ = df.train_planner(ds, _tuned_planner_cfg(), iters=PLANNER_ITERS, seed=0)
    planner = df.Planner(net, stats=(ds.state_mean, ds.state_std))
    policy, disc, curve = unified.train_unified(
        planner, terrains=("flat", "uneven", "stair"), seed=0, total_steps=600_000)
    spec_secs = sum(r[2] for r in flat_specialists[:1])
    return dict(planner=planner, policy=policy, frames=ds.n_frames,
                secs=time.time() - t0 + spec_secs)


class TestEndToEndPipeline:
    def test_unified_policy_clears_the_bar(self, pipeline):
        assert pipeline["frames"] >= 200_000
        flat = unified.evaluate_policy(pipeline["policy"], pipeline["planner"],
                                       "flat", episodes=16, seed=7)
        uneven = unified.evaluate_policy(pipeline["policy"], pipeline["planner"],
                                         "uneven", episodes=16, seed=7)
        assert flat["r_succ"] >= 0.8
        assert uneven["r_succ"] >= 0.5
        assert pipeline["secs"] <= 4 * 3600

    def test_closed_loop_beats_open_loop_on_stairs(self, pipeline):
        closed = unified.evaluate_policy(pipeline["policy"], pipeline["planner"],
                                         "stair", episodes=16, seed=7)
        open_ = unified.evaluate_policy(pipeline["policy"], pipeline["planner"],
                                        "stair", episodes=16, seed=7, open_loop=True)
        assert closed["r_cmp"] > open_["r_cmp"]
