"""PPO training of per-terrain specialist locomotion policies.

The actor consumes the flat observation vector through three heads: a
recurrent encoder over the proprio history, a feed-forward encoder over the
egocentric terrain scan, and the raw proprio/command/previous-action block.
The critic shares both encoders. Training follows the usual clipped
surrogate with generalized advantage estimation, plus a two-phase schedule:
a walk-from-scratch phase on flat ground with the base reward table, then a
terrain phase with the special table and a difficulty curriculum that moves
one level at a time on rolling success thresholds.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import nn, sim
from .rewards import ALL_TERMS, PHASE1_TERMS, RewardConfig, RewardTracker
from .sim import (
    CMD_DIM,
    K_OBS_HIST,
    N_JOINTS,
    OBS_DIM,
    PROPRIO_DIM,
    HistoryBuffer,
    RobotModel,
    SimConfig,
)
from .terrain import (
    SCAN_SIZE,
    EpisodeOutcome,
    TerrainSpec,
    add_base_roughness,
    generate_heightfield,
)

__all__ = [
    "PPOConfig",
    "SpecialistPolicy",
    "SpecialistEnv",
    "gae",
    "ppo_update",
    "train_specialist",
    "collect_skills",
    "ACTION_SCALE",
    "LEVEL_UP_SUCC",
    "LEVEL_DOWN_SUCC",
]

ACTION_SCALE = 0.25  # rad of joint-target offset per unit of action
LEVEL_UP_SUCC = 0.7
LEVEL_DOWN_SUCC = 0.3
ROLLING_EPISODES = 20


@dataclass
class PPOConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    max_grad_norm: float = 1.0
    lr: float = 2e-4
    gamma: float = 0.99
    init_std: float = 1.0
    min_std: float = 0.2
    n_envs: int = 64
    steps_per_batch: int = 24
    epochs: int = 5
    minibatches: int = 4

    def __post_init__(self):
        for f in dc_fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.clip >= 1:
            raise ValueError("clip must be < 1")


# observation slice boundaries, in assembly order
_P0, _P1 = 0, PROPRIO_DIM
_S0, _S1 = _P1, _P1 + SCAN_SIZE
_H0, _H1 = _S1, _S1 + K_OBS_HIST * PROPRIO_DIM
_C0, _C1 = _H1, _H1 + CMD_DIM
_A0, _A1 = _C1, _C1 + N_JOINTS


class SpecialistPolicy(nn.Module):
    """Gaussian policy with recurrent history and scan encoders."""

    def __init__(self, rng, cfg: PPOConfig = None, hist_hidden=64,
                 scan_dims=(64, 32, 16), trunk_dims=(128, 64, 32)):
        cfg = cfg or PPOConfig()
        self.min_std = cfg.min_std
        self.hist_hidden = hist_hidden
        self.hist_enc = nn.GRUCell(PROPRIO_DIM, hist_hidden, rng)
        self.scan_enc = nn.MLP([SCAN_SIZE, *scan_dims], rng, act="elu", out_act="elu")
        feat = hist_hidden + scan_dims[-1] + PROPRIO_DIM + CMD_DIM + N_JOINTS
        self.actor = nn.MLP([feat, *trunk_dims, N_JOINTS], rng, act="elu")
        self.critic = nn.MLP([feat, *trunk_dims, 1], rng, act="elu")
        self.log_std = nn.Tensor(np.full(N_JOINTS, np.log(cfg.init_std)), requires_grad=True)

    def features(self, obs: nn.Tensor) -> nn.Tensor:
        n = obs.shape[0]
        hist = obs[:, _H0:_H1].reshape(n, K_OBS_HIST, PROPRIO_DIM).swapaxes(0, 1)
        h = self.hist_enc.run(hist)
        s = self.scan_enc(obs[:, _S0:_S1])
        return nn.concat([h, s, obs[:, _P0:_P1], obs[:, _C0:_C1], obs[:, _A0:_A1]], axis=-1)

    def mean_value(self, obs: nn.Tensor):
        f = self.features(obs)
        return self.actor(f), self.critic(f).reshape(obs.shape[0])

    def std(self) -> nn.Tensor:
        return self.log_std.exp().maximum(self.min_std)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample actions for a rollout step (no gradients kept).

        Returns (actions, log-probs, values, means)."""
        mu_t, v_t = self.mean_value(nn.Tensor(obs))
        mu, v = mu_t.data, v_t.data
        std = self.std().data
        actions = mu + std * rng.standard_normal(mu.shape)
        logp = _gaussian_logp_np(actions, mu, std)
        return actions, logp, v, mu


def _gaussian_logp_np(a, mu, std):
    z = (a - mu) / std
    return -0.5 * (z**2).sum(-1) - np.log(std).sum() - 0.5 * a.shape[-1] * np.log(2 * np.pi)


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation with episode-boundary masking.

    rewards, dones: (T, ...); values: (T+1, ...) including the bootstrap.
    Returns (advantages, returns), both (T, ...)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1 or dones.shape != rewards.shape:
        raise ValueError("shape mismatch")
    adv = np.zeros_like(rewards)
    acc = np.zeros_like(rewards[0] if rewards.ndim > 1 else rewards[:1][0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * mask - values[t]
        acc = delta + gamma * lam * mask * acc
        adv[t] = acc
    return adv, adv + values[:-1]


def ppo_update(policy: SpecialistPolicy, batch: dict, cfg: PPOConfig, adam: nn.AdamState):
    """Run epochs x minibatches clipped-surrogate passes over one batch.

    batch: obs (N, OBS_DIM), actions (N, n_joints), logp (N,), advantages
    (N,), returns (N,). Advantages are normalized here. Raises RuntimeError
    on a non-finite loss."""
    n = batch["obs"].shape[0]
    adv = batch["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    params = policy.parameters()
    rng = batch.get("shuffle_rng") or np.random.default_rng(0)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0}
    passes = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for mb in np.array_split(order, cfg.minibatches):
            obs = nn.Tensor(batch["obs"][mb])
            acts = batch["actions"][mb]
            logp_old = batch["logp"][mb]
            a_mb = adv[mb]
            mu, v = policy.mean_value(obs)
            std = policy.std()
            z = (nn.Tensor(acts) - mu) / std
            logp = (z**2.0).sum(axis=-1) * (-0.5) - std.log().sum() - 0.5 * N_JOINTS * np.log(
                2 * np.pi
            )
            ratio = (logp - nn.Tensor(logp_old)).exp()
            clipped = ratio.minimum(1.0 + cfg.clip).maximum(1.0 - cfg.clip)
            assert (clipped.data >= 1.0 - cfg.clip - 1e-12).all()
            assert (clipped.data <= 1.0 + cfg.clip + 1e-12).all()
            surr = (ratio * nn.Tensor(a_mb)).minimum(clipped * nn.Tensor(a_mb))
            entropy = std.log().sum() + 0.5 * N_JOINTS * np.log(2 * np.pi * np.e)
            v_err = v - nn.Tensor(batch["returns"][mb])
            loss = (
                -surr.mean()
                + (v_err**2.0).mean() * 0.5
                - entropy * cfg.entropy_coef
            )
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite PPO loss: surr={surr.data.mean()} "
                    f"v_err={np.abs(v_err.data).max()} std={std.data}"
                )
            policy.zero_grad()
            loss.backward()
            nn.clip_grad_norm(params, cfg.max_grad_norm)
            nn.adam_step(params, adam)
            stats["policy_loss"] += float(-surr.data.mean())
            stats["value_loss"] += float((v_err.data**2).mean())
            stats["entropy"] += float(entropy.data)
            stats["clip_frac"] += float(
                (np.abs(ratio.data - 1.0) > cfg.clip).mean()
            )
            passes += 1
    for k in stats:
        stats[k] /= passes
    return stats


class SpecialistEnv:
    """Vectorized planar-locomotion environment on one terrain kind.

    Environments are spread over a small pool of generated heightfields.
    A global curriculum level gates terrain difficulty: the level moves up
    when the rolling success rate crosses LEVEL_UP_SUCC and down when it
    falls to LEVEL_DOWN_SUCC, one step at a time, and the pool is rebuilt
    after every move. Episode outcomes and level transitions are logged.
    """

    def __init__(self, kind: str, n_envs: int, seed: int, terms=ALL_TERMS,
                 curriculum: bool = True, n_fields: int = 4, level: int = 0,
                 model: RobotModel = None, sim_cfg: SimConfig = None,
                 reward_cfg: RewardConfig = None, command=(1.0, 0.0, 0.0)):
        self.kind = kind
        self.n = n_envs
        self.terms = terms
        self.curriculum = curriculum
        self.n_fields = n_fields
        self.model = model or RobotModel()
        self.sim_cfg = sim_cfg or SimConfig()
        self.reward_cfg = reward_cfg or RewardConfig()
        self.command = np.asarray(command, dtype=np.float64)
        self.rng = np.random.default_rng(seed)
        self.spec = TerrainSpec.for_kind(kind)
        self.level = level
        self.level_log = []
        self.outcomes = deque(maxlen=ROLLING_EPISODES)
        self.recent_completion = deque(maxlen=ROLLING_EPISODES)
        self.episodes_done = 0
        self._build_fields()
        self.field_idx = self.rng.integers(0, self.n_fields, size=self.n)
        self.state = sim.reset_batch(self.model, self.fields[0], self.rng, self.n)
        self._fix_heights()
        self.hist = HistoryBuffer(self.n)
        self.tracker = RewardTracker(self.model, self.reward_cfg, self.n)
        self.steps = np.zeros(self.n)
        self.prev_action = np.zeros((self.n, N_JOINTS))
        self.hist.push(sim.proprio_batch(self.state))

    def _build_fields(self):
        frac = self.level / self.spec.max_terrain_level
        self.fields = []
        for _ in range(self.n_fields):
            f = generate_heightfield(self.spec, self.level, int(self.rng.integers(2**31)))
            self.fields.append(add_base_roughness(f, frac, self.rng))

    def _fix_heights(self, idx=None):
        # resets use field 0's ground; re-anchor each env on its own field
        idx = np.arange(self.n) if idx is None else np.atleast_1d(idx)
        for i in idx:
            f = self.fields[self.field_idx[i]]
            ground = f.height_at(np.array([self.state.base_pos[i, 0]]))[0]
            self.state.base_pos[i, 1] = ground + self.model.standing_height_m

    def observe(self) -> np.ndarray:
        obs = np.empty((self.n, OBS_DIM))
        hist = self.hist.flat()
        for k, f in enumerate(self.fields):
            rows = np.where(self.field_idx == k)[0]
            if rows.size == 0:
                continue
            sub = self.state.select(rows)
            obs[rows] = sim.assemble_observation(
                sub, f, self.command, self.prev_action[rows], hist[rows]
            )
        return obs

    def step(self, actions: np.ndarray):
        """Apply one control step. Returns (rewards, dones, outcomes) where
        outcomes has an EpisodeOutcome for each env that finished."""
        actions = np.clip(np.asarray(actions, dtype=np.float64), -6.0, 6.0)
        targets = np.clip(
            np.asarray(self.model.default_pose) + ACTION_SCALE * actions,
            self.model.joint_lo,
            self.model.joint_hi,
        )
        rewards = np.zeros(self.n)
        dones = np.zeros(self.n, dtype=bool)
        finished = [None] * self.n
        self.steps += 1
        for k, f in enumerate(self.fields):
            rows = np.where(self.field_idx == k)[0]
            if rows.size == 0:
                continue
            prev = self.state.select(rows)
            nxt, info = sim.step_batch(self.model, self.sim_cfg, f, prev, targets[rows])
            self.state.assign(rows, nxt)
            sub_tracker = _TrackerView(self.tracker, rows)
            r, _ = sub_tracker.step(
                f, prev, nxt, info, actions[rows], self.command,
                self.sim_cfg.control_dt, self.level, self.terms,
            )
            rewards[rows] = r
            outs = sim.check_termination(
                nxt, f, 0.0, self.sim_cfg, self.model
            )
            for j, i in enumerate(rows):
                out = outs[j]
                if out is None and self.steps[i] * self.sim_cfg.control_dt >= self.sim_cfg.max_episode_s:
                    dist = max(0.0, float(nxt.base_pos[j, 0]) - 0.5)
                    out = EpisodeOutcome(False, dist, f.length_m, timeout=True)
                if out is not None:
                    dones[i] = True
                    finished[i] = out
        self.hist.push(sim.proprio_batch(self.state))
        self.prev_action = actions.copy()
        done_idx = np.where(dones)[0]
        if done_idx.size:
            for i in done_idx:
                self.outcomes.append(finished[i])
                self.recent_completion.append(finished[i].completion)
                self.episodes_done += 1
            self._maybe_move_level()
            self._reset_rows(done_idx)
        return rewards, dones, finished

    def rolling_success(self) -> float:
        if not self.outcomes:
            return 0.0
        return float(np.mean([o.success for o in self.outcomes]))

    def rolling_completion(self) -> float:
        if not self.recent_completion:
            return 0.0
        return float(np.mean(self.recent_completion))

    def _maybe_move_level(self):
        if not self.curriculum or len(self.outcomes) < ROLLING_EPISODES:
            return
        succ = self.rolling_success()
        new = self.level
        if succ >= LEVEL_UP_SUCC and self.level < self.spec.max_terrain_level:
            new = self.level + 1
        elif succ <= LEVEL_DOWN_SUCC and self.level > 0:
            new = self.level - 1
        if new != self.level:
            self.level_log.append((self.episodes_done, self.level, new, succ))
            self.level = new
            self._build_fields()
            self.outcomes.clear()
            self.recent_completion.clear()

    def _reset_rows(self, idx):
        fresh = sim.reset_batch(self.model, self.fields[0], self.rng, idx.size)
        self.state.assign(idx, fresh)
        self.field_idx[idx] = self.rng.integers(0, self.n_fields, size=idx.size)
        self._fix_heights(idx)
        self.hist.reset_rows(idx)
        self.hist.push(sim.proprio_batch(self.state))
        self.tracker.reset_rows(idx)
        self.steps[idx] = 0
        self.prev_action[idx] = 0.0


class _TrackerView:
    """Row-subset view so grouped stepping shares one RewardTracker."""

    def __init__(self, tracker: RewardTracker, rows):
        self.tracker = tracker
        self.rows = rows

    def step(self, field, prev_state, state, info, action, command, dt, level, terms):
        t = self.tracker
        view = RewardTracker.__new__(RewardTracker)
        view.model = t.model
        view.cfg = t.cfg
        view.n = len(self.rows)
        view.default_pose = t.default_pose
        view.prev_action = t.prev_action[self.rows]
        view.prev_prev_action = t.prev_prev_action[self.rows]
        view.prev_torque = t.prev_torque[self.rows]
        view.air_time = t.air_time[self.rows]
        total, per_term = RewardTracker.step(
            view, field, prev_state, state, info, action, command, dt, level, terms
        )
        t.prev_prev_action[self.rows] = view.prev_prev_action
        t.prev_action[self.rows] = view.prev_action
        t.prev_torque[self.rows] = view.prev_torque
        t.air_time[self.rows] = view.air_time
        return total, per_term


def train_specialist(
    kind: str,
    seed: int,
    phase1_steps: int = 500_000,
    phase2_steps: int = 1_000_000,
    cfg: PPOConfig = None,
    out_dir=None,
    log_every: int = 10,
    reward_cfg: RewardConfig = None,
    target_success: float = None,
):
    """Two-phase specialist training. Returns (policy, curve) where curve is
    a list of dicts (step, r_succ, r_cmp, mean_reward, level). Divergence
    aborts with the last good parameters restored. target_success ends a
    phase early once the rolling success rate reaches it at the phase's top
    difficulty (any level counts in phase 1, which has no curriculum)."""
    cfg = cfg or PPOConfig()
    rng = np.random.default_rng(seed)
    policy = SpecialistPolicy(rng, cfg)
    adam = nn.AdamState(policy.parameters(), lr=cfg.lr)
    curve = []
    phases = [("flat", PHASE1_TERMS, False, phase1_steps)]
    if phase2_steps > 0:
        phases.append((kind, ALL_TERMS, kind != "flat", phase2_steps))
    total_steps = 0
    last_good = policy.state_arrays()
    t0 = time.time()
    for phase_kind, terms, curriculum, budget in phases:
        if budget <= 0:
            continue
        env = SpecialistEnv(
            phase_kind, cfg.n_envs, seed + 1, terms=terms, curriculum=curriculum,
            reward_cfg=reward_cfg,
        )
        steps_done = 0
        it = 0
        while steps_done < budget:
            try:
                batch, mean_rew = _collect(env, policy, cfg, rng)
                stats = ppo_update(policy, batch, cfg, adam)
            except (RuntimeError, ValueError) as exc:
                policy.load_state(last_good)
                curve.append({"step": total_steps, "aborted": str(exc)})
                return policy, curve
            last_good = policy.state_arrays()
            steps_done += cfg.n_envs * cfg.steps_per_batch
            total_steps += cfg.n_envs * cfg.steps_per_batch
            it += 1
            done_early = (
                target_success is not None
                and len(env.outcomes) == ROLLING_EPISODES
                and env.rolling_success() >= target_success
                and (not curriculum or env.level == env.spec.max_terrain_level)
            )
            if it % log_every == 0 or steps_done >= budget or done_early:
                curve.append(
                    {
                        "step": total_steps,
                        "r_succ": env.rolling_success(),
                        "r_cmp": env.rolling_completion(),
                        "mean_reward": mean_rew,
                        "level": env.level,
                        "entropy": stats["entropy"],
                        "wall_s": time.time() - t0,
                    }
                )
                if out_dir is not None:
                    _write_curve(out_dir, kind, seed, curve)
                    nn.save_checkpoint(
                        f"{out_dir}/specialist_{kind}_seed{seed}.ckpt",
                        policy.state_arrays(),
                        manifest=f"specialist kind={kind} seed={seed} step={total_steps}",
                    )
            if done_early:
                break
    return policy, curve


def _collect(env: SpecialistEnv, policy: SpecialistPolicy, cfg: PPOConfig, rng):
    T, n = cfg.steps_per_batch, env.n
    obs_buf = np.empty((T, n, OBS_DIM))
    act_buf = np.empty((T, n, N_JOINTS))
    logp_buf = np.empty((T, n))
    val_buf = np.empty((T + 1, n))
    rew_buf = np.empty((T, n))
    done_buf = np.empty((T, n))
    for t in range(T):
        obs = env.observe()
        actions, logp, values, _ = policy.act(obs, rng)
        rewards, dones, _ = env.step(actions)
        obs_buf[t], act_buf[t], logp_buf[t] = obs, actions, logp
        val_buf[t], rew_buf[t], done_buf[t] = values, rewards, dones
    _, _, v_last, _ = policy.act(env.observe(), rng)
    val_buf[T] = v_last
    adv, ret = gae(rew_buf, val_buf, done_buf, cfg.gamma, cfg.gae_lambda)
    batch = {
        "obs": obs_buf.reshape(T * n, -1),
        "actions": act_buf.reshape(T * n, -1),
        "logp": logp_buf.reshape(-1),
        "advantages": adv.reshape(-1),
        "returns": ret.reshape(-1),
        "shuffle_rng": rng,
    }
    return batch, float(rew_buf.mean())


def collect_skills(policy: SpecialistPolicy, kind: str, n_frames: int, seed: int,
                   level: int = 0, n_envs: int = 16, deterministic: bool = False,
                   curriculum: bool = False):
    """Roll the policy and record every episode until at least n_frames
    control steps are stored. Returns a list of EpisodeRecord (open episodes
    at the cutoff are discarded)."""
    from .dataset import EpisodeRecorder

    env = SpecialistEnv(kind, n_envs, seed, curriculum=curriculum, level=level)
    rng = np.random.default_rng(seed + 13)
    recorders = [
        EpisodeRecorder(env.model, kind, env.level, seed * 1000 + i)
        for i in range(n_envs)
    ]
    episodes = []
    recorded = 0
    while recorded < n_frames:
        obs = env.observe()
        if deterministic:
            mu, _ = policy.mean_value(nn.Tensor(obs))
            actions = mu.data
        else:
            actions, _, _, _ = policy.act(obs, rng)
        snap = env.state.copy()
        rewards, dones, finished = env.step(actions)
        for i in range(env.n):
            recorders[i].record_step(snap.select([i]), obs[i], actions[i], [rewards[i]])
        for i in np.where(dones)[0]:
            episodes.append(recorders[i].close(finished[i]))
            recorded += episodes[-1].t
            recorders[i] = EpisodeRecorder(
                env.model, kind, env.level, seed * 1000 + len(episodes) + env.n
            )
    return episodes


def _write_curve(out_dir, kind, seed, curve):
    path = f"{out_dir}/specialist_{kind}_seed{seed}.csv"
    cols = ["step", "r_succ", "r_cmp", "mean_reward", "level"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step [env steps]", "r_succ [frac]", "r_cmp [frac]",
                    "mean_reward [per step]", "level [int]"])
        for row in curve:
            if "aborted" in row:
                continue
            w.writerow([row[c] for c in cols])
