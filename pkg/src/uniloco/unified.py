"""Unified locomotion policy conditioned on planner motion imagery.

The unified policy replaces the specialist's terrain-scan head with a
recurrent encoder over a window of future states sampled from the trajectory
diffusion planner. Its reward is a weighted sum of three parts: the base
regularization table, a goal-tracking term that compares the reached state
against the planned one group by group, and an adversarial style term from a
least-squares discriminator that separates planner transitions from policy
transitions and is refreshed online from the planner during training.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import nn, sim
from .diffusion import Planner
from .ppo import (
    ACTION_SCALE,
    PPOConfig,
    SpecialistEnv,
    _gaussian_logp_np,
    gae,
    ppo_update,
)
from .rewards import BASE_TERMS, PHASE1_TERMS, RewardConfig
from .sim import (
    CMD_DIM,
    K_OBS_HIST,
    N_JOINTS,
    OBS_DIM,
    PROPRIO_DIM,
    STATE_DIM,
    flatten_state,
)
from .terrain import SCAN_SIZE, episode_metrics

__all__ = [
    "REPLAN_INTERVAL",
    "GOAL_GROUPS",
    "UnifiedRewardConfig",
    "goal_reward",
    "amp_reward",
    "unified_reward",
    "Discriminator",
    "discriminator_update",
    "UnifiedPolicy",
    "UnifiedEnv",
    "train_unified",
    "Deployment",
    "evaluate_policy",
]

REPLAN_INTERVAL = 5  # control steps between planner queries

# variable groups inside the flattened 35-dim state vector
GOAL_GROUPS = (
    ("joint_position", slice(0, 6)),
    ("joint_velocity", slice(6, 12)),
    ("keypoint_position", slice(12, 22)),
    ("keypoint_velocity", slice(22, 32)),
    ("base_linear_velocity", slice(33, 35)),
    ("base_angular_velocity", slice(32, 33)),
)


@dataclass
class UnifiedRewardConfig:
    """Weights for the three reward parts plus per-group (weight, decay)
    pairs of the goal-tracking sum. swap_velocity_pairing exchanges which
    base-velocity variable each of the two velocity labels tracks while
    keeping the labels' (weight, decay)."""

    w_base: float = 1.0
    w_goal: float = 1.0
    w_amp: float = 1.0
    joint_position: tuple = (3.0, 0.25)
    joint_velocity: tuple = (3.0, 0.25)
    keypoint_position: tuple = (5.0, 0.5)
    keypoint_velocity: tuple = (1.5, 0.1)
    base_linear_velocity: tuple = (8.0, 10.0)
    base_angular_velocity: tuple = (8.0, 0.01)
    swap_velocity_pairing: bool = False

    def __post_init__(self):
        for f in ("w_base", "w_goal", "w_amp"):
            if not np.isfinite(getattr(self, f)):
                raise ValueError(f"{f} must be finite")
        for name, _ in GOAL_GROUPS:
            w, alpha = getattr(self, name)
            if not (np.isfinite(w) and alpha > 0):
                raise ValueError(f"{name} needs finite weight and decay > 0")


def goal_reward(state, goal, cfg: UnifiedRewardConfig):
    """Tracking reward sum_i w_i * exp(-alpha_i * ||z_i - z_hat_i||_2) over
    the six state-variable groups. state, goal: (n, STATE_DIM) or (STATE_DIM,).
    Returns (total, per-group dict); scalars for single inputs."""
    single = np.ndim(state) == 1
    state = np.atleast_2d(np.asarray(state, dtype=np.float64))
    goal = np.atleast_2d(np.asarray(goal, dtype=np.float64))
    if state.shape[-1] != STATE_DIM or goal.shape != state.shape:
        raise ValueError("state and goal must both be (n, STATE_DIM)")
    slices = dict(GOAL_GROUPS)
    if cfg.swap_velocity_pairing:
        slices["base_linear_velocity"], slices["base_angular_velocity"] = (
            slices["base_angular_velocity"],
            slices["base_linear_velocity"],
        )
    total = np.zeros(state.shape[0])
    comps = {}
    for name, _ in GOAL_GROUPS:
        w, alpha = getattr(cfg, name)
        d = np.linalg.norm(state[:, slices[name]] - goal[:, slices[name]], axis=-1)
        comps[name] = w * np.exp(-alpha * d)
        total += comps[name]
    if single:
        return float(total[0]), {k: float(v[0]) for k, v in comps.items()}
    return total, comps


def amp_reward(d_score):
    """Bounded style reward max{0, 1 - (D - 1)^2 / 4} in [0, 1]."""
    d = np.asarray(d_score, dtype=np.float64)
    r = np.maximum(0.0, 1.0 - (d - 1.0) ** 2 / 4.0)
    return float(r) if np.ndim(d_score) == 0 else r


def unified_reward(r_base, r_goal, r_amp, cfg: UnifiedRewardConfig):
    """Weighted total and the weighted breakdown for logging."""
    comps = {
        "base": cfg.w_base * np.asarray(r_base, dtype=np.float64),
        "goal": cfg.w_goal * np.asarray(r_goal, dtype=np.float64),
        "amp": cfg.w_amp * np.asarray(r_amp, dtype=np.float64),
    }
    return comps["base"] + comps["goal"] + comps["amp"], comps


class Discriminator(nn.Module):
    """Least-squares discriminator over state transitions.

    The feature map is the pair of flattened state vectors, which exclude
    absolute track position, so scores are invariant to shifts along x."""

    def __init__(self, rng, dims=(64, 64)):
        self.net = nn.MLP([2 * STATE_DIM, *dims, 1], rng, act="elu")

    def score_t(self, s, s_next) -> nn.Tensor:
        pair = np.concatenate(
            [np.atleast_2d(s), np.atleast_2d(s_next)], axis=-1
        )
        return self.net(nn.Tensor(np.asarray(pair, dtype=np.float64))).reshape(pair.shape[0])

    def score(self, s, s_next) -> np.ndarray:
        return self.score_t(s, s_next).data


def discriminator_update(disc: Discriminator, planner_pairs, policy_pairs,
                         adam: nn.AdamState, max_grad_norm: float = 1.0) -> float:
    """One least-squares step: planner transitions toward +1, policy
    transitions toward -1. pairs: (states, next_states) arrays."""
    ps, ps2 = planner_pairs
    qs, qs2 = policy_pairs
    if len(np.atleast_2d(ps)) == 0 or len(np.atleast_2d(qs)) == 0:
        raise ValueError("discriminator batches must be non-empty")
    d_plan = disc.score_t(ps, ps2)
    d_pol = disc.score_t(qs, qs2)
    loss = ((d_plan - 1.0) ** 2.0).mean() + ((d_pol + 1.0) ** 2.0).mean()
    if not np.isfinite(loss.data):
        raise RuntimeError("non-finite discriminator loss")
    disc.zero_grad()
    loss.backward()
    nn.clip_grad_norm(disc.parameters(), max_grad_norm)
    nn.adam_step(disc.parameters(), adam)
    return float(loss.data)


class UnifiedPolicy(nn.Module):
    """Gaussian policy whose actor consumes (history encoding, proprio,
    future encoding of the planned window, command, previous action).

    Inputs arrive as one flat vector: the specialist observation followed by
    the normalized planned window (h * STATE_DIM)."""

    def __init__(self, rng, h: int, cfg: PPOConfig = None, hist_hidden=64,
                 future_hidden=64, trunk_dims=(128, 64, 32)):
        cfg = cfg or PPOConfig()
        self.h = h
        self.min_std = cfg.min_std
        self.hist_enc = nn.GRUCell(PROPRIO_DIM, hist_hidden, rng)
        self.future_enc = nn.GRUCell(STATE_DIM, future_hidden, rng)
        feat = hist_hidden + future_hidden + PROPRIO_DIM + CMD_DIM + N_JOINTS
        self.actor = nn.MLP([feat, *trunk_dims, N_JOINTS], rng, act="elu")
        self.critic = nn.MLP([feat, *trunk_dims, 1], rng, act="elu")
        self.log_std = nn.Tensor(np.full(N_JOINTS, np.log(cfg.init_std)), requires_grad=True)

    @property
    def obs_dim(self) -> int:
        return OBS_DIM + self.h * STATE_DIM

    def features(self, obs: nn.Tensor) -> nn.Tensor:
        n = obs.shape[0]
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(
                f"expected obs width {self.obs_dim}, got {obs.shape[-1]}"
            )
        h0 = PROPRIO_DIM + SCAN_SIZE
        h1 = h0 + K_OBS_HIST * PROPRIO_DIM
        c1 = h1 + CMD_DIM
        a1 = c1 + N_JOINTS
        hist = obs[:, h0:h1].reshape(n, K_OBS_HIST, PROPRIO_DIM).swapaxes(0, 1)
        goal = obs[:, OBS_DIM:].reshape(n, self.h, STATE_DIM).swapaxes(0, 1)
        return nn.concat(
            [
                self.hist_enc.run(hist),
                self.future_enc.run(goal),
                obs[:, 0:PROPRIO_DIM],
                obs[:, h1:c1],
                obs[:, c1:a1],
            ],
            axis=-1,
        )

    def mean_value(self, obs: nn.Tensor):
        f = self.features(obs)
        return self.actor(f), self.critic(f).reshape(obs.shape[0])

    def std(self) -> nn.Tensor:
        return self.log_std.exp().maximum(self.min_std)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        mu_t, v_t = self.mean_value(nn.Tensor(obs))
        mu, v = mu_t.data, v_t.data
        std = self.std().data
        actions = mu + std * rng.standard_normal(mu.shape)
        return actions, _gaussian_logp_np(actions, mu, std), v, mu


class _Replay:
    """Ring buffer of policy transitions plus the planner inputs that were
    current when each transition happened."""

    def __init__(self, capacity: int = 4096):
        self.s = deque(maxlen=capacity)
        self.s_next = deque(maxlen=capacity)
        self.hist = deque(maxlen=capacity)
        self.scan = deque(maxlen=capacity)

    def add(self, s, s_next, hist, scan):
        for i in range(len(s)):
            self.s.append(s[i])
            self.s_next.append(s_next[i])
            self.hist.append(hist[i])
            self.scan.append(scan[i])

    def __len__(self):
        return len(self.s)

    def sample(self, rng, batch: int):
        idx = rng.integers(0, len(self.s), size=min(batch, len(self.s)))
        return (
            np.stack([self.s[i] for i in idx]),
            np.stack([self.s_next[i] for i in idx]),
            np.stack([self.hist[i] for i in idx]),
            np.stack([self.scan[i] for i in idx]),
        )


class UnifiedEnv:
    """Single-terrain vectorized environment with planner-in-the-loop
    rewards. Keeps a window of the last K flattened states per robot,
    queries the planner every replan_interval control steps (and right
    after resets), and mixes base, goal-tracking, and style rewards."""

    def __init__(self, kind: str, n_envs: int, seed: int, planner: Planner,
                 ucfg: UnifiedRewardConfig = None, disc: Discriminator = None,
                 replan_interval: int = REPLAN_INTERVAL, level: int = 0,
                 curriculum: bool = False, reward_cfg: RewardConfig = None,
                 command=(1.0, 0.0, 0.0), terms=PHASE1_TERMS):
        if planner.cfg.state_dim != STATE_DIM:
            raise ValueError(
                f"planner state dim {planner.cfg.state_dim} != {STATE_DIM}"
            )
        # command tracking stays in the base reward: the goal-tracking
        # velocity group has a sharp decay and gives no gradient from rest
        self.env = SpecialistEnv(
            kind, n_envs, seed, terms=terms, curriculum=curriculum,
            level=level, reward_cfg=reward_cfg, command=command,
        )
        self.planner = planner
        self.ucfg = ucfg or UnifiedRewardConfig()
        self.disc = disc
        self.replan_interval = replan_interval
        self.rng = np.random.default_rng(seed + 9999)
        self.n = n_envs
        self.k = planner.cfg.k
        self.h = planner.cfg.h
        s0 = flatten_state(self.env.model, self.env.state)
        self.shist = np.repeat(s0[:, None], self.k, axis=1)
        self.goal = np.zeros((self.n, self.h, STATE_DIM))
        self.age = np.zeros(self.n, dtype=int)
        self.need_replan = np.ones(self.n, dtype=bool)
        self.steps = 0
        self.ep_steps = np.zeros(self.n, dtype=int)
        self.replay = _Replay()
        self._scan = np.zeros((self.n, SCAN_SIZE))

    def _replan(self, rows, scan):
        self.goal[rows] = self.planner.predict(self.shist[rows], scan[rows], self.rng)
        self.age[rows] = 0
        self.need_replan[rows] = False

    def observe(self) -> np.ndarray:
        obs = self.env.observe()
        self._scan = obs[:, PROPRIO_DIM : PROPRIO_DIM + SCAN_SIZE]
        if self.steps % self.replan_interval == 0:
            rows = np.arange(self.n)
        else:
            rows = np.where(self.need_replan)[0]
        if rows.size:
            self._replan(rows, self._scan)
        goal_n = self.planner.normalize(self.goal)
        return np.concatenate([obs, goal_n.reshape(self.n, -1)], axis=-1)

    def step(self, actions: np.ndarray):
        """Returns (total rewards, dones, outcomes, reward components)."""
        s_t = flatten_state(self.env.model, self.env.state)
        hist_t = self.shist.copy()
        scan_t = self._scan.copy()
        r_base, dones, finished = self.env.step(actions)
        s_next = flatten_state(self.env.model, self.env.state)
        live = ~dones
        frame = self.goal[np.arange(self.n), self.age]
        r_goal, _ = goal_reward(s_next, frame, self.ucfg)
        if self.disc is not None:
            r_amp = amp_reward(self.disc.score(s_t, frame))
        else:
            r_amp = np.zeros(self.n)
        # goal and style terms are undefined across a reset boundary
        total, comps = unified_reward(r_base, r_goal * live, r_amp * live, self.ucfg)
        if live.any():
            self.replay.add(s_t[live], s_next[live], hist_t[live], scan_t[live])
        self.shist = np.concatenate([self.shist[:, 1:], s_next[:, None]], axis=1)
        self.age = np.minimum(self.age + 1, self.h - 1)
        self.steps += 1
        self.ep_steps += 1
        lengths = self.ep_steps[dones].copy()
        if dones.any():
            rows = np.where(dones)[0]
            self.shist[rows] = s_next[rows][:, None]
            self.need_replan[rows] = True
            self.ep_steps[rows] = 0
        return total, dones, finished, {"lengths": lengths, **comps}


def train_unified(
    planner,
    terrains=("flat",),
    seed: int = 0,
    total_steps: int = 100_000,
    cfg: PPOConfig = None,
    ucfg: UnifiedRewardConfig = None,
    replan_interval: int = REPLAN_INTERVAL,
    disc_updates: int = 2,
    disc_batch: int = 64,
    disc_lr: float = 1e-3,
    level: int = 0,
    out_dir=None,
    log_every: int = 5,
):
    """Adversarial unified-policy training. Each iteration collects a batch
    from every terrain with planner-mixed rewards, refreshes the
    discriminator on freshly sampled planner transitions versus replayed
    policy transitions, then runs one PPO update on the merged batch.
    Returns (policy, discriminator, curve)."""
    if not isinstance(planner, Planner):
        planner = Planner.load(planner)
    cfg = cfg or PPOConfig()
    ucfg = ucfg or UnifiedRewardConfig()
    rng = np.random.default_rng(seed)
    policy = UnifiedPolicy(rng, planner.cfg.h, cfg)
    disc = Discriminator(rng)
    adam = nn.AdamState(policy.parameters(), lr=cfg.lr)
    adam_d = nn.AdamState(disc.parameters(), lr=disc_lr)
    per = max(1, cfg.n_envs // len(terrains))
    envs = [
        UnifiedEnv(kind, per, seed + 7 * i, planner, ucfg, disc,
                   replan_interval=replan_interval, level=level)
        for i, kind in enumerate(terrains)
    ]
    curve = []
    steps_done = 0
    it = 0
    last_good = policy.state_arrays()
    t0 = time.time()
    while steps_done < total_steps:
        try:
            batches = [_collect_unified(env, policy, cfg, rng) for env in envs]
            batch = _merge_batches(batches, rng)
            d_loss = 0.0
            for _ in range(disc_updates):
                env = envs[it % len(envs)]
                if len(env.replay) == 0:
                    continue
                s, s_next, hist, scan = env.replay.sample(rng, disc_batch)
                pred = planner.predict(hist, scan, rng)
                d_loss = discriminator_update(
                    disc, (s, pred[:, 0]), (s, s_next), adam_d
                )
            stats = ppo_update(policy, batch, cfg, adam)
        except (RuntimeError, ValueError) as exc:
            policy.load_state(last_good)
            curve.append({"step": steps_done, "aborted": str(exc)})
            return policy, disc, curve
        last_good = policy.state_arrays()
        steps_done += cfg.steps_per_batch * sum(e.n for e in envs)
        it += 1
        if it % log_every == 0 or steps_done >= total_steps:
            row = {
                "step": steps_done,
                "mean_reward": batch["mean_reward"],
                "entropy": stats["entropy"],
                "disc_loss": d_loss,
                "wall_s": time.time() - t0,
            }
            for env in envs:
                row[f"r_succ_{env.env.kind}"] = env.env.rolling_success()
                row[f"r_cmp_{env.env.kind}"] = env.env.rolling_completion()
            curve.append(row)
            if out_dir is not None:
                _write_unified_curve(out_dir, seed, terrains, curve)
                nn.save_checkpoint(
                    f"{out_dir}/unified_seed{seed}.ckpt",
                    policy.state_arrays(),
                    manifest=f"unified h={planner.cfg.h} seed={seed} step={steps_done}",
                )
    return policy, disc, curve


def _collect_unified(env: UnifiedEnv, policy: UnifiedPolicy, cfg: PPOConfig, rng):
    T, n = cfg.steps_per_batch, env.n
    width = policy.obs_dim
    obs_buf = np.empty((T, n, width))
    act_buf = np.empty((T, n, N_JOINTS))
    logp_buf = np.empty((T, n))
    val_buf = np.empty((T + 1, n))
    rew_buf = np.empty((T, n))
    done_buf = np.empty((T, n))
    for t in range(T):
        obs = env.observe()
        actions, logp, values, _ = policy.act(obs, rng)
        rewards, dones, _, _ = env.step(actions)
        obs_buf[t], act_buf[t], logp_buf[t] = obs, actions, logp
        val_buf[t], rew_buf[t], done_buf[t] = values, rewards, dones
    _, _, v_last, _ = policy.act(env.observe(), rng)
    val_buf[T] = v_last
    adv, ret = gae(rew_buf, val_buf, done_buf, cfg.gamma, cfg.gae_lambda)
    return {
        "obs": obs_buf.reshape(T * n, -1),
        "actions": act_buf.reshape(T * n, -1),
        "logp": logp_buf.reshape(-1),
        "advantages": adv.reshape(-1),
        "returns": ret.reshape(-1),
        "mean_reward": float(rew_buf.mean()),
    }


def _merge_batches(batches, rng):
    out = {
        key: np.concatenate([b[key] for b in batches])
        for key in ("obs", "actions", "logp", "advantages", "returns")
    }
    out["mean_reward"] = float(np.mean([b["mean_reward"] for b in batches]))
    out["shuffle_rng"] = rng
    return out


def _write_unified_curve(out_dir, seed, terrains, curve):
    path = f"{out_dir}/unified_seed{seed}.csv"
    cols = ["step", "mean_reward", "entropy", "disc_loss", "wall_s"]
    cols += [f"r_succ_{k}" for k in terrains] + [f"r_cmp_{k}" for k in terrains]
    units = {"step": "env steps", "mean_reward": "per step", "entropy": "nats",
             "disc_loss": "ls", "wall_s": "s"}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"{c} [{units.get(c, 'frac')}]" for c in cols])
        for row in curve:
            if "aborted" in row:
                continue
            w.writerow([row[c] for c in cols])


class Deployment:
    """Single-robot closed-loop runner: keeps the state history, queries the
    planner every replan_interval steps, and produces one action per call.

    open_loop=True skips the policy and tracks the planned joint positions
    directly through the action-to-target mapping (the ablation mode)."""

    def __init__(self, policy, planner: Planner, command=(1.0, 0.0, 0.0),
                 replan_interval: int = REPLAN_INTERVAL, open_loop: bool = False,
                 seed: int = 0, model: sim.RobotModel = None):
        if not open_loop and policy is None:
            raise ValueError("closed-loop deployment needs a policy")
        self.policy = policy
        self.planner = planner
        self.command = np.asarray(command, dtype=np.float64)
        self.replan_interval = replan_interval
        self.open_loop = open_loop
        self.model = model or sim.RobotModel()
        self.rng = np.random.default_rng(seed)
        self.reset()

    def reset(self):
        self.hist = None
        self.goal = None
        self.age = 0
        self.t = 0
        self.prev_action = np.zeros(N_JOINTS)
        self.obs_hist = sim.HistoryBuffer(1)

    def infer_step(self, state: sim.BatchState, field) -> np.ndarray:
        """One control decision for a single-robot BatchState."""
        s = flatten_state(self.model, state)
        if self.hist is None:
            # before K real frames exist the window is padded with the
            # first state
            self.hist = np.repeat(s[:, None], self.planner.cfg.k, axis=1)
        else:
            self.hist = np.concatenate([self.hist[:, 1:], s[:, None]], axis=1)
        self.obs_hist.push(sim.proprio_batch(state))
        obs = sim.assemble_observation(
            state, field, self.command, self.prev_action[None], self.obs_hist.flat()
        )
        scan = obs[:, PROPRIO_DIM : PROPRIO_DIM + SCAN_SIZE]
        if self.t % self.replan_interval == 0:
            self.goal = self.planner.predict(self.hist, scan, self.rng)
            self.age = 0
        else:
            self.age = min(self.age + 1, self.planner.cfg.h - 1)
        if self.open_loop:
            theta_hat = self.goal[0, self.age, 0:N_JOINTS]
            action = (theta_hat - np.asarray(self.model.default_pose)) / ACTION_SCALE
        else:
            goal_n = self.planner.normalize(self.goal)
            full = np.concatenate([obs, goal_n.reshape(1, -1)], axis=-1)
            mu, _ = self.policy.mean_value(nn.Tensor(full))
            action = mu.data[0]
        self.prev_action = action
        self.t += 1
        return action


def evaluate_policy(policy, planner: Planner, kind: str, episodes: int = 20,
                    seed: int = 0, level: int = 0, open_loop: bool = False,
                    replan_interval: int = REPLAN_INTERVAL, n_envs: int = 8,
                    ucfg: UnifiedRewardConfig = None, deterministic: bool = False):
    """Seed-reproducible batched evaluation. The policy is rolled with its
    own sampling noise (the behavior it trains and succeeds with) unless
    deterministic, which uses the mean action. Returns a dict with r_succ,
    r_cmp, mean_steps, and mean planner latency in ms."""
    env = UnifiedEnv(kind, n_envs, seed, planner, ucfg,
                     replan_interval=replan_interval, level=level)
    act_rng = np.random.default_rng(seed + 17)
    calls0, time0 = planner.calls, planner.total_s
    default = np.asarray(env.env.model.default_pose)
    outcomes, lengths = [], []
    while len(outcomes) < episodes:
        obs = env.observe()
        if open_loop:
            frame = env.goal[np.arange(env.n), env.age]
            actions = (frame[:, 0:N_JOINTS] - default) / ACTION_SCALE
        elif deterministic:
            mu, _ = policy.mean_value(nn.Tensor(obs))
            actions = mu.data
        else:
            actions, _, _, _ = policy.act(obs, act_rng)
        _, dones, finished, comps = env.step(actions)
        for i in np.where(dones)[0]:
            outcomes.append(finished[i])
        lengths.extend(comps["lengths"])
    r_succ, r_cmp = episode_metrics(outcomes[:episodes])
    calls = planner.calls - calls0
    return {
        "r_succ": r_succ,
        "r_cmp": r_cmp,
        "mean_steps": float(np.mean(lengths[:episodes])) if lengths else 0.0,
        "planner_ms": 1000.0 * (planner.total_s - time0) / max(1, calls),
    }
