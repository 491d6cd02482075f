"""Terrain-conditioned autoregressive trajectory diffusion planner.

The planner denoises windows of H future robot states conditioned on the
last K states and an embedding of the egocentric terrain scan. Training is
x0-parameterized DDPM regression (noise a clean window to a random step,
predict the clean window, mean squared error) with two extras: the terrain
condition is dropped at a fixed mask rate so the net also learns the
unconditional distribution, and a scheduled-sampling curriculum gradually
replaces dataset histories with the model's own rollouts. Sampling runs the
reverse process with classifier-free guidance, written as the algebraically
equivalent (1-w)*unconditional + w*conditional blend so the w=0 and w=1
endpoints reproduce the single branches bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .dataset import Dataset, TrajectoryWindow, flattened_states, window_count
from .sim import STATE_DIM
from .terrain import SCAN_SIZE

__all__ = [
    "PlannerConfig",
    "NoiseSchedule",
    "build_noise_schedule",
    "forward_diffuse",
    "schedule_probability",
    "DenoiserNet",
    "guided_x0",
    "denoise_sample",
    "sample_chain",
    "train_planner_step",
    "train_planner",
    "Planner",
    "save_planner",
    "load_planner",
    "RolloutCounters",
]


@dataclass
class PlannerConfig:
    k: int = 8
    h: int = 16
    n_steps: int = 50
    mask_rate: float = 0.1
    guidance: float = 5.0
    i1: int = 0
    i2: int = 1
    max_consecutive_rollouts: int = 4
    sampler: str = "ddpm"  # or "strided"
    strided_steps: int = 8
    width: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    terrain_embed: int = 64
    schedule: str = "cosine"
    state_dim: int = STATE_DIM

    def __post_init__(self):
        if min(self.k, self.h, self.n_steps) < 1:
            raise ValueError("K, H, N must all be >= 1")
        if not 0 <= self.mask_rate <= 1:
            raise ValueError("mask_rate must be in [0, 1]")
        if self.sampler not in ("ddpm", "strided"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


@dataclass
class NoiseSchedule:
    alpha: np.ndarray  # (N,) per-step retention
    alpha_bar: np.ndarray  # (N,) cumulative products

    @property
    def n(self) -> int:
        return self.alpha.shape[0]


def build_noise_schedule(n: int, kind: str = "cosine") -> NoiseSchedule:
    if n < 1:
        raise ValueError("N must be >= 1")
    if kind == "cosine":
        s = 0.008
        grid = np.arange(n + 1) / n
        f = np.cos((grid + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f[1:] / f[0]
        alpha = alpha_bar / np.concatenate([[1.0], alpha_bar[:-1]])
        alpha = np.clip(alpha, 1e-8, 0.9999)
        alpha_bar = np.cumprod(alpha)
    elif kind == "linear":
        # the classic 1000-step beta ramp rescaled to N steps
        beta = np.linspace(1e-4, 0.02, n) * (1000.0 / n)
        beta = np.clip(beta, 0.0, 0.999)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (np.diff(alpha_bar) < 0).all():
        raise AssertionError("alpha_bar must be strictly decreasing")
    return NoiseSchedule(alpha=alpha, alpha_bar=alpha_bar)


def forward_diffuse(x0: np.ndarray, n: int, sched: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """Closed-form marginal of the forward process at step n (1-based)."""
    if not 1 <= n <= sched.n:
        raise ValueError(f"step {n} outside [1, {sched.n}]")
    ab = sched.alpha_bar[n - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def schedule_probability(it: int, i1: int, i2: int) -> float:
    """Rollout probability: 0 while fully supervised, then a linear ramp of
    length i2, then 1."""
    if i1 < 0 or i2 < 1:
        raise ValueError("need i1 >= 0 and i2 >= 1")
    if it <= i1:
        return 0.0
    if it > i1 + i2:
        return 1.0
    return (it - i1) / i2


class DenoiserNet(nn.Module):
    """x0-predicting denoiser over (H, d) windows.

    Condition signals (history, terrain, diffusion step) are each embedded
    to the trunk width and added to every future-frame token; the trunk is
    a small stack of attention blocks with a learned positional table.
    """

    def __init__(self, cfg: PlannerConfig, rng):
        self.cfg = cfg
        w, d = cfg.width, cfg.state_dim
        self.in_proj = nn.Dense(d, w, rng)
        self.hist_proj = nn.Dense(cfg.k * d, w, rng)
        self.terrain_enc = nn.MLP([SCAN_SIZE, cfg.terrain_embed, cfg.terrain_embed], rng,
                                  act="elu", out_act="elu")
        self.null_embed = nn.Tensor(np.zeros(cfg.terrain_embed), requires_grad=True)
        self.cond_proj = nn.Dense(cfg.terrain_embed, w, rng)
        self.time_embed = nn.Embedding(cfg.n_steps + 1, w, rng)
        self.pos = nn.Tensor(np.zeros((cfg.h, w)), requires_grad=True)
        self.blocks = [nn.AttentionBlock(w, cfg.n_heads, rng) for _ in range(cfg.n_blocks)]
        self.out_norm = nn.LayerNorm(w)
        self.out_proj = nn.Dense(w, d, rng)

    def terrain_embedding(self, scan: np.ndarray) -> nn.Tensor:
        return self.terrain_enc(nn.Tensor(np.asarray(scan, dtype=np.float64)))

    def __call__(self, x_noisy, history, terrain_embed, n_steps) -> nn.Tensor:
        """x_noisy (B,H,d), history (B,K,d), terrain_embed Tensor (B,E),
        n_steps int array (B,) -> predicted clean window (B,H,d)."""
        x_noisy = x_noisy if isinstance(x_noisy, nn.Tensor) else nn.Tensor(x_noisy)
        history = history if isinstance(history, nn.Tensor) else nn.Tensor(history)
        b = x_noisy.shape[0]
        tokens = self.in_proj(x_noisy) + self.pos
        hist = self.hist_proj(history.reshape(b, self.cfg.k * self.cfg.state_dim))
        cond = hist + self.cond_proj(terrain_embed) + self.time_embed(np.asarray(n_steps))
        tokens = tokens + cond.reshape(b, 1, self.cfg.width)
        for block in self.blocks:
            tokens = block(tokens)
        return self.out_proj(self.out_norm(tokens))

    def parameters(self) -> dict:
        out = super().parameters()
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                out[f"blocks.{i}.{k}"] = v
        return out


def guided_x0(net: DenoiserNet, x_noisy, history, scan, n_steps, omega: float) -> np.ndarray:
    """Classifier-free guided clean-window prediction (no gradients).

    Computed as (1-omega)*G(null) + omega*G(terrain): identical algebra to
    G(null) + omega*(G(terrain) - G(null)) but exact at omega in {0, 1}."""
    b = x_noisy.shape[0]
    if omega == 0.0:
        null = nn.Tensor(np.broadcast_to(net.null_embed.data, (b, net.cfg.terrain_embed)))
        return net(x_noisy, history, null, n_steps).data
    cond = net.terrain_embedding(scan)
    if omega == 1.0:
        return net(x_noisy, history, cond, n_steps).data
    null = nn.Tensor(np.broadcast_to(net.null_embed.data, (b, net.cfg.terrain_embed)))
    g_null = net(x_noisy, history, null, n_steps).data
    g_cond = net(x_noisy, history, cond, n_steps).data
    return (1.0 - omega) * g_null + omega * g_cond


def denoise_sample(net: DenoiserNet, history: np.ndarray, scan: np.ndarray,
                   sched: NoiseSchedule, cfg: PlannerConfig, rng: np.random.Generator,
                   stats=None) -> np.ndarray:
    """Sample a future window (B,H,d) given history (B,K,d) and scan (B,396).

    Full reverse DDPM when cfg.sampler == "ddpm"; a deterministic strided
    x0/eps re-projection when "strided". stats=(mean, std) denormalizes the
    result."""
    history = np.atleast_3d(np.asarray(history, dtype=np.float64))
    scan = np.atleast_2d(np.asarray(scan, dtype=np.float64))
    b = history.shape[0]
    x = rng.standard_normal((b, cfg.h, cfg.state_dim))
    ab = sched.alpha_bar
    if cfg.sampler == "ddpm":
        steps = range(sched.n, 0, -1)
        for n in steps:
            ns = np.full(b, n)
            x0 = guided_x0(net, x, history, scan, ns, cfg.guidance)
            ab_n = ab[n - 1]
            ab_prev = ab[n - 2] if n > 1 else 1.0
            beta = 1.0 - sched.alpha[n - 1]
            mean = (
                np.sqrt(ab_prev) * beta / (1.0 - ab_n) * x0
                + np.sqrt(sched.alpha[n - 1]) * (1.0 - ab_prev) / (1.0 - ab_n) * x
            )
            if n > 1:
                var = beta * (1.0 - ab_prev) / (1.0 - ab_n)
                x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
            else:
                x = mean
    else:
        grid = np.unique(np.linspace(1, sched.n, min(cfg.strided_steps, sched.n)).astype(int))[::-1]
        for i, n in enumerate(grid):
            ns = np.full(b, n)
            x0 = guided_x0(net, x, history, scan, ns, cfg.guidance)
            eps_hat = (x - np.sqrt(ab[n - 1]) * x0) / np.sqrt(1.0 - ab[n - 1])
            nxt = grid[i + 1] if i + 1 < len(grid) else 0
            ab_next = ab[nxt - 1] if nxt >= 1 else 1.0
            x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat
    if stats is not None:
        mean, std = stats
        x = x * std + mean
    return x


def sample_chain(ds: Dataset, rng: np.random.Generator, k: int, h: int, count: int):
    """count consecutive windows from one episode: anchors t, t+h, ...,
    uniform over all chain placements. Histories pad with the first frame."""
    span = h * count
    counts = np.array([window_count(ep.t, span) for ep in ds.episodes])
    total = counts.sum()
    if total == 0:
        raise ValueError(f"no episode long enough for a {count}-window chain")
    flat = int(rng.integers(total))
    cum = np.cumsum(counts)
    ei = int(np.searchsorted(cum, flat, side="right"))
    t0 = flat - (cum[ei - 1] if ei else 0)
    ep = ds.episodes[ei]
    states = ds.normalize(flattened_states(ep))
    chain = []
    for w in range(count):
        t = t0 + w * h
        lo = t - k + 1
        if lo >= 0:
            hist = states[lo : t + 1]
        else:
            hist = np.concatenate([np.repeat(states[:1], -lo, axis=0), states[: t + 1]])
        chain.append(
            TrajectoryWindow(
                hist.copy(), states[t + 1 : t + 1 + h].copy(), ep.heightmap[t].copy(),
                True, ei, t,
            )
        )
    return chain


@dataclass
class RolloutCounters:
    rollout_histories: int = 0
    dataset_histories: int = 0
    masked_conditions: int = 0
    max_consecutive: int = 0


def train_planner_step(net: DenoiserNet, chains, sched: NoiseSchedule, cfg: PlannerConfig,
                       adam: nn.AdamState, rng: np.random.Generator, p: float,
                       counters: RolloutCounters = None):
    """One optimizer pass over a batch of window chains.

    For every window after the first in a chain, its history is replaced by
    the model's own sampled rollout with probability p, capped at
    cfg.max_consecutive_rollouts in a row. The terrain condition of each
    sample is dropped to the learned null embedding at cfg.mask_rate.
    Returns the scalar MSE loss."""
    counters = counters if counters is not None else RolloutCounters()
    n_chains = len(chains)
    length = len(chains[0])
    if any(len(c) != length for c in chains):
        raise ValueError("all chains in a batch must have the same length")
    xs, hists, scans, masks = [], [], [], []
    consecutive = np.zeros(n_chains, dtype=int)
    rolled = None
    for wi in range(length):
        wins = [c[wi] for c in chains]
        data_hist = np.stack([w.history for w in wins])
        if wi == 0:
            use_roll = np.zeros(n_chains, dtype=bool)
        else:
            use_roll = (consecutive < cfg.max_consecutive_rollouts) & (
                rng.random(n_chains) < p
            )
        hist_wi = np.where(use_roll[:, None, None], rolled, data_hist) if wi else data_hist
        consecutive = np.where(use_roll, consecutive + 1, 0)
        counters.rollout_histories += int(use_roll.sum())
        counters.dataset_histories += int((~use_roll).sum())
        counters.max_consecutive = max(counters.max_consecutive, int(consecutive.max()))
        scan_wi = np.stack([w.scan for w in wins])
        xs.append(np.stack([w.future for w in wins]))
        hists.append(hist_wi)
        scans.append(scan_wi)
        masks.append(rng.random(n_chains) < cfg.mask_rate)
        if wi + 1 < length:
            # feed the sampler's own predictions forward as the next histories
            pred = denoise_sample(net, hist_wi, scan_wi, sched, cfg, rng)
            rolled = np.concatenate([hist_wi, pred], axis=1)[:, -cfg.k :]
    x0 = np.concatenate(xs)
    hist = np.concatenate(hists)
    scan = np.concatenate(scans)
    masks = np.concatenate(masks)
    counters.masked_conditions += int(masks.sum())
    b = x0.shape[0]
    n = rng.integers(1, sched.n + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[n - 1][:, None, None]
    x_noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    cond = net.terrain_embedding(scan)
    null = net.null_embed.reshape(1, cfg.terrain_embed) * nn.Tensor(np.ones((b, 1)))
    mask_col = masks[:, None].astype(np.float64)
    embed = null * mask_col + cond * (1.0 - mask_col)
    pred = net(x_noisy, hist, embed, n)
    loss = ((pred - nn.Tensor(x0)) ** 2.0).mean()
    if not np.isfinite(loss.data):
        raise RuntimeError(f"non-finite planner loss at p={p}: pred range "
                           f"{np.abs(pred.data).max()}")
    net.zero_grad()
    loss.backward()
    nn.clip_grad_norm(net.parameters(), 1.0)
    nn.adam_step(net.parameters(), adam)
    return float(loss.data), counters


def train_planner(ds: Dataset, cfg: PlannerConfig, iters: int, seed: int = 0,
                  batch_chains: int = 16, chain_len: int = 2, lr: float = 2e-4,
                  log_every: int = 20, holdout: Dataset = None):
    """Full scheduled-sampling training loop. Returns (net, curve)."""
    rng = np.random.default_rng(seed)
    net = DenoiserNet(cfg, rng)
    adam = nn.AdamState(net.parameters(), lr=lr)
    sched = build_noise_schedule(cfg.n_steps, cfg.schedule)
    curve = []
    counters = RolloutCounters()
    for it in range(1, iters + 1):
        p = schedule_probability(it, cfg.i1, cfg.i2)
        chains = [sample_chain(ds, rng, cfg.k, cfg.h, chain_len) for _ in range(batch_chains)]
        loss, counters = train_planner_step(net, chains, sched, cfg, adam, rng, p, counters)
        if it % log_every == 0 or it == iters:
            row = {"iter": it, "loss": loss, "p": p}
            if holdout is not None:
                row["holdout_rmse"] = holdout_rmse(net, holdout, sched, cfg, seed=1)
            curve.append(row)
    return net, curve


def holdout_rmse(net: DenoiserNet, ds: Dataset, sched: NoiseSchedule, cfg: PlannerConfig,
                 seed: int = 1, n_windows: int = 64, n_step: int = 1) -> float:
    """Per-dimension RMSE of the x0 prediction at a small diffusion step,
    averaged over dimensions, in normalized units."""
    rng = np.random.default_rng(seed)
    wins = [sample_chain(ds, rng, cfg.k, cfg.h, 1)[0] for _ in range(n_windows)]
    x0 = np.stack([w.future for w in wins])
    hist = np.stack([w.history for w in wins])
    scan = np.stack([w.scan for w in wins])
    eps = rng.standard_normal(x0.shape)
    x_noisy = forward_diffuse(x0, n_step, sched, eps)
    pred = guided_x0(net, x_noisy, hist, scan,
                     np.full(n_windows, n_step), 1.0)
    return float(np.sqrt(np.mean((pred - x0) ** 2, axis=(0, 1))).mean())


class Planner:
    """A denoiser bundled with its noise schedule and normalization stats,
    exposing real-unit predictions plus call/latency counters."""

    def __init__(self, net: DenoiserNet, stats=None, sampler: str = None):
        self.net = net
        self.cfg = net.cfg
        if sampler is not None:
            if sampler not in ("ddpm", "strided"):
                raise ValueError(f"unknown sampler {sampler!r}")
            self.cfg.sampler = sampler
        self.stats = stats
        self.sched = build_noise_schedule(self.cfg.n_steps, self.cfg.schedule)
        self.calls = 0
        self.total_s = 0.0

    @classmethod
    def load(cls, path, sampler: str = None) -> "Planner":
        net, stats = load_planner(path)
        return cls(net, stats, sampler)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        if self.stats is None:
            return np.asarray(states, dtype=np.float64)
        mean, std = self.stats
        return (np.asarray(states, dtype=np.float64) - mean) / std

    def predict(self, history: np.ndarray, scan: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
        """history (B,K,d) in real units -> future window (B,H,d) in real
        units."""
        t0 = time.time()
        out = denoise_sample(
            self.net, self.normalize(history), scan, self.sched, self.cfg, rng,
            stats=self.stats,
        )
        self.calls += 1
        self.total_s += time.time() - t0
        return out


def save_planner(path, net: DenoiserNet, stats=None):
    arrays = net.state_arrays()
    if stats is not None:
        arrays["_norm.mean"], arrays["_norm.std"] = stats
    c = net.cfg
    manifest = " ".join(
        f"{k}={getattr(c, k)}" for k in (
            "k", "h", "n_steps", "mask_rate", "guidance", "i1", "i2",
            "max_consecutive_rollouts", "sampler", "strided_steps", "width",
            "n_blocks", "n_heads", "terrain_embed", "schedule", "state_dim",
        )
    )
    nn.save_checkpoint(path, arrays, manifest="planner " + manifest)


def load_planner(path):
    arrays, manifest = nn.load_checkpoint(path)
    kv = dict(item.split("=", 1) for item in manifest.split()[1:])
    kw = {}
    for key, raw in kv.items():
        if key in ("sampler", "schedule"):
            kw[key] = raw
        elif key in ("mask_rate", "guidance"):
            kw[key] = float(raw)
        else:
            kw[key] = int(raw)
    cfg = PlannerConfig(**kw)
    net = DenoiserNet(cfg, np.random.default_rng(0))
    stats = None
    if "_norm.mean" in arrays:
        stats = (arrays.pop("_norm.mean"), arrays.pop("_norm.std"))
    net.load_state(arrays)
    return net, stats
