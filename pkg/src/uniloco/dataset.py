"""Skill-data recording and serving.

Episodes store the full per-frame record of a specialist rollout: actions,
egocentric heightmap, observations, reward terms, joint states, and rigid
body states (planar values zero-padded to the standard 13-real layout of
position, quaternion, linear and angular velocity per body). A dataset is
an immutable in-memory collection of closed episodes plus a manifest with
per-dimension statistics of the flattened robot state; it persists to a
single little-endian binary file (f32 payloads, f64 in memory) and serves
(history K, horizon H) trajectory windows and episode-level subsets.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .sim import N_JOINTS, N_KEYPOINTS, STATE_DIM, BatchState, RobotModel, flatten_state
from .terrain import SCAN_SIZE, EpisodeOutcome

__all__ = [
    "EpisodeRecord",
    "EpisodeRecorder",
    "Dataset",
    "TrajectoryWindow",
    "sample_window",
    "window_count",
    "subset",
    "flattened_states",
    "MAGIC",
]

MAGIC = b"DPSK"
VERSION = 1
N_BODIES = N_KEYPOINTS  # base, both knees, both feet
BODY_DIM = 13  # position 3, quaternion 4 (xyzw), linear 3, angular 3

ARRAY_FIELDS = ("actions", "heightmap", "observations", "rewards", "dof_states", "rigid_body_states")


@dataclass
class EpisodeRecord:
    actions: np.ndarray  # (T, n_joints)
    heightmap: np.ndarray  # (T, 396)
    observations: np.ndarray  # (T, D_obs) or (T, 0) when not recorded
    rewards: np.ndarray  # (T, R)
    dof_states: np.ndarray  # (T, n_joints, 2) position, velocity
    rigid_body_states: np.ndarray  # (T, B, 13)
    kind: str = "flat"
    difficulty: int = 0
    seed: int = 0
    outcome: EpisodeOutcome = None

    def __post_init__(self):
        t = self.actions.shape[0]
        if t < 1:
            raise ValueError("episode must have at least one frame")
        for name in ARRAY_FIELDS:
            if getattr(self, name).shape[0] != t:
                raise ValueError(f"{name} length differs from T={t}")

    @property
    def t(self) -> int:
        return self.actions.shape[0]


def _pack_bodies(state: BatchState, model: RobotModel) -> np.ndarray:
    """(n, B, 13) world rigid body states, planar values zero-padded."""
    from .sim import keypoints

    pos, vel = keypoints(model, state)
    n = state.n
    out = np.zeros((n, N_BODIES, BODY_DIM))
    out[:, :, 0] = pos[:, :, 0]  # x
    out[:, :, 2] = pos[:, :, 1]  # z
    # all bodies carry the base orientation; legs are massless chain links
    out[:, :, 4] = np.sin(state.pitch / 2)[:, None]  # quaternion y
    out[:, :, 6] = np.cos(state.pitch / 2)[:, None]  # quaternion w
    out[:, :, 7] = vel[:, :, 0]
    out[:, :, 9] = vel[:, :, 1]
    out[:, :, 11] = state.pitch_rate[:, None]  # angular y
    return out


def flattened_states(ep: EpisodeRecord) -> np.ndarray:
    """(T, STATE_DIM) translation-invariant states rebuilt from the stored
    joint and rigid-body tables."""
    theta = ep.dof_states[:, :, 0]
    theta_dot = ep.dof_states[:, :, 1]
    rb = ep.rigid_body_states
    pos = np.stack([rb[:, :, 0], rb[:, :, 2]], axis=-1)
    vel = np.stack([rb[:, :, 7], rb[:, :, 9]], axis=-1)
    base_p = pos[:, 0]
    base_v = vel[:, 0]
    rel_p = pos - base_p[:, None]
    rel_v = vel - base_v[:, None]
    pitch_rate = rb[:, 0, 11]
    t = ep.t
    return np.concatenate(
        [theta, theta_dot, rel_p.reshape(t, -1), rel_v.reshape(t, -1),
         pitch_rate[:, None], base_v],
        axis=-1,
    )


class EpisodeRecorder:
    """Accumulates one episode frame by frame; `close` freezes it."""

    def __init__(self, model: RobotModel, kind: str, difficulty: int, seed: int,
                 include_observations: bool = True):
        self.model = model
        self.kind = kind
        self.difficulty = difficulty
        self.seed = seed
        self.include_observations = include_observations
        self._frames = []
        self._closed = False

    def record_step(self, state: BatchState, observation, action, reward_terms):
        """Append one frame. state must be a single-row BatchState; the scan
        block of the observation doubles as the heightmap field."""
        if self._closed:
            raise RuntimeError("record_step after close")
        obs = np.asarray(observation, dtype=np.float64).reshape(-1)
        from .sim import PROPRIO_DIM

        scan = obs[PROPRIO_DIM : PROPRIO_DIM + SCAN_SIZE]
        self._frames.append(
            (
                np.asarray(action, dtype=np.float64).reshape(-1),
                scan.copy(),
                obs if self.include_observations else np.empty(0),
                np.asarray(reward_terms, dtype=np.float64).reshape(-1),
                np.stack([state.theta[0], state.theta_dot[0]], axis=-1),
                _pack_bodies(state, self.model)[0],
            )
        )

    def close(self, outcome: EpisodeOutcome) -> EpisodeRecord:
        if self._closed:
            raise RuntimeError("recorder already closed")
        self._closed = True
        cols = list(zip(*self._frames))
        return EpisodeRecord(
            actions=np.stack(cols[0]),
            heightmap=np.stack(cols[1]),
            observations=np.stack(cols[2]),
            rewards=np.stack(cols[3]),
            dof_states=np.stack(cols[4]),
            rigid_body_states=np.stack(cols[5]),
            kind=self.kind,
            difficulty=self.difficulty,
            seed=self.seed,
            outcome=outcome,
        )


def _quantize(ep: EpisodeRecord) -> EpisodeRecord:
    arrays = {}
    dirty = False
    for name in ARRAY_FIELDS:
        arr = getattr(ep, name)
        q = arr.astype(np.float32).astype(np.float64)
        if not np.array_equal(q, arr):
            dirty = True
        arrays[name] = q
    return dc_replace(ep, **arrays) if dirty else ep


class Dataset:
    """Immutable collection of closed episodes plus summary statistics."""

    def __init__(self, episodes, model: RobotModel = None, seed: int = 0,
                 reward_names=(), notes: str = ""):
        # arrays live as f64 but are quantized through the f32 on-disk
        # representation up front, so statistics and save/load round trips
        # are exact
        self.episodes = [_quantize(ep) for ep in episodes]
        self.model = model or RobotModel()
        self.seed = seed
        self.reward_names = tuple(reward_names)
        self.notes = notes
        self.state_mean, self.state_std = self._state_stats()

    def _state_stats(self):
        if not self.episodes:
            return np.zeros(STATE_DIM), np.ones(STATE_DIM)
        states = np.concatenate([flattened_states(ep) for ep in self.episodes])
        std = states.std(axis=0)
        return states.mean(axis=0), np.where(std > 1e-12, std, 1.0)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def n_frames(self) -> int:
        return sum(ep.t for ep in self.episodes)

    def terrain_histogram(self) -> dict:
        hist = {}
        for ep in self.episodes:
            hist[ep.kind] = hist.get(ep.kind, 0) + 1
        return hist

    def model_hash(self) -> str:
        """Digest of the model's canonical text form."""
        import os
        import tempfile

        fd, path = tempfile.mkstemp(suffix=".txt")
        os.close(fd)
        try:
            self.model.save(path)
            with open(path) as f:
                text = f.read()
        finally:
            os.unlink(path)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (states - self.state_mean) / self.state_std

    def denormalize(self, states: np.ndarray) -> np.ndarray:
        return states * self.state_std + self.state_mean

    # -- persistence -----------------------------------------------------------

    def manifest_text(self) -> str:
        q = lambda xs: " ".join(f"{v:.17g}" for v in xs)
        lines = [
            f"version {VERSION}",
            f"model_hash {self.model_hash()}",
            f"state_dim {STATE_DIM}",
            f"episodes {self.n_episodes}",
            f"frames {self.n_frames}",
            f"seed {self.seed}",
            f"reward_names {' '.join(self.reward_names) if self.reward_names else '-'}",
            f"state_mean {q(self.state_mean)}",
            f"state_std {q(self.state_std)}",
        ]
        for kind, count in sorted(self.terrain_histogram().items()):
            lines.append(f"terrain {kind} {count}")
        if self.notes:
            lines.append(f"notes {self.notes}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<H", VERSION))
            manifest = self.manifest_text().encode()
            f.write(struct.pack("<I", len(manifest)))
            f.write(manifest)
            f.write(struct.pack("<I", self.n_episodes))
            for ep in self.episodes:
                kind = ep.kind.encode()
                out = ep.outcome or EpisodeOutcome(False, 0.0, 1.0, timeout=True)
                f.write(struct.pack("<H", len(kind)))
                f.write(kind)
                f.write(
                    struct.pack(
                        "<IiQBBBddd",
                        ep.t,
                        ep.difficulty,
                        ep.seed % 2**64,
                        int(out.success),
                        int(out.fall),
                        int(out.timeout),
                        out.distance_m,
                        out.terrain_length_m,
                        0.0,
                    )
                )
                f.write(struct.pack("<H", len(ARRAY_FIELDS)))
                for name in ARRAY_FIELDS:
                    arr = np.ascontiguousarray(getattr(ep, name), dtype=np.float32)
                    nb = name.encode()
                    f.write(struct.pack("<H", len(nb)))
                    f.write(nb)
                    f.write(struct.pack("<I", arr.ndim))
                    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                    f.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as f:
            raw = f.read()
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(raw):
                raise ValueError(f"truncated dataset file at offset {off}")
            chunk = raw[off : off + n]
            off += n
            return chunk

        if take(4) != MAGIC:
            raise ValueError("bad magic: not a dataset file")
        (version,) = struct.unpack("<H", take(2))
        if version != VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        (mlen,) = struct.unpack("<I", take(4))
        manifest = take(mlen).decode()
        (n_eps,) = struct.unpack("<I", take(4))
        episodes = []
        for _ in range(n_eps):
            (klen,) = struct.unpack("<H", take(2))
            kind = take(klen).decode()
            t, difficulty, seed, succ, fall, timeout, dist, tlen, _pad = struct.unpack(
                "<IiQBBBddd", take(4 + 4 + 8 + 3 + 24)
            )
            outcome = EpisodeOutcome(bool(succ), dist, tlen, fall=bool(fall), timeout=bool(timeout))
            (n_fields,) = struct.unpack("<H", take(2))
            arrays = {}
            for _ in range(n_fields):
                (nlen,) = struct.unpack("<H", take(2))
                name = take(nlen).decode()
                (ndim,) = struct.unpack("<I", take(4))
                shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
                count = int(np.prod(shape)) if ndim else 1
                data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
                arrays[name] = data.astype(np.float64)
            episodes.append(
                EpisodeRecord(kind=kind, difficulty=difficulty, seed=seed, outcome=outcome, **arrays)
            )
        if off != len(raw):
            raise ValueError(f"trailing bytes after offset {off}")
        ds = cls(episodes)
        ds._check_manifest(manifest)
        ds.manifest = manifest
        for line in manifest.splitlines():
            if line.startswith("seed "):
                ds.seed = int(line.split()[1])
            elif line.startswith("reward_names "):
                names = line.split()[1:]
                ds.reward_names = () if names == ["-"] else tuple(names)
            elif line.startswith("notes "):
                ds.notes = line[len("notes "):]
        return ds

    def _check_manifest(self, manifest: str):
        stored = {}
        for line in manifest.splitlines():
            parts = line.split()
            if parts[0] in ("episodes", "frames"):
                stored[parts[0]] = int(parts[1])
            elif parts[0] in ("state_mean", "state_std"):
                stored[parts[0]] = np.array([float(v) for v in parts[1:]])
        if stored["episodes"] != self.n_episodes or stored["frames"] != self.n_frames:
            raise ValueError("manifest counts disagree with stored episodes")
        for key, ours in (("state_mean", self.state_mean), ("state_std", self.state_std)):
            if not np.allclose(stored[key], ours, atol=1e-12, rtol=0):
                raise ValueError(f"manifest {key} disagrees with recomputed statistics")


@dataclass
class TrajectoryWindow:
    history: np.ndarray  # (K, STATE_DIM) x_{t-K+1..t}, padded with frame 0
    future: np.ndarray  # (H, STATE_DIM) x_{t+1..t+H}
    scan: np.ndarray  # (396,) terrain context at t
    normalized: bool = False
    episode: int = -1
    offset: int = -1


def window_count(ep_t: int, h: int) -> int:
    """Valid anchor offsets t in an episode of length ep_t: the future block
    t+1..t+H must exist; early anchors pad history with the first frame."""
    return max(0, ep_t - h)


def sample_window(ds: Dataset, rng: np.random.Generator, k: int, h: int,
                  normalized: bool = True) -> TrajectoryWindow:
    """Uniform draw over all valid (episode, offset) pairs."""
    counts = np.array([window_count(ep.t, h) for ep in ds.episodes])
    total = counts.sum()
    if total == 0:
        raise ValueError(f"no episode long enough for horizon {h}")
    flat = int(rng.integers(total))
    cum = np.cumsum(counts)
    ei = int(np.searchsorted(cum, flat, side="right"))
    t = flat - (cum[ei - 1] if ei else 0)
    ep = ds.episodes[ei]
    states = flattened_states(ep)
    lo = t - k + 1
    if lo >= 0:
        hist = states[lo : t + 1]
    else:
        pad = np.repeat(states[:1], -lo, axis=0)
        hist = np.concatenate([pad, states[: t + 1]])
    future = states[t + 1 : t + 1 + h]
    scan = ep.heightmap[t]
    if normalized:
        hist = ds.normalize(hist)
        future = ds.normalize(future)
    return TrajectoryWindow(hist.copy(), future.copy(), scan.copy(), normalized, ei, t)


def subset(ds: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Episode-level sample without replacement targeting fraction of the
    frame count; stats are recomputed for the new collection."""
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        picked = list(ds.episodes)
    else:
        target = fraction * ds.n_frames
        order = rng.permutation(ds.n_episodes)
        picked, frames = [], 0
        for i in order:
            if frames >= target:
                break
            picked.append(ds.episodes[i])
            frames += ds.episodes[i].t
    return Dataset(picked, model=ds.model, seed=ds.seed,
                   reward_names=ds.reward_names, notes=ds.notes)
