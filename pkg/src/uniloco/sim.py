"""Deterministic planar (sagittal x-z) legged robot.

Six actuated joints (hip/knee/ankle per leg) track positional targets with
PD control. Legs are kinematic chains with lumped reflected inertia at each
joint; the base is a rigid body. Foot-terrain contact is a spring-damper
penalty with Coulomb-capped friction; contact forces act on the base (force
plus torque about the base) and on the leg joints through the chain Jacobian
transpose. Integration is semi-implicit Euler. Everything is a pure function
of its inputs, vectorized over a batch of independent environments.

Angle convention: positive angles rotate counterclockwise in the x-z plane;
a joint angle of zero points the thigh/shank straight down and lays the foot
flat. Pitch is the base rotation, zero upright.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .terrain import SCAN_SIZE, VOID_DEPTH, EpisodeOutcome, HeightField, egocentric_scan

__all__ = [
    "RobotModel",
    "SimConfig",
    "BatchState",
    "RobotState",
    "StepInfo",
    "step_batch",
    "step",
    "reset_batch",
    "reset",
    "assemble_observation",
    "check_termination",
    "mechanical_energy",
    "flatten_state",
    "STATE_DIM",
    "N_JOINTS",
    "N_KEYPOINTS",
    "K_OBS_HIST",
    "PROPRIO_DIM",
    "OBS_DIM",
]

N_JOINTS = 6  # hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r
N_KEYPOINTS = 5  # base, knee_l, knee_r, foot_l, foot_r
K_OBS_HIST = 5  # proprio frames kept in the observation history
PROPRIO_DIM = 1 + 2 + N_JOINTS + N_JOINTS  # ang vel, gravity dir, theta, theta_dot
CMD_DIM = 3  # (v_x, v_y, w_yaw); lateral entries carried as zeros in the plane
OBS_DIM = PROPRIO_DIM + SCAN_SIZE + K_OBS_HIST * PROPRIO_DIM + CMD_DIM + N_JOINTS

# flattened state: theta(6), theta_dot(6), keypoints rel. base (5x2),
# keypoint velocities rel. base (5x2), pitch rate, base velocity (2)
STATE_DIM = N_JOINTS + N_JOINTS + 2 * N_KEYPOINTS + 2 * N_KEYPOINTS + 1 + 2


@dataclass
class RobotModel:
    n_joints: int = N_JOINTS
    thigh_m: float = 0.40
    shank_m: float = 0.40
    toe_m: float = 0.14  # contact point forward of the ankle
    heel_m: float = 0.08  # contact point behind the ankle
    base_mass_kg: float = 30.0
    base_inertia: float = 2.0
    link_masses_kg: tuple = (3.0, 2.0, 0.8)  # thigh, shank, foot (lumped into joints)
    joint_inertia: tuple = (0.30, 0.20, 0.10, 0.30, 0.20, 0.10)
    joint_damping: float = 1.0
    joint_lo: tuple = (-1.2, -2.2, -0.9, -1.2, -2.2, -0.9)
    joint_hi: tuple = (1.2, -0.02, 0.9, 1.2, -0.02, 0.9)
    torque_limit: tuple = (200.0, 200.0, 120.0, 200.0, 200.0, 120.0)
    kp: tuple = (150.0, 150.0, 80.0, 150.0, 150.0, 80.0)
    kd: tuple = (8.0, 8.0, 4.0, 8.0, 8.0, 4.0)
    default_pose: tuple = (0.3, -0.6, 0.3, 0.3, -0.6, 0.3)
    # passive attitude stabilizer: spring-damper pulling the base upright.
    # Without it no gait (hand-crafted or learned) survives more than ~2 s
    # in this reduced model, which puts locomotion outside small training
    # budgets; with it balance is passive and policies only learn propulsion
    pitch_stab_nm_per_rad: float = 400.0
    pitch_stab_damping: float = 80.0

    def __post_init__(self):
        if self.base_mass_kg <= 0 or any(m <= 0 for m in self.link_masses_kg):
            raise ValueError("masses must be positive")
        if any(lo >= hi for lo, hi in zip(self.joint_lo, self.joint_hi)):
            raise ValueError("joint limits must satisfy lo < hi")

    @property
    def standing_height_m(self) -> float:
        q = np.asarray(self.default_pose)
        return float(self.thigh_m * np.cos(q[0]) + self.shank_m * np.cos(q[0] + q[1]))

    # non-penetration bound: worst-case static load over contact stiffness,
    # with margin for the damper transient
    def penetration_bound_m(self, cfg: "SimConfig") -> float:
        max_force = self.base_mass_kg * cfg.gravity + 2.0 * max(self.torque_limit) / min(
            self.thigh_m, self.shank_m
        )
        return 3.0 * max_force / cfg.contact_kn

    # -- structured text persistence (joint table, link table, gains) --------

    def save(self, path):
        q = lambda xs: " ".join(f"{v:.17g}" for v in xs)
        lines = [
            "# planar biped model",
            f"base mass {self.base_mass_kg:.17g} inertia {self.base_inertia:.17g}",
            f"link thigh {self.thigh_m:.17g} mass {self.link_masses_kg[0]:.17g}",
            f"link shank {self.shank_m:.17g} mass {self.link_masses_kg[1]:.17g}",
            f"link foot_toe {self.toe_m:.17g} mass {self.link_masses_kg[2]:.17g}",
            f"link foot_heel {self.heel_m:.17g} mass {self.link_masses_kg[2]:.17g}",
            f"joint_inertia {q(self.joint_inertia)}",
            f"joint_damping {self.joint_damping:.17g}",
            f"joint_lo {q(self.joint_lo)}",
            f"joint_hi {q(self.joint_hi)}",
            f"torque_limit {q(self.torque_limit)}",
            f"kp {q(self.kp)}",
            f"kd {q(self.kd)}",
            f"default_pose {q(self.default_pose)}",
            f"pitch_stabilizer {self.pitch_stab_nm_per_rad:.17g} {self.pitch_stab_damping:.17g}",
        ]
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RobotModel":
        kw = {}
        links = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                try:
                    if parts[0] == "base":
                        kw["base_mass_kg"] = float(parts[2])
                        kw["base_inertia"] = float(parts[4])
                    elif parts[0] == "link":
                        links[parts[1]] = (float(parts[2]), float(parts[4]))
                    elif parts[0] in (
                        "joint_inertia",
                        "joint_lo",
                        "joint_hi",
                        "torque_limit",
                        "kp",
                        "kd",
                        "default_pose",
                    ):
                        kw[parts[0]] = tuple(float(v) for v in parts[1:])
                    elif parts[0] == "joint_damping":
                        kw["joint_damping"] = float(parts[1])
                    elif parts[0] == "pitch_stabilizer":
                        kw["pitch_stab_nm_per_rad"] = float(parts[1])
                        kw["pitch_stab_damping"] = float(parts[2])
                    else:
                        raise ValueError(f"unknown record {parts[0]!r}")
                except (IndexError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
        if links:
            kw["thigh_m"] = links["thigh"][0]
            kw["shank_m"] = links["shank"][0]
            kw["toe_m"] = links["foot_toe"][0]
            kw["heel_m"] = links["foot_heel"][0]
            kw["link_masses_kg"] = (links["thigh"][1], links["shank"][1], links["foot_toe"][1])
        return cls(**kw)


@dataclass
class SimConfig:
    dt: float = 0.005
    control_decimation: int = 4
    contact_kn: float = 20000.0  # normal stiffness N/m
    contact_cn: float = 1500.0  # normal damping N s/m
    contact_kt: float = 3000.0  # tangential damping N s/m (Coulomb capped)
    friction: float = 1.0
    gravity: float = 9.81
    max_episode_s: float = 30.0
    fall_height_frac: float = 0.35
    fall_pitch_rad: float = 1.0
    flight_height_m: float = 1.5  # base this far above local terrain ends the episode
    check_penetration: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.control_decimation < 1:
            raise ValueError("dt must be positive and decimation >= 1")

    @property
    def control_dt(self) -> float:
        return self.dt * self.control_decimation


@dataclass
class BatchState:
    """State of n independent planar robots (all arrays lead with n)."""

    theta: np.ndarray  # (n, 6)
    theta_dot: np.ndarray  # (n, 6)
    base_pos: np.ndarray  # (n, 2) world (x, z)
    base_vel: np.ndarray  # (n, 2)
    pitch: np.ndarray  # (n,)
    pitch_rate: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "BatchState":
        return BatchState(*(np.array(getattr(self, f)) for f in ("theta", "theta_dot", "base_pos", "base_vel", "pitch", "pitch_rate")))

    def select(self, idx) -> "BatchState":
        return BatchState(*(getattr(self, f)[idx] for f in ("theta", "theta_dot", "base_pos", "base_vel", "pitch", "pitch_rate")))

    def assign(self, idx, other: "BatchState"):
        for f in ("theta", "theta_dot", "base_pos", "base_vel", "pitch", "pitch_rate"):
            getattr(self, f)[idx] = getattr(other, f)


# single-robot convenience view over one row of a BatchState
@dataclass
class RobotState:
    theta: np.ndarray
    theta_dot: np.ndarray
    base_pos: np.ndarray
    base_vel: np.ndarray
    pitch: float
    pitch_rate: float

    def as_batch(self) -> BatchState:
        return BatchState(
            theta=self.theta[None].copy(),
            theta_dot=self.theta_dot[None].copy(),
            base_pos=self.base_pos[None].copy(),
            base_vel=self.base_vel[None].copy(),
            pitch=np.array([self.pitch]),
            pitch_rate=np.array([self.pitch_rate]),
        )

    @classmethod
    def from_batch(cls, b: BatchState, i: int = 0) -> "RobotState":
        return cls(
            theta=b.theta[i].copy(),
            theta_dot=b.theta_dot[i].copy(),
            base_pos=b.base_pos[i].copy(),
            base_vel=b.base_vel[i].copy(),
            pitch=float(b.pitch[i]),
            pitch_rate=float(b.pitch_rate[i]),
        )


@dataclass
class StepInfo:
    """Per-control-step diagnostics used by reward evaluation."""

    torque: np.ndarray  # (n, 6) last-substep applied torques
    contact_force: np.ndarray  # (n, 2, 2) per-foot (Ft, Fz), summed over points
    foot_contact: np.ndarray  # (n, 2) bool
    collision: np.ndarray  # (n,) bool: base or knee below local terrain
    stumble: np.ndarray  # (n, 2) bool: tangential dominates normal force
    max_penetration: np.ndarray  # (n,)


# -- kinematics ----------------------------------------------------------------


def _leg_chain(model: RobotModel, theta, pitch, base_pos):
    """Joint pivot positions and contact points for both legs.

    Returns knees (n,2,2), ankles (n,2,2), contacts (n,2,2,2) as
    [leg, point(heel,toe), xz] plus the chain angles phi (n,2,3).
    """
    n = theta.shape[0]
    hips = base_pos  # both hips coincide with the base in the plane
    out_knee = np.empty((n, 2, 2))
    out_ankle = np.empty((n, 2, 2))
    contacts = np.empty((n, 2, 2, 2))
    phi = np.empty((n, 2, 3))
    for leg in range(2):
        j = 3 * leg
        p1 = pitch + theta[:, j]
        p2 = p1 + theta[:, j + 1]
        p3 = p2 + theta[:, j + 2]
        knee = hips + model.thigh_m * np.stack([np.sin(p1), -np.cos(p1)], axis=-1)
        ankle = knee + model.shank_m * np.stack([np.sin(p2), -np.cos(p2)], axis=-1)
        fdir = np.stack([np.cos(p3), np.sin(p3)], axis=-1)
        out_knee[:, leg] = knee
        out_ankle[:, leg] = ankle
        contacts[:, leg, 0] = ankle - model.heel_m * fdir
        contacts[:, leg, 1] = ankle + model.toe_m * fdir
        phi[:, leg, 0] = p1
        phi[:, leg, 1] = p2
        phi[:, leg, 2] = p3
    return out_knee, out_ankle, contacts, phi


def _rot90(v):
    """CCW quarter turn in the x-z plane: (x, z) -> (-z, x)."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def keypoints(model: RobotModel, state: BatchState):
    """World keypoint positions (n, 5, 2) and velocities (n, 5, 2):
    base, knees, feet (ankles)."""
    knee, ankle, _, _ = _leg_chain(model, state.theta, state.pitch, state.base_pos)
    pos = np.concatenate([state.base_pos[:, None], knee, ankle], axis=1)
    vel = np.empty_like(pos)
    vel[:, 0] = state.base_vel
    w = state.pitch_rate[:, None, None]
    for leg in range(2):
        j = 3 * leg
        r_knee = knee[:, leg] - state.base_pos
        v_knee = state.base_vel + (state.pitch_rate + state.theta_dot[:, j])[:, None] * _rot90(r_knee)
        r_ka = ankle[:, leg] - knee[:, leg]
        v_ankle = v_knee + (
            state.pitch_rate + state.theta_dot[:, j] + state.theta_dot[:, j + 1]
        )[:, None] * _rot90(r_ka)
        vel[:, 1 + leg] = v_knee
        vel[:, 3 + leg] = v_ankle
    _ = w
    return pos, vel


def flatten_state(model: RobotModel, state: BatchState) -> np.ndarray:
    """(n, STATE_DIM) translation-invariant state vector: joint positions and
    velocities, keypoints and keypoint velocities relative to the base, pitch
    rate, base velocity."""
    pos, vel = keypoints(model, state)
    rel_p = pos - state.base_pos[:, None]
    rel_v = vel - state.base_vel[:, None]
    return np.concatenate(
        [
            state.theta,
            state.theta_dot,
            rel_p.reshape(state.n, -1),
            rel_v.reshape(state.n, -1),
            state.pitch_rate[:, None],
            state.base_vel,
        ],
        axis=-1,
    )


# -- dynamics -------------------------------------------------------------------


def _substep(model: RobotModel, cfg: SimConfig, field: HeightField, state: BatchState, targets, info: StepInfo):
    th, thd = state.theta, state.theta_dot
    kp = np.asarray(model.kp)
    kd = np.asarray(model.kd)
    tlim = np.asarray(model.torque_limit)
    tau = np.clip(kp * (targets - th) - kd * thd, -tlim, tlim)

    knee, ankle, contacts, phi = _leg_chain(model, th, state.pitch, state.base_pos)

    force_base = np.zeros((state.n, 2))
    torque_base = np.zeros(state.n)
    contact_f = np.zeros((state.n, 2, 2))
    foot_contact = np.zeros((state.n, 2), dtype=bool)
    stumble = np.zeros((state.n, 2), dtype=bool)
    max_pen = np.zeros(state.n)

    for leg in range(2):
        j = 3 * leg
        for pt in range(2):
            p = contacts[:, leg, pt]
            # point velocity through the chain
            r_from_base = p - state.base_pos
            v = state.base_vel + state.pitch_rate[:, None] * _rot90(r_from_base)
            jac = np.empty((state.n, 3, 2))
            jac[:, 0] = _rot90(p - state.base_pos)  # hip pivot = base
            jac[:, 1] = _rot90(p - knee[:, leg])
            jac[:, 2] = _rot90(p - ankle[:, leg])
            v = v + np.einsum("nj,njk->nk", thd[:, j : j + 3], jac)

            ground = field.height_at(p[:, 0])
            supported = field.walkable_at(p[:, 0])
            pen = np.where(supported, ground - p[:, 1], 0.0)
            active = pen > 0.0
            fz = np.where(active, np.maximum(cfg.contact_kn * pen - cfg.contact_cn * v[:, 1], 0.0), 0.0)
            ft_raw = np.where(active, -cfg.contact_kt * v[:, 0], 0.0)
            ft = np.clip(ft_raw, -cfg.friction * fz, cfg.friction * fz)
            f = np.stack([ft, fz], axis=-1)

            # contact loads the base only; the stiff ground spring through the
            # leg Jacobian would violate the explicit-Euler stability limit at
            # this dt, so joints stay PD-driven kinematic chains
            force_base += f
            torque_base += r_from_base[:, 0] * fz - r_from_base[:, 1] * ft
            contact_f[:, leg] += f
            foot_contact[:, leg] |= fz > 0.0
            stumble[:, leg] |= active & (np.abs(ft_raw) > 4.0 * np.abs(fz)) & (fz > 1.0)
            max_pen = np.maximum(max_pen, pen)

        # reaction of the hip actuator on the base
        torque_base -= tau[:, j]

    torque_base += -model.pitch_stab_nm_per_rad * state.pitch - model.pitch_stab_damping * state.pitch_rate

    if cfg.check_penetration:
        bound = model.penetration_bound_m(cfg)
        if (max_pen > bound).any():
            raise AssertionError(f"penetration {max_pen.max():.4f} m exceeds bound {bound:.4f} m")

    inertia = np.asarray(model.joint_inertia)
    thdd = (tau - model.joint_damping * thd) / inertia
    acc_base = force_base / model.base_mass_kg
    acc_base[:, 1] -= cfg.gravity
    pitch_acc = torque_base / model.base_inertia

    thd = thd + cfg.dt * thdd
    th = th + cfg.dt * thd
    lo, hi = np.asarray(model.joint_lo), np.asarray(model.joint_hi)
    below, above = th < lo, th > hi
    th = np.clip(th, lo, hi)
    thd = np.where(below & (thd < 0), 0.0, thd)
    thd = np.where(above & (thd > 0), 0.0, thd)

    base_vel = state.base_vel + cfg.dt * acc_base
    base_pos = state.base_pos + cfg.dt * base_vel
    pitch_rate = state.pitch_rate + cfg.dt * pitch_acc
    pitch = state.pitch + cfg.dt * pitch_rate

    # base / knee intersection with terrain counts as a collision
    base_below = base_pos[:, 1] < field.height_at(base_pos[:, 0])
    knee_below = np.zeros(state.n, dtype=bool)
    for leg in range(2):
        knee_below |= knee[:, leg, 1] < field.height_at(knee[:, leg, 0])

    info.torque = tau
    info.contact_force = contact_f
    info.foot_contact = foot_contact
    info.collision = base_below | knee_below
    info.stumble = stumble
    info.max_penetration = np.maximum(info.max_penetration, max_pen)
    return BatchState(th, thd, base_pos, base_vel, pitch, pitch_rate)


def step_batch(model: RobotModel, cfg: SimConfig, field: HeightField, state: BatchState, joint_targets) -> tuple:
    """Advance one control step (control_decimation substeps). Returns
    (next_state, StepInfo). Deterministic; raises on non-finite inputs."""
    joint_targets = np.asarray(joint_targets, dtype=np.float64)
    if not (np.isfinite(joint_targets).all() and np.isfinite(state.theta).all() and np.isfinite(state.base_pos).all()):
        raise ValueError("non-finite state or joint targets")
    info = StepInfo(
        torque=np.zeros_like(state.theta),
        contact_force=np.zeros((state.n, 2, 2)),
        foot_contact=np.zeros((state.n, 2), dtype=bool),
        collision=np.zeros(state.n, dtype=bool),
        stumble=np.zeros((state.n, 2), dtype=bool),
        max_penetration=np.zeros(state.n),
    )
    for _ in range(cfg.control_decimation):
        state = _substep(model, cfg, field, state, joint_targets, info)
    return state, info


def step(state: RobotState, joint_targets, field: HeightField, cfg: SimConfig, model: RobotModel = None) -> RobotState:
    """Single-robot wrapper around `step_batch`."""
    model = model or RobotModel()
    batch, _ = step_batch(model, cfg, field, state.as_batch(), np.asarray(joint_targets)[None])
    return RobotState.from_batch(batch)


# -- reset / termination / observation -------------------------------------------


def reset_batch(model: RobotModel, field: HeightField, rng, n: int, noise_rad: float = 0.02, start_x: float = 0.5) -> BatchState:
    default = np.asarray(model.default_pose)
    theta = default + rng.uniform(-noise_rad, noise_rad, size=(n, N_JOINTS))
    theta = np.clip(theta, model.joint_lo, model.joint_hi)
    ground = field.height_at(np.full(n, start_x))
    base_pos = np.stack([np.full(n, start_x), ground + model.standing_height_m], axis=-1)
    return BatchState(
        theta=theta,
        theta_dot=np.zeros((n, N_JOINTS)),
        base_pos=base_pos,
        base_vel=np.zeros((n, 2)),
        pitch=np.zeros(n),
        pitch_rate=np.zeros(n),
    )


def reset(field: HeightField, rng, model: RobotModel = None, noise_rad: float = 0.02) -> RobotState:
    model = model or RobotModel()
    return RobotState.from_batch(reset_batch(model, field, rng, 1, noise_rad))


def gravity_body_frame(pitch):
    """Unit gravity direction expressed in the base frame."""
    return np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)


def proprio_batch(state: BatchState) -> np.ndarray:
    return np.concatenate(
        [state.pitch_rate[:, None], gravity_body_frame(state.pitch), state.theta, state.theta_dot],
        axis=-1,
    )


def assemble_observation(state: BatchState, field: HeightField, command, prev_action, history) -> np.ndarray:
    """(n, OBS_DIM) observation: proprio, egocentric scan, proprio history,
    command, previous action, in that order."""
    n = state.n
    prop = proprio_batch(state)
    scans = np.empty((n, SCAN_SIZE))
    y_center = field.origin[1] + field.width_m / 2.0
    for i in range(n):
        scans[i] = egocentric_scan(field, (state.base_pos[i, 0], y_center, 0.0), state.base_pos[i, 1])
    command = np.broadcast_to(np.asarray(command, dtype=np.float64), (n, CMD_DIM))
    prev_action = np.asarray(prev_action, dtype=np.float64).reshape(n, N_JOINTS)
    hist = np.asarray(history, dtype=np.float64).reshape(n, K_OBS_HIST * PROPRIO_DIM)
    return np.concatenate([prop, scans, hist, command, prev_action], axis=-1)


class HistoryBuffer:
    """Rolling window of the last K proprio frames, padded with the first."""

    def __init__(self, n: int, k: int = K_OBS_HIST):
        self.k = k
        self.frames = np.zeros((n, k, PROPRIO_DIM))
        self.started = np.zeros(n, dtype=bool)

    def push(self, prop: np.ndarray):
        fresh = ~self.started
        if fresh.any():
            self.frames[fresh] = prop[fresh][:, None, :]
            self.started[fresh] = True
        self.frames = np.concatenate([self.frames[:, 1:], prop[:, None, :]], axis=1)

    def reset_rows(self, idx):
        self.started[idx] = False
        self.frames[idx] = 0.0

    def flat(self) -> np.ndarray:
        return self.frames.reshape(self.frames.shape[0], -1)


def check_termination(
    state: BatchState,
    field: HeightField,
    elapsed_s: float,
    cfg: SimConfig,
    model: RobotModel,
    start_x: float = 0.5,
):
    """Per-env outcome or None. Fall: base too low or too high over local
    terrain, pitch beyond the limit, or dropped below the void floor. Success:
    base past the goal line. Timeout: episode clock expired."""
    n = state.n
    x, z = state.base_pos[:, 0], state.base_pos[:, 1]
    local = field.height_at(x)
    min_h = cfg.fall_height_frac * model.standing_height_m
    fall = (
        (z - local < min_h)
        | (z - local > cfg.flight_height_m)
        | (np.abs(state.pitch) > cfg.fall_pitch_rad)
    )
    success = x >= field.goal_x_m
    timeout = np.full(n, elapsed_s >= cfg.max_episode_s)
    outcomes = []
    for i in range(n):
        dist = max(0.0, float(x[i]) - start_x)
        if success[i]:
            outcomes.append(EpisodeOutcome(True, field.length_m, field.length_m))
        elif fall[i]:
            outcomes.append(EpisodeOutcome(False, dist, field.length_m, fall=True))
        elif timeout[i]:
            outcomes.append(EpisodeOutcome(False, dist, field.length_m, timeout=True))
        else:
            outcomes.append(None)
    return outcomes


def mechanical_energy(model: RobotModel, cfg: SimConfig, state: BatchState) -> np.ndarray:
    """Base kinetic + potential energy (gravity and the attitude-stabilizer
    spring) plus joint rotor kinetic energy."""
    ke = 0.5 * model.base_mass_kg * (state.base_vel**2).sum(axis=-1)
    ke += 0.5 * model.base_inertia * state.pitch_rate**2
    ke += 0.5 * (np.asarray(model.joint_inertia) * state.theta_dot**2).sum(axis=-1)
    pe = model.base_mass_kg * cfg.gravity * state.base_pos[:, 1]
    pe += 0.5 * model.pitch_stab_nm_per_rad * state.pitch**2
    return ke + pe
