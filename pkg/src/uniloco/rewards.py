"""Reward evaluation for specialist locomotion training.

Two term families: a base table of regularizers that is always active, and
a special table enabled for terrain shaping. Every term is computed from a
pair of consecutive control-step states plus the step diagnostics. Terms
whose textbook formula references lateral (y) geometry or heading reduce in
the sagittal plane; the reduction is documented next to each term.

The total is always the exact weighted sum of the per-term values, so the
decomposition identity total = sum(w_i * term_i) holds to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .sim import BatchState, RobotModel, StepInfo, gravity_body_frame
from .terrain import HeightField

__all__ = [
    "RewardConfig",
    "RewardTracker",
    "evaluate_reward_terms",
    "BASE_TERMS",
    "SPECIAL_TERMS",
    "PHASE1_TERMS",
    "ALL_TERMS",
]

BASE_TERMS = (
    "orientation",
    "dof_acceleration",
    "collision",
    "action_rate",
    "delta_torques",
    "torques",
    "dof_error",
    "feet_stumble",
    "base_height",
    "smoothness",
    "alive",
)

SPECIAL_TERMS = (
    "tracking_goal_velocity",
    "tracking_yaw",
    "lin_vel_z",
    "ang_vel_xy",
    "hip_position",
    "feet_edge",
    "feet_parallel",
    "huge_step",
    "feet_yaw",
    "feet_dis",
    "knee_dis",
    "goal",
    "knee_foot",
    "foot_height",
    "foot_air_time",
)

# the walk-from-scratch phase trains on the base table plus velocity tracking
PHASE1_TERMS = BASE_TERMS + ("tracking_goal_velocity", "tracking_yaw")
ALL_TERMS = BASE_TERMS + SPECIAL_TERMS


@dataclass
class RewardConfig:
    orientation: float = -1.0
    dof_acceleration: float = -2.5e-7
    collision: float = -10.0
    action_rate: float = -0.1
    delta_torques: float = -1.0e-7
    torques: float = -1e-5
    dof_error: float = -0.04
    feet_stumble: float = -1.0
    base_height: float = -20.0
    smoothness: float = -0.005
    alive: float = 0.005
    tracking_goal_velocity: float = 3.0
    tracking_yaw: float = 0.5
    lin_vel_z: float = -1.0
    ang_vel_xy: float = -0.05
    hip_position: float = -0.5
    feet_edge: float = -1.0
    feet_parallel: float = -1.0
    huge_step: float = 0.001
    feet_yaw: float = -2.0
    feet_dis: float = -0.001
    knee_dis: float = -0.001
    goal: float = 0.0002
    knee_foot: float = -0.001
    foot_height: float = 0.01
    foot_air_time: float = 10.0

    def __post_init__(self):
        for f in dc_fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValueError(f"weight {f.name} must be finite")

    def weight(self, term: str) -> float:
        return getattr(self, term)


def _foot_pitch(state: BatchState) -> np.ndarray:
    """World pitch of each foot (n, 2): base pitch plus the leg chain."""
    th = state.theta
    return np.stack(
        [
            state.pitch + th[:, 0] + th[:, 1] + th[:, 2],
            state.pitch + th[:, 3] + th[:, 4] + th[:, 5],
        ],
        axis=-1,
    )


def _ankles(model: RobotModel, state: BatchState) -> np.ndarray:
    """World ankle positions (n, 2 legs, 2)."""
    n = state.n
    out = np.empty((n, 2, 2))
    for leg in range(2):
        j = 3 * leg
        p1 = state.pitch + state.theta[:, j]
        p2 = p1 + state.theta[:, j + 1]
        knee = state.base_pos + model.thigh_m * np.stack([np.sin(p1), -np.cos(p1)], axis=-1)
        out[:, leg] = knee + model.shank_m * np.stack([np.sin(p2), -np.cos(p2)], axis=-1)
    return out


class RewardTracker:
    """Stateful reward evaluator for a batch of environments.

    Keeps the short memories several terms need: the previous two actions,
    the previous torques, and the per-foot air-time clocks. Rows must be
    reset whenever their environment resets.
    """

    EDGE_MARGIN_M = 0.10

    def __init__(self, model: RobotModel, cfg: RewardConfig, n: int):
        self.model = model
        self.cfg = cfg
        self.n = n
        self.default_pose = np.asarray(model.default_pose)
        self.prev_action = np.tile(self.default_pose * 0.0, (n, 1))
        self.prev_prev_action = self.prev_action.copy()
        self.prev_torque = np.zeros((n, model.n_joints))
        self.air_time = np.zeros((n, 2))

    def reset_rows(self, idx):
        self.prev_action[idx] = 0.0
        self.prev_prev_action[idx] = 0.0
        self.prev_torque[idx] = 0.0
        self.air_time[idx] = 0.0

    def step(
        self,
        field: HeightField,
        prev_state: BatchState,
        state: BatchState,
        info: StepInfo,
        action: np.ndarray,
        command: np.ndarray,
        dt: float,
        terrain_level: int = 0,
        terms=ALL_TERMS,
    ):
        """Evaluate one transition. Returns (total (n,), per_term dict)."""
        m, c = self.model, self.cfg
        n = state.n
        t = {}

        if "orientation" in terms:
            # planar reduction: g_y = 0, so the term is g_x^2 = sin^2(pitch)
            g = gravity_body_frame(state.pitch)
            t["orientation"] = g[:, 0] ** 2
        if "dof_acceleration" in terms:
            t["dof_acceleration"] = (((state.theta_dot - prev_state.theta_dot) / dt) ** 2).sum(-1)
        if "collision" in terms:
            t["collision"] = info.collision.astype(np.float64)
        if "action_rate" in terms:
            t["action_rate"] = np.linalg.norm(action - self.prev_action, axis=-1)
        if "delta_torques" in terms:
            t["delta_torques"] = ((info.torque - self.prev_torque) ** 2).sum(-1)
        if "torques" in terms:
            t["torques"] = (info.torque**2).sum(-1)
        if "dof_error" in terms:
            t["dof_error"] = ((state.theta - self.default_pose) ** 2).sum(-1)
        if "feet_stumble" in terms:
            t["feet_stumble"] = info.stumble.sum(-1).astype(np.float64)
        if "base_height" in terms:
            local = field.height_at(state.base_pos[:, 0])
            t["base_height"] = (state.base_pos[:, 1] - local - m.standing_height_m) ** 2
        if "smoothness" in terms:
            d1 = action - self.prev_action
            d0 = self.prev_action - self.prev_prev_action
            t["smoothness"] = np.linalg.norm(d1, axis=-1) + np.linalg.norm(d1 - d0, axis=-1)
        if "alive" in terms:
            t["alive"] = np.ones(n)

        if "tracking_goal_velocity" in terms:
            # target direction is +x, so v_cur . v_hat = v_x
            v_cmd = np.broadcast_to(np.asarray(command, dtype=np.float64), (n, 3))[:, 0]
            safe = np.where(v_cmd > 0, v_cmd, 1.0)
            t["tracking_goal_velocity"] = np.where(
                v_cmd > 0, np.minimum(state.base_vel[:, 0], v_cmd) / safe, 0.0
            )
        if "tracking_yaw" in terms:
            # heading is fixed in the plane: yaw error is identically zero
            t["tracking_yaw"] = np.ones(n)
        if "lin_vel_z" in terms:
            t["lin_vel_z"] = state.base_vel[:, 1] ** 2
        if "ang_vel_xy" in terms:
            # roll rate is zero in the plane; the pitch-rate component survives
            t["ang_vel_xy"] = state.pitch_rate**2
        if "hip_position" in terms:
            d = self.default_pose
            t["hip_position"] = (state.theta[:, 0] - d[0]) ** 2 + (state.theta[:, 3] - d[3]) ** 2
        if "feet_edge" in terms or "foot_height" in terms or "huge_step" in terms:
            ankles = _ankles(m, state)
        if "feet_edge" in terms:
            on_edge = np.zeros(n)
            if terrain_level > 3:
                for leg in range(2):
                    x = ankles[:, leg, 0]
                    near_void = ~field.walkable_at(x - self.EDGE_MARGIN_M) | ~field.walkable_at(
                        x + self.EDGE_MARGIN_M
                    )
                    on_edge += (info.foot_contact[:, leg] & near_void).astype(np.float64)
            t["feet_edge"] = on_edge
        if "feet_parallel" in terms:
            t["feet_parallel"] = (_foot_pitch(state) ** 2).sum(-1)
        if "huge_step" in terms:
            t["huge_step"] = np.abs(ankles[:, 0, 0] - ankles[:, 1, 0])
        if "feet_yaw" in terms:
            # feet cannot yaw in the plane
            t["feet_yaw"] = np.zeros(n)
        if "feet_dis" in terms:
            # lateral ankle separation is identically zero in the plane
            t["feet_dis"] = np.zeros(n)
        if "knee_dis" in terms:
            # lateral knee separation is identically zero in the plane
            t["knee_dis"] = np.zeros(n)
        if "goal" in terms:
            t["goal"] = (state.base_pos[:, 0] >= field.goal_x_m).astype(np.float64)
        if "knee_foot" in terms:
            # lateral knee-to-ankle offset is identically zero in the plane
            t["knee_foot"] = np.zeros(n)
        if "foot_height" in terms:
            clearance = np.zeros(n)
            for leg in range(2):
                ground = field.height_at(ankles[:, leg, 0])
                clearance += np.maximum(ankles[:, leg, 1] - ground, 0.0)
            t["foot_height"] = clearance
        if "foot_air_time" in terms:
            # clocks accumulate while a foot is airborne and pay out on touchdown
            landed = info.foot_contact & (self.air_time > 0.0)
            t["foot_air_time"] = np.where(landed, self.air_time, 0.0).sum(-1)
            self.air_time = np.where(info.foot_contact, 0.0, self.air_time + dt)

        total = np.zeros(n)
        for name, val in t.items():
            total = total + c.weight(name) * val

        self.prev_prev_action = self.prev_action
        self.prev_action = np.array(action, dtype=np.float64)
        self.prev_torque = info.torque.copy()
        return total, t


def evaluate_reward_terms(
    prev_state: BatchState,
    state: BatchState,
    action,
    prev_action,
    field: HeightField,
    cfg: RewardConfig,
    info: StepInfo,
    model: RobotModel = None,
    command=(1.0, 0.0, 0.0),
    dt: float = 0.02,
    terrain_level: int = 0,
    terms=ALL_TERMS,
):
    """One-shot transition evaluation. Returns (total, per_term) with scalars
    when the batch has a single row."""
    model = model or RobotModel()
    tracker = RewardTracker(model, cfg, state.n)
    tracker.prev_action = np.array(prev_action, dtype=np.float64).reshape(state.n, -1)
    tracker.prev_prev_action = tracker.prev_action.copy()
    total, per_term = tracker.step(
        field, prev_state, state, info, np.asarray(action), command, dt, terrain_level, terms
    )
    if state.n == 1:
        return float(total[0]), {k: float(v[0]) for k, v in per_term.items()}
    return total, per_term
