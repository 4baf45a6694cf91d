"""Planar quadruped environment.

Wraps the compiled dynamics with everything an episode needs: observation
assembly (a short history of proprioception), first-order action filtering,
actuation latency, per-episode domain randomization, IMU simulation, and
termination bookkeeping.  Rewards are deliberately not computed here — the
task layer owns reward definitions and whether they read true or estimated
state.

Observations stack the ``obs_history`` most recent frames of
[measured pitch, joint angles, previous action], newest first:
3 * (1 + 8 + 8) = 51 entries by default.  At episode start the slots for
not-yet-seen frames are zero-padded.

Terminations follow the usual failure/timeout split: failure means the torso
touched the ground or the pitch left the allowed band (disableable, e.g. for
recovery training where falling is the starting point, not the end), timeout
means the episode clock ran out.  ``step`` keeps simulating after either —
callers that stitch logical episodes on one persistent world restart the
clock with ``reset_clock`` instead of resetting the physics.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..buffers import Termination
from ..errors import ConfigError
from ..motions import N_JOINTS, POSE_DIM
from . import physics
from .model import RobotModel
from .randomize import RandomizeConfig, sample_randomization
from .sensors import Imu, ImuConfig
from .terrain import flat

OBS_FRAME_DIM = 1 + N_JOINTS + N_JOINTS


@dataclass
class EnvConfig:
    plane: str = "sagittal"  # "sagittal" or "frontal": sets drop attitudes
    control_hz: float = 100.0 / 3.0  # 33.3 Hz control, 30 x 1 ms substeps
    n_substeps: int = 30
    episode_time_limit: float = 10.0
    action_filter_beta: float = 0.3
    obs_history: int = 3
    fail_on_fall: bool = True
    pitch_fail_limit: float = 1.0
    workspace_halfwidth: float = np.inf
    drop_height: tuple = (0.45, 0.55)
    drop_attitude: tuple = None  # None: derived from plane
    drop_joints: np.ndarray = None  # None: uniform draw inside limits
    drop_settle_time: float = 1.5
    imu: ImuConfig = field(default_factory=ImuConfig)
    randomize: RandomizeConfig = field(
        default_factory=lambda: RandomizeConfig(enabled=False))

    def __post_init__(self):
        if self.plane not in ("sagittal", "frontal"):
            raise ConfigError(f"unknown plane {self.plane!r}")
        if self.control_hz <= 0 or self.n_substeps < 1:
            raise ConfigError("control_hz and n_substeps must be positive")
        if not 0.0 < self.action_filter_beta <= 1.0:
            raise ConfigError("action_filter_beta must be in (0, 1]")
        if self.obs_history < 1:
            raise ConfigError("obs_history must be at least 1")
        if self.drop_joints is not None:
            self.drop_joints = np.asarray(self.drop_joints, dtype=np.float64)
            if self.drop_joints.shape != (N_JOINTS,):
                raise ConfigError(
                    f"drop_joints must have shape ({N_JOINTS},)")

    @property
    def control_dt(self):
        return 1.0 / self.control_hz

    @property
    def drop_attitude_range(self):
        if self.drop_attitude is not None:
            return tuple(self.drop_attitude)
        if self.plane == "sagittal":
            return (-np.pi / 4.0, np.pi / 4.0)
        return (-3.0 * np.pi / 4.0, 3.0 * np.pi / 4.0)


def sample_drop_pose(rng, config, model, terrain):
    """Draw a mid-air state for reset training: random height above the
    ground, random attitude in the active plane's range, random joints
    drawn 10% inside their limits (or the configured fixed posture).
    Returns (q, qd) before any settling."""
    q = np.zeros(POSE_DIM)
    q[0] = 0.0
    q[1] = rng.uniform(*config.drop_height) + float(terrain.height_at(0.0))
    q[2] = rng.uniform(*config.drop_attitude_range)
    if config.drop_joints is not None:
        q[3:] = config.drop_joints
    else:
        lims = model.joint_limits
        span = lims[:, 1] - lims[:, 0]
        q[3:] = rng.uniform(lims[:, 0] + 0.1 * span, lims[:, 1] - 0.1 * span)
    return q, np.zeros(POSE_DIM)


class QuadrupedEnv:
    """One robot on one terrain; stateful across control steps."""

    def __init__(self, model=None, terrain=None, config=None, seed=0):
        self.base_model = model if model is not None else RobotModel()
        self.terrain = terrain if terrain is not None else flat()
        self.config = config if config is not None else EnvConfig()
        ss = np.random.SeedSequence(seed)
        s_rand, s_imu, s_drop = ss.spawn(3)
        self._rand_rng = np.random.default_rng(s_rand)
        self._drop_rng = np.random.default_rng(s_drop)
        self.imu = Imu(self.config.imu, self.base_model.gravity,
                       np.random.default_rng(s_imu))

        self.q = np.zeros(POSE_DIM)
        self.qd = np.zeros(POSE_DIM)
        self.time = 0.0
        self.episode_index = -1
        self._needs_reset = True
        self._history = deque(maxlen=self.config.obs_history)
        self._prev_action = np.zeros(N_JOINTS)
        self._filtered = np.zeros(N_JOINTS)
        self._action_queue = deque()
        self._apply_randomization(None)

    # -- configuration plumbing ---------------------------------------------

    @property
    def obs_dim(self):
        return self.config.obs_history * OBS_FRAME_DIM

    @property
    def action_dim(self):
        return N_JOINTS

    @property
    def control_dt(self):
        return self.config.control_dt

    def _apply_randomization(self, episode_rand):
        if episode_rand is None:
            self.model = self.base_model
            friction = self.terrain.friction
            self._latency = 0
        else:
            self.model = self.base_model.scaled(
                mass_scale=episode_rand.mass_scale,
                strength_scale=episode_rand.strength_scale,
                inertia_scale=episode_rand.inertia_scale)
            friction = (episode_rand.friction
                        if episode_rand.friction is not None
                        else self.terrain.friction)
            self._latency = episode_rand.latency_steps
        self.randomization = episode_rand
        self._geom = self.model.geom()
        self._masses = self.model.masses()
        self._inertias = self.model.inertias()
        self._contact = self.model.contact_params(friction,
                                                  self.terrain.restitution)
        self._pd = self.model.pd_params()
        self._strength = self.model.strength

    # -- resets --------------------------------------------------------------

    def reset(self, mode="reference", motion=None, phase=None, q=None,
              qd=None):
        """Start an episode.

        mode "reference": initialize on ``motion`` at time ``phase`` (drawn
            uniformly over one period when phase is None).
        mode "drop": sample a mid-air attitude and let the robot fall until
            first ground contact (or the settle budget runs out).
        mode "pose": explicit q (and optional qd).
        """
        self.episode_index += 1
        rand = (sample_randomization(self._rand_rng, self.config.randomize)
                if self.config.randomize.enabled else None)
        self._apply_randomization(rand)
        self.imu.reset()

        if mode == "reference":
            if motion is None:
                raise ConfigError("reference reset needs a motion")
            if phase is None:
                phase = float(self._drop_rng.uniform(0.0, motion.duration))
            self.q = motion.pose_at(phase).copy()
            self.q[0] = self.q[0] - motion.pose_at(0.0)[0]  # start near x=0
            self.q[1] += float(self.terrain.height_at(self.q[0]))
            self.qd = motion.velocity_at(phase).copy()
            self.motion_phase = phase
        elif mode == "drop":
            self.q, self.qd = self._sample_drop_state()
            self.motion_phase = 0.0
        elif mode == "pose":
            if q is None:
                raise ConfigError("pose reset needs q")
            self.q = np.asarray(q, dtype=np.float64).copy()
            self.qd = (np.zeros(POSE_DIM) if qd is None
                       else np.asarray(qd, dtype=np.float64).copy())
            self.motion_phase = 0.0
        else:
            raise ConfigError(f"unknown reset mode {mode!r}")

        self.time = 0.0
        self._clock_limit = None
        self._needs_reset = False
        hold = self.model.targets_to_action(self.q[3:])
        self._prev_action = hold.copy()
        self._filtered = hold.copy()
        self._action_queue = deque([hold.copy()] * self._latency)
        self._last_counts = np.zeros(physics.N_CONTACTS)
        self._last_acc = np.zeros(2)
        # zero-pad the not-yet-seen history slots
        frame = self._frame(self._read_imu(np.zeros(2)))
        pad = [np.zeros(OBS_FRAME_DIM)] * (self.config.obs_history - 1)
        self._history = deque([frame] + pad,
                              maxlen=self.config.obs_history)
        return self.observe()

    def _sample_drop_state(self):
        cfg = self.config
        q, qd = sample_drop_pose(self._drop_rng, cfg, self.model,
                                 self.terrain)
        # fall with the PD holding the sampled joints until first touch
        targets = q[3:].copy()
        n_settle = int(cfg.drop_settle_time / cfg.control_dt)
        h = cfg.control_dt / cfg.n_substeps
        for _ in range(n_settle):
            counts, _ = physics.control_step(
                q, qd, targets, cfg.n_substeps, h, self._geom, self._masses,
                self._inertias, self.model.gravity, self._contact,
                self._strength, self._pd, self.terrain.heights,
                self.terrain.cell, self.terrain.x0)
            if counts.sum() > 0:
                break
        return q, qd

    def reset_clock(self, time_limit=None):
        """Begin a new logical episode on the current physical state."""
        self.time = 0.0
        self._clock_limit = time_limit

    # -- stepping ------------------------------------------------------------

    def step(self, action):
        """Advance one control period. Returns (obs, info)."""
        if self._needs_reset:
            raise ConfigError("step called before reset")
        cfg = self.config
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if action.shape != (N_JOINTS,):
            raise ConfigError(f"action must have shape ({N_JOINTS},)")

        if self._latency > 0:
            self._action_queue.append(action.copy())
            applied = self._action_queue.popleft()
        else:
            applied = action
        beta = cfg.action_filter_beta
        self._filtered = (1.0 - beta) * self._filtered + beta * applied
        targets = self.model.action_to_targets(self._filtered)

        h = cfg.control_dt / cfg.n_substeps
        fault = not (np.isfinite(self.q).all() and np.isfinite(self.qd).all())
        if not fault:
            try:
                counts, mean_acc = physics.control_step(
                    self.q, self.qd, targets, cfg.n_substeps, h, self._geom,
                    self._masses, self._inertias, self.model.gravity,
                    self._contact, self._strength, self._pd,
                    self.terrain.heights, self.terrain.cell, self.terrain.x0)
            except np.linalg.LinAlgError:
                # the implicit contact solve only degenerates when the state
                # has already blown up; classify it as a numerical fault
                fault = True
        if fault:
            counts = np.zeros(physics.N_CONTACTS)
            mean_acc = np.zeros(2)
        self._last_counts = counts
        self._last_acc = mean_acc
        self.time += cfg.control_dt
        self._prev_action = action.copy()

        fault = fault or not (np.isfinite(self.q).all()
                              and np.isfinite(self.qd).all())
        sensors = self._read_imu(mean_acc)
        self._history.appendleft(self._frame(sensors))

        touched = counts > 0
        torso_down = bool(touched[physics.TORSO_END:].any())
        pitch_out = bool(abs(self.q[2]) > cfg.pitch_fail_limit)
        fell = torso_down or pitch_out
        limit = getattr(self, "_clock_limit", None)
        if limit is None:
            limit = cfg.episode_time_limit
        if fault or (cfg.fail_on_fall and fell):
            termination = Termination.FAILURE
        elif self.time >= limit - 1e-9:
            termination = Termination.TIMEOUT
        else:
            termination = Termination.NONE

        info = {
            "fault": fault,
            "pose": self.q.copy(),
            "velocity": self.qd.copy(),
            "feet_rel": self.feet_relative(),
            "touched": touched,
            "foot_stance": counts[:4] >= 0.5 * cfg.n_substeps,
            "fell": fell,
            "sensors": sensors,
            "time": self.time,
            "applied_action": applied.copy(),
            "filtered_action": self._filtered.copy(),
            "workspace_exit": bool(abs(self.q[0]) > cfg.workspace_halfwidth),
            "termination": termination,
        }
        return self.observe(), info

    # -- observation helpers --------------------------------------------------

    def _read_imu(self, acc_world):
        return self.imu.read(self.q[2], self.qd[2], acc_world)

    def _frame(self, sensors):
        frame = np.empty(OBS_FRAME_DIM)
        frame[0] = sensors["pitch"]
        frame[1:1 + N_JOINTS] = self.q[3:]
        frame[1 + N_JOINTS:] = self._prev_action
        return frame

    def observe(self):
        return np.concatenate(list(self._history))

    def feet_relative(self):
        """Foot positions relative to the root, world axes, shape (4, 2)."""
        pts = physics.contact_point_positions(self.q, self._geom)
        return pts[:4] - self.q[:2]

    def root_acc(self):
        return self._last_acc.copy()

    def teleport(self, x=0.0):
        """Move the robot horizontally without touching the rest of the
        state (the workspace-exit intervention)."""
        self.q[0] = x
