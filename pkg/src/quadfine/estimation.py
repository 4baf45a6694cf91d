"""Onboard root-state estimation.

Joint encoders measure the legs directly and the IMU measures pitch, so the
only quantities the robot cannot read off a sensor are its root position and
velocity.  A small Kalman filter estimates the planar root velocity: the
prediction integrates the IMU specific force (rotated to world axes with the
measured pitch, gravity removed) and advances the integrated position, and
each foot that has been firmly in stance for a couple of control steps
contributes a direct velocity measurement through leg odometry (a pinned
foot means the root moves at minus the foot's body-relative velocity).
Root position is pure integration and slowly drifts — nothing measures
it — which is acceptable because rewards and goals only consume position
over a single episode.

Optionally the filter carries the accelerometer bias as extra state
(first-order coupling through the body-to-world rotation); off by default
since the prediction noise already budgets for a bounded bias.

Filters here consume sensor logs — plain dicts of aligned channel arrays —
either live, step by step, or replayed through ``estimate_rollout``.
``record_sensor_log`` produces that dict from an environment rollout with
ground truth attached; trajectory logging uses the same channel names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .motions import POSE_DIM
from .sim.model import RobotModel
from .sim.sensors import leg_odometry_velocity

N_FEET = 4

# channels a sensor log must carry to be replayable; ground truth
# ("true_pos", "true_vel") and boot state ("initial_pos", "initial_vel")
# are optional extras recorded in simulation
LOG_CHANNELS = ("dt", "pitch", "pitch_rate", "accel", "joints",
                "joint_rates", "foot_stance")


@dataclass
class EstimatorConfig:
    """Noise model for the velocity filter.

    process_accel_std covers everything the prediction gets wrong per step:
    accelerometer noise and bias, and the error from rotating with a noisy
    pitch.  odometry_std is the trust in a single stance-foot velocity
    sample (kinematic error, ground creep, encoder-rate noise).  With
    estimate_bias on, the accelerometer bias becomes filter state with a
    slow random walk instead of being absorbed into the process noise.
    """

    process_accel_std: float = 0.3
    odometry_std: float = 0.03
    initial_velocity_std: float = 0.01
    stance_debounce: int = 2
    use_odometry: bool = True
    estimate_bias: bool = False
    initial_bias_std: float = 0.1
    bias_walk_std: float = 1e-3

    def __post_init__(self):
        if self.process_accel_std <= 0.0 or self.odometry_std <= 0.0:
            raise ConfigError("filter noise parameters must be positive")
        if self.initial_velocity_std < 0.0:
            raise ConfigError("initial_velocity_std must be non-negative")
        if self.stance_debounce < 1:
            raise ConfigError("stance_debounce must be at least 1")
        if self.estimate_bias and self.initial_bias_std <= 0.0:
            raise ConfigError("initial_bias_std must be positive")
        if self.bias_walk_std < 0.0:
            raise ConfigError("bias_walk_std must be non-negative")


@dataclass
class EstimatedState:
    """Everything the robot knows about itself, sensor-side."""

    root_pos: np.ndarray
    root_vel: np.ndarray
    pitch: float
    pitch_rate: float
    joints: np.ndarray
    joint_rates: np.ndarray
    stance_used: np.ndarray  # feet whose odometry fed the filter this step
    accel_bias: np.ndarray = None  # present only when bias is estimated

    def pose(self):
        out = np.empty(POSE_DIM)
        out[0:2] = self.root_pos
        out[2] = self.pitch
        out[3:] = self.joints
        return out

    def velocity(self):
        out = np.empty(POSE_DIM)
        out[0:2] = self.root_vel
        out[2] = self.pitch_rate
        out[3:] = self.joint_rates
        return out


class StateEstimator:
    """Kalman filter on world root velocity plus a position integrator.

    State is [vx, vz] (plus [bx, bz] accelerometer bias when enabled).
    Corrections observe the velocity block only; covariance updates use the
    Joseph form and re-symmetrization so P stays symmetric PSD under any
    predict/correct sequence.
    """

    def __init__(self, model, dt, config=None):
        self.model = model
        self.dt = float(dt)
        self.config = config if config is not None else EstimatorConfig()
        self._n = 4 if self.config.estimate_bias else 2
        self.reset()

    def reset(self, position=(0.0, 0.0), velocity=(0.0, 0.0)):
        """Re-seed the estimate (boot-time calibration at a known state)."""
        cfg = self.config
        self.pos = np.asarray(position, dtype=np.float64).copy()
        self.vel = np.asarray(velocity, dtype=np.float64).copy()
        self.bias = np.zeros(2) if cfg.estimate_bias else None
        diag = [cfg.initial_velocity_std ** 2] * 2
        if cfg.estimate_bias:
            diag += [cfg.initial_bias_std ** 2] * 2
        self.P = np.diag(np.asarray(diag, dtype=np.float64))
        self.faults = 0
        self._stance_steps = np.zeros(N_FEET, dtype=np.int64)

    def predict(self, pitch, accel):
        """Integrate one control step of measured specific force.

        A non-finite reading skips the integration entirely, inflates the
        velocity covariance (the step's motion is simply unknown), and bumps
        the fault counter.
        """
        cfg = self.config
        accel = np.asarray(accel, dtype=np.float64)
        q_v = (cfg.process_accel_std * self.dt) ** 2
        if not (np.isfinite(pitch) and np.isfinite(accel).all()):
            self.P[0, 0] += 100.0 * q_v
            self.P[1, 1] += 100.0 * q_v
            self.faults += 1
            return
        c, s = np.cos(pitch), np.sin(pitch)
        body = accel if self.bias is None else accel - self.bias
        world = np.array([c * body[0] - s * body[1],
                          s * body[0] + c * body[1] - self.model.gravity])
        self.vel += world * self.dt
        self.pos += self.vel * self.dt
        if self.bias is not None:
            # velocity inherits bias uncertainty through -R(pitch) * dt
            F = np.eye(4)
            F[0, 2], F[0, 3] = -c * self.dt, s * self.dt
            F[1, 2], F[1, 3] = -s * self.dt, -c * self.dt
            self.P = F @ self.P @ F.T
            q_b = (cfg.bias_walk_std * self.dt) ** 2
            self.P[2, 2] += q_b
            self.P[3, 3] += q_b
        self.P[0, 0] += q_v
        self.P[1, 1] += q_v

    def correct(self, velocity_meas):
        """Fuse one direct velocity measurement (identity observation on
        the velocity block).  Invalid (non-finite) measurements are
        ignored."""
        z = np.asarray(velocity_meas, dtype=np.float64)
        if not np.isfinite(z).all():
            return
        n = self._n
        r = self.config.odometry_std ** 2
        S = self.P[:2, :2] + r * np.eye(2)
        K = self.P[:, :2] @ np.linalg.inv(S)  # (n, 2)
        dx = K @ (z - self.vel)
        self.vel = self.vel + dx[:2]
        if self.bias is not None:
            self.bias = self.bias + dx[2:]
        A = np.eye(n)
        A[:, 0] -= K[:, 0]
        A[:, 1] -= K[:, 1]
        self.P = A @ self.P @ A.T + r * (K @ K.T)
        self.P = 0.5 * (self.P + self.P.T)

    def update(self, sensors, joints, joint_rates, foot_stance):
        """One control step: predict from the IMU, correct from stance feet.

        ``foot_stance`` is the per-foot in-stance flag for the step just
        taken; a foot must hold stance for ``stance_debounce`` consecutive
        steps before its odometry is trusted (touchdown transients violate
        the pinned-foot assumption).  Corrections apply sequentially in
        fixed foot order.
        """
        cfg = self.config
        pitch = float(sensors["pitch"])
        rate = float(sensors["pitch_rate"])
        self.predict(pitch, sensors["accel"])

        stance = np.asarray(foot_stance, dtype=bool)
        self._stance_steps = np.where(stance, self._stance_steps + 1, 0)
        used = (self._stance_steps >= cfg.stance_debounce) & cfg.use_odometry
        if cfg.use_odometry and np.isfinite(pitch) and np.isfinite(rate):
            hb, lt, lc = self.model.geom()
            for leg in range(N_FEET):
                if used[leg]:
                    z = leg_odometry_velocity(pitch, rate, joints,
                                              joint_rates, leg, hb, lt, lc)
                    self.correct(z)

        return EstimatedState(
            root_pos=self.pos.copy(),
            root_vel=self.vel.copy(),
            pitch=pitch,
            pitch_rate=rate,
            joints=np.asarray(joints, dtype=np.float64).copy(),
            joint_rates=np.asarray(joint_rates, dtype=np.float64).copy(),
            stance_used=used,
            accel_bias=None if self.bias is None else self.bias.copy(),
        )


def record_sensor_log(env, policy, n_steps):
    """Roll ``policy`` on an already-reset env and record a sensor log.

    The log is a dict of aligned arrays using the shared channel names:
    everything the estimator needs (IMU, joints, stance flags, dt) plus
    simulation ground truth and the boot state for seeding replays.
    """
    n = int(n_steps)
    log = {
        "dt": float(env.control_dt),
        "initial_pos": env.q[:2].copy(),
        "initial_vel": env.qd[:2].copy(),
        "time": np.empty(n),
        "pitch": np.empty(n),
        "pitch_rate": np.empty(n),
        "accel": np.empty((n, 2)),
        "joints": np.empty((n, N_FEET * 2)),
        "joint_rates": np.empty((n, N_FEET * 2)),
        "foot_stance": np.zeros((n, N_FEET), dtype=bool),
        "true_pos": np.empty((n, 2)),
        "true_vel": np.empty((n, 2)),
    }
    obs = env.observe()
    for i in range(n):
        obs, info = env.step(policy(obs))
        sensors = info["sensors"]
        log["time"][i] = info["time"]
        log["pitch"][i] = sensors["pitch"]
        log["pitch_rate"][i] = sensors["pitch_rate"]
        log["accel"][i] = sensors["accel"]
        log["joints"][i] = info["pose"][3:]
        log["joint_rates"][i] = info["velocity"][3:]
        log["foot_stance"][i] = info["foot_stance"]
        log["true_pos"][i] = info["pose"][:2]
        log["true_vel"][i] = info["velocity"][:2]
    return log


def estimate_rollout(log, model=None, config=None, estimator=None):
    """Replay a sensor log through the filter.

    Returns aligned per-step estimates plus summary errors; the error
    entries are only present when the log carries ground truth:

        est_pos, est_vel : (n, 2)
        stance_fraction : fraction of steps with at least one trusted foot
        faults : count of non-finite IMU readings skipped
        vel_err (n,), vel_rmse : with "true_vel"
        pos_err (n,), pos_drift : with "true_pos"

    Raises SchemaError when a required channel is missing or misaligned.
    """
    for key in LOG_CHANNELS:
        if key not in log:
            raise SchemaError(f"sensor log is missing channel {key!r}")
    pitch = np.asarray(log["pitch"], dtype=np.float64)
    n = pitch.shape[0]
    for key in ("pitch_rate", "accel", "joints", "joint_rates",
                "foot_stance"):
        if np.asarray(log[key]).shape[0] != n:
            raise SchemaError(f"sensor log channel {key!r} has "
                              f"{np.asarray(log[key]).shape[0]} rows, "
                              f"expected {n}")

    if estimator is None:
        model = model if model is not None else RobotModel()
        estimator = StateEstimator(model, float(log["dt"]), config)
    estimator.reset(position=log.get("initial_pos", (0.0, 0.0)),
                    velocity=log.get("initial_vel", (0.0, 0.0)))

    est_pos = np.empty((n, 2))
    est_vel = np.empty((n, 2))
    stance_any = 0
    for i in range(n):
        sensors = {"pitch": pitch[i], "pitch_rate": log["pitch_rate"][i],
                   "accel": log["accel"][i]}
        state = estimator.update(sensors, log["joints"][i],
                                 log["joint_rates"][i],
                                 log["foot_stance"][i])
        est_pos[i] = state.root_pos
        est_vel[i] = state.root_vel
        stance_any += bool(state.stance_used.any())

    out = {
        "est_pos": est_pos,
        "est_vel": est_vel,
        "stance_fraction": stance_any / float(max(n, 1)),
        "faults": estimator.faults,
    }
    if "time" in log:
        out["time"] = np.asarray(log["time"], dtype=np.float64)
    if "true_vel" in log:
        true_vel = np.asarray(log["true_vel"], dtype=np.float64)
        out["true_vel"] = true_vel
        out["vel_err"] = np.linalg.norm(est_vel - true_vel, axis=1)
        out["vel_rmse"] = float(np.sqrt(np.mean(out["vel_err"] ** 2)))
    if "true_pos" in log:
        true_pos = np.asarray(log["true_pos"], dtype=np.float64)
        out["true_pos"] = true_pos
        out["pos_err"] = np.linalg.norm(est_pos - true_pos, axis=1)
        out["pos_drift"] = float(out["pos_err"][-1]) if n else 0.0
    return out
