"""Onboard sensing: IMU model and leg-odometry kinematics.

The IMU sits at the torso center and reports pitch, pitch rate, and the
body-frame specific force (accelerometer), each with additive Gaussian noise
and a per-episode constant accelerometer bias.  The specific force is
R(pitch)^T (a_world + g zhat): at rest the accelerometer reads +g along the
body up-axis.

Leg odometry inverts the foot kinematics under a zero-foot-velocity
assumption: if a foot is in stance, the root velocity equals minus the
foot's velocity relative to the root, which is computable from encoder
positions/rates and the IMU pitch/rate alone — no world-frame information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ImuConfig:
    pitch_sigma: float = 0.005
    rate_sigma: float = 0.02
    accel_sigma: float = 0.1
    accel_bias_range: float = 0.1


class Imu:
    """Noisy torso IMU; draw a fresh bias at every episode start."""

    def __init__(self, config, gravity, rng):
        self.config = config
        self.gravity = gravity
        self._rng = rng
        self.bias = np.zeros(2)

    def reset(self):
        r = self.config.accel_bias_range
        self.bias = self._rng.uniform(-r, r, size=2)

    def read(self, pitch, pitch_rate, root_acc_world):
        """Sensor sample: (pitch, pitch_rate, specific_force body frame)."""
        cfg = self.config
        c, s = np.cos(pitch), np.sin(pitch)
        ax, az = root_acc_world[0], root_acc_world[1] + self.gravity
        specific = np.array([c * ax + s * az, -s * ax + c * az])
        specific += self.bias + self._rng.normal(scale=cfg.accel_sigma, size=2)
        return {
            "pitch": pitch + self._rng.normal(scale=cfg.pitch_sigma),
            "pitch_rate": pitch_rate + self._rng.normal(scale=cfg.rate_sigma),
            "accel": specific,
        }


def leg_odometry_velocity(pitch, pitch_rate, joints, joint_rates, leg,
                          half_body, thigh_length, calf_length):
    """World-frame root velocity implied by a stationary foot ``leg``.

    v_root = -(foot velocity due to pitch rate and joint rates); uses only
    quantities available onboard.
    """
    sgn = 1.0 if leg < 2 else -1.0
    a1 = pitch + joints[2 * leg]
    a2 = a1 + joints[2 * leg + 1]
    a1d = pitch_rate + joint_rates[2 * leg]
    a2d = a1d + joint_rates[2 * leg + 1]
    # d/dt of: R(pitch) r_hip + lt d(a1) + lc d(a2), with d(a) = (sin, -cos)
    vx = (-sgn * half_body * np.sin(pitch) * pitch_rate
          + thigh_length * np.cos(a1) * a1d + calf_length * np.cos(a2) * a2d)
    vz = (sgn * half_body * np.cos(pitch) * pitch_rate
          + thigh_length * np.sin(a1) * a1d + calf_length * np.sin(a2) * a2d)
    return np.array([-vx, -vz])
