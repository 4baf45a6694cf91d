"""Planar quadruped description.

The robot is a torso rod with four two-segment legs (hip + knee), all moving
in one vertical plane: 11 generalized coordinates
``[root_x, root_z, pitch, q0 .. q7]`` with joints ordered (hip, knee) for
legs FL, FR, RL, RR.  Front legs hang from the +x end of the torso, rear
legs from the -x end.  Hip angles are measured from straight down, positive
forward; knee angles are relative to the thigh and flex negative.

The same mechanism serves as a sagittal (side view) or frontal (head-on
view) projection of a quadruped — the dynamics are identical, only the drop
distributions and reference gaits differ — so the plane choice lives in the
environment config, not here.

Masses and segment lengths approximate a small ~10 kg research quadruped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError
from ..motions import LEG_SEGMENT, N_JOINTS, STAND_HIP, STAND_KNEE

HIP_RANGE = (-1.2, 1.2)
KNEE_RANGE = (-2.4, -0.15)


def _default_strength():
    return np.ones(N_JOINTS)


@dataclass
class RobotModel:
    """Geometry, mass properties, actuation, and contact parameters."""

    body_length: float = 0.4
    thigh_length: float = LEG_SEGMENT
    calf_length: float = LEG_SEGMENT
    torso_mass: float = 6.0
    thigh_mass: float = 1.0
    calf_mass: float = 0.2
    inertia_scale: float = 1.0  # randomization hook, independent of mass
    foot_radius: float = 0.0  # point feet by default; raises contact height
    gravity: float = 9.81

    # PD actuation: torque = strength * (kp (q* - q) - kd qdot), clamped
    kp: float = 55.0
    kd: float = 0.8
    torque_limit: float = 33.5
    strength: np.ndarray = field(default_factory=_default_strength)

    # ground contact: normal spring-damper + regularized Coulomb friction
    # (dampers are integrated implicitly, so they may exceed the explicit
    # stability bound for the light foot links)
    contact_kn: float = 3.0e4
    contact_dn: float = 400.0
    contact_ct: float = 4.0e3

    def __post_init__(self):
        self.strength = np.asarray(self.strength, dtype=np.float64)
        if self.strength.shape != (N_JOINTS,):
            raise ConfigError(
                f"strength must have shape ({N_JOINTS},), got {self.strength.shape}")
        for name in ("body_length", "thigh_length", "calf_length",
                     "torso_mass", "thigh_mass", "calf_mass", "gravity",
                     "contact_kn", "inertia_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.foot_radius < 0:
            raise ConfigError("foot_radius must be non-negative")

    # rod inertias about the segment center of mass
    @property
    def torso_inertia(self):
        return (self.inertia_scale
                * self.torso_mass * self.body_length ** 2 / 12.0)

    @property
    def thigh_inertia(self):
        return (self.inertia_scale
                * self.thigh_mass * self.thigh_length ** 2 / 12.0)

    @property
    def calf_inertia(self):
        return (self.inertia_scale
                * self.calf_mass * self.calf_length ** 2 / 12.0)

    @property
    def total_mass(self):
        return self.torso_mass + 4.0 * (self.thigh_mass + self.calf_mass)

    @property
    def joint_limits(self):
        """(8, 2) array of (low, high) per joint, hips and knees alternating."""
        lims = np.empty((N_JOINTS, 2))
        lims[0::2] = HIP_RANGE
        lims[1::2] = KNEE_RANGE
        return lims

    @property
    def standing_joints(self):
        return np.array([STAND_HIP, STAND_KNEE] * 4)

    @property
    def standing_height(self):
        """Root height with feet on flat ground in the standing posture."""
        return (self.thigh_length * np.cos(STAND_HIP)
                + self.calf_length * np.cos(STAND_HIP + STAND_KNEE))

    def action_to_targets(self, action):
        """Map a policy action in [-1, 1]^8 to PD joint targets."""
        lims = self.joint_limits
        mid = 0.5 * (lims[:, 0] + lims[:, 1])
        half = 0.5 * (lims[:, 1] - lims[:, 0])
        return mid + np.clip(action, -1.0, 1.0) * half

    def targets_to_action(self, targets):
        """Inverse of action_to_targets, clipped to [-1, 1]."""
        lims = self.joint_limits
        mid = 0.5 * (lims[:, 0] + lims[:, 1])
        half = 0.5 * (lims[:, 1] - lims[:, 0])
        return np.clip((np.asarray(targets) - mid) / half, -1.0, 1.0)

    def scaled(self, mass_scale=1.0, strength_scale=None, inertia_scale=1.0):
        """Copy with masses, inertias, and strengths rescaled.

        Mass scaling already scales the rod inertias proportionally;
        ``inertia_scale`` perturbs them independently on top of that.
        """
        strength = self.strength.copy()
        if strength_scale is not None:
            strength = strength * np.asarray(strength_scale, dtype=np.float64)
        return replace(
            self,
            torso_mass=self.torso_mass * mass_scale,
            thigh_mass=self.thigh_mass * mass_scale,
            calf_mass=self.calf_mass * mass_scale,
            inertia_scale=self.inertia_scale * inertia_scale,
            strength=strength,
        )

    # -- packed views for the compiled kernels ------------------------------

    def geom(self):
        return np.array([0.5 * self.body_length, self.thigh_length,
                         self.calf_length])

    def masses(self):
        return np.array([self.torso_mass, self.thigh_mass, self.calf_mass])

    def inertias(self):
        return np.array([self.torso_inertia, self.thigh_inertia,
                         self.calf_inertia])

    def contact_params(self, friction, restitution=0.0):
        """[kn, dn, ct, mu, foot_radius]; restitution thins the normal
        damper (0 = fully damped, 1 = undamped spring)."""
        if not 0.0 <= restitution < 1.0:
            raise ConfigError("restitution must be in [0, 1)")
        return np.array([self.contact_kn,
                         self.contact_dn * (1.0 - restitution),
                         self.contact_ct, friction, self.foot_radius])

    def pd_params(self):
        return np.array([self.kp, self.kd, self.torque_limit])
