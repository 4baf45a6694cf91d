"""Imitation and recovery rewards.

The tracking reward is a weighted sum of five exponentiated error terms
(joint pose, joint velocity, end-effector position, root pose, root
velocity), each individually in [0, 1] and equal to 1 only at a perfect
match.  The weights sum to one so the total shares that range.

The recovery reward used for reset training pays a graded uprightness term
while the torso is tipped over and switches to uprightness-plus-standing-pose
tracking once the pitch is within the upright cone, so getting upright is
always worth more than any refinement while tipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .motions import (N_JOINTS, PITCH, STANDING_HEIGHT, STANDING_JOINTS,
                      feet_relative)

# Error-to-reward scales, one per tracking term.
POSE_SCALE = 5.0
VELOCITY_SCALE = 0.1
END_EFFECTOR_SCALE = 40.0
ROOT_POSITION_SCALE = 20.0
ROOT_PITCH_SCALE = 10.0
ROOT_LINVEL_SCALE = 2.0
ROOT_ANGVEL_SCALE = 0.2


@dataclass(frozen=True)
class RewardWeights:
    """Mixing weights for the five tracking terms (sum to 1)."""

    pose: float = 0.5
    velocity: float = 0.05
    end_effector: float = 0.2
    root_pose: float = 0.15
    root_velocity: float = 0.1

    def as_dict(self):
        return {
            "pose": self.pose,
            "velocity": self.velocity,
            "end_effector": self.end_effector,
            "root_pose": self.root_pose,
            "root_velocity": self.root_velocity,
        }

    def total(self):
        return (self.pose + self.velocity + self.end_effector
                + self.root_pose + self.root_velocity)


def pose_reward(ref_joints, sim_joints, scale=POSE_SCALE):
    """exp(-scale * sum of squared joint-angle errors)."""
    err = np.asarray(ref_joints, dtype=np.float64) - np.asarray(sim_joints,
                                                                dtype=np.float64)
    return float(np.exp(-scale * np.sum(err * err)))


def imitation_reward(ref_pose, ref_vel, ref_ee, pose, vel, ee,
                     weights=RewardWeights()):
    """Tracking reward for one control step.

    ref_pose/pose: full pose arrays [x, z, pitch, q0..q7].
    ref_vel/vel:   their time derivatives, same layout.
    ref_ee/ee:     (4, 2) root-relative foot positions.

    Returns (total, components) where components maps each term name to its
    value in [0, 1] and total is the weighted sum.
    """
    ref_pose = np.asarray(ref_pose, dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)
    ref_vel = np.asarray(ref_vel, dtype=np.float64)
    vel = np.asarray(vel, dtype=np.float64)
    ref_ee = np.asarray(ref_ee, dtype=np.float64)
    ee = np.asarray(ee, dtype=np.float64)

    jq = ref_pose[3:] - pose[3:]
    jv = ref_vel[3:] - vel[3:]
    de = ref_ee - ee
    dp = ref_pose[:2] - pose[:2]
    dth = ref_pose[PITCH] - pose[PITCH]
    dv = ref_vel[:2] - vel[:2]
    dw = ref_vel[PITCH] - vel[PITCH]

    components = {
        "pose": float(np.exp(-POSE_SCALE * np.sum(jq * jq))),
        "velocity": float(np.exp(-VELOCITY_SCALE * np.sum(jv * jv))),
        "end_effector": float(np.exp(-END_EFFECTOR_SCALE * np.sum(de * de))),
        "root_pose": float(np.exp(-ROOT_POSITION_SCALE * np.sum(dp * dp)
                                  - ROOT_PITCH_SCALE * dth * dth)),
        "root_velocity": float(np.exp(-ROOT_LINVEL_SCALE * np.sum(dv * dv)
                                      - ROOT_ANGVEL_SCALE * dw * dw)),
    }
    w = weights.as_dict()
    total = sum(w[k] * components[k] for k in components)
    return total, components


def standing_reference(x=0.0):
    """Static standing target at root x: pose, velocity, and foot positions."""
    pose = np.concatenate(([x, STANDING_HEIGHT, 0.0], STANDING_JOINTS))
    return pose, np.zeros_like(pose), feet_relative(pose)


def reset_reward(pose, vel, ee, upright_weight=0.5, upright_min=0.8,
                 weights=RewardWeights()):
    """Recovery reward: get upright first, then track the standing pose.

    While cos(pitch) <= upright_min the reward is upright_weight scaled by
    (cos(pitch) + 1) / 2, which spans [0, 0.9 * upright_weight].  Once inside
    the upright cone it becomes upright_weight plus the tracking reward
    against a motionless standing reference placed at the robot's own x, so
    any upright configuration dominates any tipped one and a perfect stand
    anywhere scores upright_weight + 1.

    pose/vel are full state arrays [x, z, pitch, q0..q7] and ee the (4, 2)
    root-relative foot positions, as for ``imitation_reward``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    c = float(np.cos(pose[PITCH]))
    if c <= upright_min:
        return upright_weight * 0.5 * (c + 1.0)
    ref_pose, ref_vel, ref_ee = standing_reference(x=pose[0])
    total, _ = imitation_reward(ref_pose, ref_vel, ref_ee, pose, vel, ee,
                                weights)
    return upright_weight + total


def build_goal(motion, t, current_root, lookahead=(0.03, 1.0 / 3.0,
                                                   2.0 / 3.0, 1.0)):
    """Goal vector: future reference poses expressed relative to the root.

    For each lookahead offset the reference pose at t + offset contributes
    [dx, dz, dpitch, q0..q7], where dx/dz are world-axis offsets from
    ``current_root`` = [x, z, pitch] and dpitch is relative pitch.  With the
    default four offsets the goal has 4 * 11 = 44 entries and the farthest
    target sits one second ahead.
    """
    current_root = np.asarray(current_root, dtype=np.float64)
    parts = []
    for off in lookahead:
        ref = motion.pose_at(t + off)
        rel = ref.copy()
        rel[:3] -= current_root
        parts.append(rel)
    return np.concatenate(parts)


GOAL_DIM = 4 * (3 + N_JOINTS)
