"""Planar quadruped simulation: model, terrain, dynamics, sensors, env."""

from .env import EnvConfig, QuadrupedEnv, sample_drop_pose
from .model import RobotModel
from .randomize import EpisodeRandomization, RandomizeConfig
from .sensors import Imu, ImuConfig, leg_odometry_velocity
from .terrain import Terrain, flat, heightfield, low_friction

__all__ = [
    "EnvConfig", "QuadrupedEnv", "sample_drop_pose", "RobotModel",
    "EpisodeRandomization", "RandomizeConfig", "Imu", "ImuConfig",
    "leg_odometry_velocity", "Terrain", "flat", "heightfield",
    "low_friction",
]
