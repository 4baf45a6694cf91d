"""Goal-conditioned control tasks on the planar quadruped.

Two tasks share the environment's observation layout:

* ``ImitationTask`` tracks a reference motion.  The policy input is the
  proprioceptive history plus a goal vector of future reference poses; the
  reward is the weighted imitation reward against the reference at the
  current clock.
* ``ResetTask`` stands the robot up from arbitrary fallen states.  There is
  no reference to track, so the goal vector is empty, and the episode ends
  once the robot has been upright and still for a hold period (or a time
  cap expires).

Both can score from the simulator's true state or from an onboard state
estimate, so the same code path runs in pretraining and deployment.
"""

import math
from dataclasses import dataclass

import numpy as np

from .buffers import Termination, Transition
from .errors import ConfigError
from .motions import N_JOINTS, PITCH, feet_relative
from .rewards import (RewardWeights, build_goal, imitation_reward,
                      reset_reward)

LOOKAHEAD = (0.03, 1.0 / 3.0, 2.0 / 3.0, 1.0)


class StabilityMonitor:
    """Detects "upright and still, held for a while".

    Upright means the torso up-vector projected on world-up exceeds
    ``upright_min`` (cos of pitch on the sagittal plane); still means the
    body's linear and angular speeds are below ``speed_limit``.  Joint
    rates are deliberately ignored: penalty-based foot contact keeps a
    small stick-slip ripple in the leg joints even in a perfect stand, and
    the check is about the robot staying put, not about micro-motion.  The
    condition must hold continuously for ``hold_time`` seconds.
    """

    def __init__(self, dt, upright_min=0.9, speed_limit=0.1, hold_time=0.5):
        self.upright_min = float(upright_min)
        self.speed_limit = float(speed_limit)
        self.need = max(1, int(round(hold_time / dt)))
        self.count = 0

    def reset(self):
        self.count = 0

    def check(self, q, qd):
        return (math.cos(q[PITCH]) > self.upright_min
                and math.hypot(qd[0], qd[1]) < self.speed_limit
                and abs(qd[PITCH]) < self.speed_limit)

    def update(self, q, qd):
        self.count = self.count + 1 if self.check(q, qd) else 0
        return self.count >= self.need


def _estimated_state(estimator, info):
    """Pose/velocity/feet as the onboard estimator sees them."""
    pose = info["pose"]
    est = estimator.update(info["sensors"], pose[3:], info["velocity"][3:],
                           info["foot_stance"])
    return est.pose(), est.velocity()


class ImitationTask:
    """Track a reference motion; reward and goal follow the episode clock.

    ``begin(reset=True)`` starts a fresh episode with reference-state
    initialization at a random phase.  ``begin(reset=False)`` re-anchors the
    reference at the robot's current position without touching the physical
    state, which is how consecutive episodes are stitched on a real platform.
    """

    def __init__(self, env, motion, weights=None, lookahead=LOOKAHEAD,
                 estimator=None):
        self.env = env
        self.motion = motion
        self.weights = weights or RewardWeights()
        self.lookahead = tuple(lookahead)
        self.estimator = estimator
        self.goal_dim = len(self.lookahead) * (3 + N_JOINTS)
        self.phase0 = 0.0
        self.x_offset = 0.0

    @property
    def obs_dim(self):
        return self.env.obs_dim

    @property
    def action_dim(self):
        return self.env.action_dim

    def begin(self, phase=None, reset=True):
        if reset:
            obs = self.env.reset(mode="reference", motion=self.motion,
                                 phase=phase)
            self.phase0 = self.env.motion_phase
        else:
            self.env.reset_clock(self.env.config.episode_time_limit)
            self.phase0 = 0.0 if phase is None else float(phase)
            obs = self.env.observe()
        # anchor the reference trajectory at the robot's current x
        self.x_offset = (self.env.q[0]
                         - self.motion.pose_at(self.phase0)[0])
        if self.estimator is not None:
            self.estimator.reset(position=self.env.q[:2],
                                 velocity=self.env.qd[:2])
        return obs, self._goal(self.env.q)

    def _goal(self, pose):
        root = np.array([pose[0] - self.x_offset, pose[1], pose[2]])
        return build_goal(self.motion, self.phase0 + self.env.time, root,
                          self.lookahead)

    def reference_at(self, t):
        """Reference pose/velocity in the anchored world frame."""
        pose = self.motion.pose_at(t).copy()
        pose[0] += self.x_offset
        return pose, self.motion.velocity_at(t)

    def step(self, action):
        obs, info = self.env.step(action)
        if self.estimator is not None and not info["fault"]:
            pose, vel = _estimated_state(self.estimator, info)
            ee = feet_relative(pose)
        else:
            pose, vel = info["pose"], info["velocity"]
            ee = info["feet_rel"]
        t = self.phase0 + info["time"]
        ref_pose, ref_vel = self.reference_at(t)
        reward, components = imitation_reward(
            ref_pose, ref_vel, feet_relative(ref_pose), pose, vel, ee,
            self.weights)
        if info["fault"]:
            reward = 0.0
        info["reward_components"] = components
        info["task_done"] = info["termination"] != Termination.NONE
        info["task_termination"] = info["termination"]
        return obs, self._goal(pose), reward, info


class ResetTask:
    """Stand up from a fallen or dropped state.

    The environment must allow ground contact anywhere (``fail_on_fall``
    off) since the robot starts on the ground; only numerical faults
    terminate as failures.  Success — upright and still for ``hold_time`` —
    ends the episode as a bootstrappable timeout, because nothing bad
    happened and standing value keeps accruing beyond the cut.
    """

    goal_dim = 0

    def __init__(self, env, weights=None, upright_weight=0.5,
                 upright_min=0.9, speed_limit=0.1, hold_time=0.5,
                 time_limit=5.0, estimator=None):
        if env.config.fail_on_fall:
            raise ConfigError(
                "reset training needs an environment with fail_on_fall off")
        self.env = env
        self.weights = weights or RewardWeights()
        self.upright_weight = float(upright_weight)
        self.time_limit = float(time_limit)
        self.estimator = estimator
        self.monitor = StabilityMonitor(env.control_dt,
                                        upright_min=upright_min,
                                        speed_limit=speed_limit,
                                        hold_time=hold_time)

    @property
    def obs_dim(self):
        return self.env.obs_dim

    @property
    def action_dim(self):
        return self.env.action_dim

    def begin(self, phase=None, reset=True):
        if reset:
            obs = self.env.reset(mode="drop")
        else:
            obs = self.env.observe()
        self.env.reset_clock(self.time_limit)
        self.monitor.reset()
        if self.estimator is not None:
            self.estimator.reset(position=self.env.q[:2],
                                 velocity=self.env.qd[:2])
        return obs, np.zeros(0)

    def step(self, action):
        obs, info = self.env.step(action)
        if self.estimator is not None and not info["fault"]:
            pose, vel = _estimated_state(self.estimator, info)
            ee = feet_relative(pose)
        else:
            pose, vel = info["pose"], info["velocity"]
            ee = info["feet_rel"]
        reward = reset_reward(pose, vel, ee,
                              upright_weight=self.upright_weight,
                              weights=self.weights)
        if info["fault"]:
            reward = 0.0
        recovered = self.monitor.update(info["pose"], info["velocity"])
        termination = info["termination"]
        if recovered and termination == Termination.NONE:
            termination = Termination.TIMEOUT
        info["recovered"] = recovered
        info["task_done"] = termination != Termination.NONE
        info["task_termination"] = termination
        return obs, np.zeros(0), reward, info


@dataclass
class EpisodeResult:
    episode_return: float
    steps: int
    termination: Termination
    fault: bool = False
    recovered: bool = False
    fell: bool = False
    dropped_transitions: int = 0
    workspace_exit: bool = False


def run_episode(task, learner, deterministic=False, collect=False,
                reset=True, phase=None, max_steps=None, logger=None,
                on_step=None, stop_on_exit=False):
    """Roll one episode of ``task`` under ``learner``'s policy.

    With ``collect`` the transitions go into the learner's replay buffer
    (updates are the caller's business); steps flagged as simulator faults
    are never stored.  ``on_step(n)`` runs after each transition, e.g. to
    interleave gradient updates with data collection.
    """
    obs, goal = task.begin(phase=phase, reset=reset)
    total = 0.0
    n = 0
    dropped = 0
    fault = False
    fell = False
    recovered = False
    exited = False
    termination = Termination.TIMEOUT
    while True:
        action = learner.act(obs, goal, deterministic=deterministic)
        next_obs, next_goal, reward, info = task.step(action)
        termination = info["task_termination"]
        n += 1
        total += reward
        fault = fault or info["fault"]
        fell = fell or info["fell"]
        recovered = recovered or info.get("recovered", False)
        if logger is not None:
            logger.append_step(action, reward, info)
        if collect:
            if info["fault"]:
                dropped += 1
            else:
                learner.buffer.add(Transition(obs, goal, action, reward,
                                              next_obs, next_goal,
                                              termination))
                learner.env_steps += 1
        if on_step is not None:
            on_step(n)
        obs, goal = next_obs, next_goal
        if stop_on_exit and info["workspace_exit"]:
            exited = True
            if termination == Termination.NONE:
                termination = Termination.TIMEOUT
            break
        if info["task_done"]:
            break
        if max_steps is not None and n >= max_steps:
            break
    return EpisodeResult(episode_return=total, steps=n,
                         termination=termination, fault=fault,
                         recovered=recovered, fell=fell,
                         dropped_transitions=dropped,
                         workspace_exit=exited)
