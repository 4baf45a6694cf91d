"""Tests for the imitation and stand-up tasks and the episode runner."""

import numpy as np
import pytest

from quadfine.buffers import Termination
from quadfine.errors import ConfigError
from quadfine.estimation import EstimatorConfig, StateEstimator
from quadfine.motions import (STANDING_HEIGHT, STANDING_JOINTS,
                              pacing_motion, standing_motion)
from quadfine.redq import LearnerConfig, REDQLearner
from quadfine.rewards import build_goal
from quadfine.sim.env import EnvConfig, QuadrupedEnv
from quadfine.sim.sensors import ImuConfig
from quadfine.tasks import (ImitationTask, ResetTask, StabilityMonitor,
                            run_episode)

DT = 0.03


def make_env(**overrides):
    cfg = EnvConfig(**overrides)
    return QuadrupedEnv(config=cfg, seed=0)


def small_learner(task, seed=0, **overrides):
    kwargs = dict(obs_dim=task.obs_dim, goal_dim=task.goal_dim,
                  action_dim=task.action_dim, hidden=(32, 32),
                  warmup=10_000, seed=seed)
    kwargs.update(overrides)
    return REDQLearner(LearnerConfig(**kwargs))


def standing_pose():
    return np.concatenate(([0.0, STANDING_HEIGHT, 0.0], STANDING_JOINTS))


class TestStabilityMonitor:
    def test_hold_time_sets_the_count(self):
        mon = StabilityMonitor(DT, hold_time=0.5)
        assert mon.need == 17  # ceil-free round of 0.5 / 0.03

    def test_requires_consecutive_quiet_steps(self):
        mon = StabilityMonitor(DT, hold_time=0.5)
        q = standing_pose()
        qd = np.zeros(11)
        for i in range(mon.need - 1):
            assert not mon.update(q, qd)
        assert mon.update(q, qd)

    def test_any_violation_restarts_the_clock(self):
        mon = StabilityMonitor(DT, hold_time=0.5)
        q = standing_pose()
        qd = np.zeros(11)
        fast = qd.copy()
        fast[0] = 0.2
        for _ in range(mon.need - 1):
            mon.update(q, qd)
        assert not mon.update(q, fast)     # broke the streak
        for _ in range(mon.need - 1):
            assert not mon.update(q, qd)
        assert mon.update(q, qd)

    def test_thresholds_are_strict(self):
        mon = StabilityMonitor(DT, upright_min=0.9, speed_limit=0.1)
        q = standing_pose()
        qd = np.zeros(11)
        q_tilted = q.copy()
        q_tilted[2] = np.arccos(0.9)       # exactly on the boundary
        assert not mon.check(q_tilted, qd)
        qd_fast = qd.copy()
        qd_fast[0] = 0.1
        assert not mon.check(q, qd_fast)
        qd_spin = qd.copy()
        qd_spin[2] = 0.11
        assert not mon.check(q, qd_spin)
        q_ok = q.copy()
        q_ok[2] = np.arccos(0.9) - 1e-3
        assert mon.check(q_ok, qd)

    def test_joint_ripple_does_not_block_stillness(self):
        # penalty contact leaves a stick-slip ripple in the leg joints even
        # in a clean stand; only the body state decides "still"
        mon = StabilityMonitor(DT)
        q = standing_pose()
        qd = np.zeros(11)
        qd[3:] = 0.2
        assert mon.check(q, qd)


class TestImitationTask:
    def test_dimensions(self):
        env = make_env()
        task = ImitationTask(env, pacing_motion(0.5))
        assert task.goal_dim == 44
        assert task.obs_dim == env.obs_dim == 51
        assert task.action_dim == 8

    def test_begin_matches_reference_state_initialization(self):
        env = make_env()
        motion = pacing_motion(0.5)
        task = ImitationTask(env, motion)
        obs, goal = task.begin(phase=0.24)
        assert task.phase0 == 0.24
        # env shifts the start near x=0; the anchor hides that shift
        ref0, _ = task.reference_at(0.24)
        assert ref0[0] == pytest.approx(env.q[0], abs=1e-12)
        assert goal.shape == (44,)

    def test_goal_equals_module_level_builder(self):
        env = make_env()
        motion = standing_motion()
        task = ImitationTask(env, motion)
        _, goal = task.begin(phase=0.0)
        root = np.array([env.q[0] - task.x_offset, env.q[1], env.q[2]])
        expected = build_goal(motion, 0.0, root)
        assert np.allclose(goal, expected, atol=1e-12)

    def test_reanchoring_far_from_origin(self):
        env = make_env()
        motion = pacing_motion(0.5)
        task = ImitationTask(env, motion)
        q = standing_pose()
        q[0] = 5.0
        env.reset(mode="pose", q=q)
        _, goal = task.begin(phase=0.0, reset=False)
        # first lookahead is one frame ahead: |dx| <= speed * dt (+slack)
        assert abs(goal[0]) <= 0.5 * DT + 1e-9
        ref, _ = task.reference_at(0.0)
        assert ref[0] == pytest.approx(5.0, abs=1e-12)

    def test_tracking_reward_is_high_on_reference(self):
        env = make_env()
        motion = standing_motion()
        task = ImitationTask(env, motion)
        task.begin(phase=0.0)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        rewards = []
        for _ in range(10):
            _, _, r, info = task.step(hold)
            rewards.append(r)
            assert set(info["reward_components"]) == {
                "pose", "velocity", "end_effector", "root_pose",
                "root_velocity"}
        assert np.mean(rewards) > 0.8
        assert max(rewards) <= 1.0 + 1e-9

    def test_reward_decays_with_tracking_error(self):
        env = make_env()
        motion = standing_motion()
        task = ImitationTask(env, motion)
        task.begin(phase=0.0)
        bad = env.model.targets_to_action(STANDING_JOINTS + 0.4)
        _, _, r_bad, _ = task.step(bad)
        env2 = make_env()
        task2 = ImitationTask(env2, motion)
        task2.begin(phase=0.0)
        hold = env2.model.targets_to_action(STANDING_JOINTS)
        _, _, r_good, _ = task2.step(hold)
        assert r_good > r_bad

    def test_fault_zeroes_reward_and_flags_done(self):
        env = make_env()
        task = ImitationTask(env, standing_motion())
        task.begin(phase=0.0)
        env.qd[0] = np.nan
        _, _, r, info = task.step(np.zeros(8))
        assert info["fault"]
        assert r == 0.0
        assert info["task_done"]
        assert info["task_termination"] == Termination.FAILURE

    def test_estimated_state_reward_close_to_true_state_reward(self):
        # same seed, same actions: scoring from the estimator should land
        # near the true-state score when sensors are clean
        imu = ImuConfig(pitch_sigma=0.0, rate_sigma=0.0, accel_sigma=0.0,
                        accel_bias_range=0.0)
        results = []
        for use_est in (False, True):
            env = make_env(imu=imu)
            est = None
            if use_est:
                est = StateEstimator(env.model, env.control_dt,
                                     EstimatorConfig(use_odometry=False))
            task = ImitationTask(env, standing_motion(), estimator=est)
            task.begin(phase=0.0)
            hold = env.model.targets_to_action(STANDING_JOINTS)
            results.append([task.step(hold)[2] for _ in range(20)])
        true_r, est_r = np.array(results[0]), np.array(results[1])
        # velocity tracking is exact with clean sensors; the residual is
        # the frame-level position quadrature (truth integrates substeps)
        assert np.abs(true_r - est_r).max() < 1e-3


def reset_env(**overrides):
    overrides.setdefault("fail_on_fall", False)
    return make_env(**overrides)


class TestResetTask:
    def test_rejects_fall_terminating_env(self):
        env = make_env(fail_on_fall=True)
        with pytest.raises(ConfigError, match="fail_on_fall"):
            ResetTask(env)

    def test_begin_uses_drop_distribution(self):
        env = reset_env(drop_height=(0.45, 0.55))
        task = ResetTask(env)
        task.begin()
        # after the drop the robot rests low, not at standing height
        assert env.q[1] < STANDING_HEIGHT + 0.1

    def test_already_standing_counts_as_recovered(self):
        env = reset_env()
        task = ResetTask(env, time_limit=5.0)
        env.reset(mode="pose", q=standing_pose())
        obs, goal = task.begin(reset=False)
        assert goal.shape == (0,)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        for i in range(40):
            _, _, r, info = task.step(hold)
            if info["recovered"]:
                break
        assert info["recovered"]
        assert info["task_done"]
        assert info["task_termination"] == Termination.TIMEOUT
        # standing against a static reference scores near the 1.5 maximum
        assert r > 1.3

    def test_time_cap_ends_episode(self):
        env = reset_env()
        task = ResetTask(env, time_limit=0.3)
        task.begin()
        zero = np.zeros(8)
        for i in range(50):
            _, _, _, info = task.step(zero)
            if info["task_done"]:
                break
        assert i == 9   # 0.3 s at 30 ms steps
        assert info["task_termination"] == Termination.TIMEOUT
        assert not info["recovered"]

    def test_fallen_robot_scores_by_uprightness(self):
        env = reset_env()
        task = ResetTask(env)
        q = standing_pose()
        q[1] = 0.12
        q[2] = 1.4          # cos(1.4) ~ 0.17: clearly tipped
        env.reset(mode="pose", q=q)
        task.begin(reset=False)
        _, _, r, _ = task.step(np.zeros(8))
        assert 0.0 <= r <= 0.45 + 1e-9


class TestRunEpisode:
    def test_timeout_episode_collects_every_transition(self):
        env = make_env(episode_time_limit=0.3)
        task = ImitationTask(env, standing_motion())
        learner = small_learner(task)
        result = run_episode(task, learner, deterministic=True, collect=True,
                             phase=0.0)
        assert result.steps == 10
        assert result.termination == Termination.TIMEOUT
        assert learner.buffer.size == 10
        assert result.dropped_transitions == 0
        assert np.isfinite(result.episode_return)

    def test_buffer_terminations_match_episode_end(self):
        env = make_env(episode_time_limit=0.3)
        task = ImitationTask(env, standing_motion())
        learner = small_learner(task)
        run_episode(task, learner, deterministic=True, collect=True,
                    phase=0.0)
        term = learner.buffer._data["termination"][:learner.buffer.size]
        assert np.all(term[:-1] == int(Termination.NONE))
        assert term[-1] == int(Termination.TIMEOUT)

    def test_fault_transition_never_enters_buffer(self):
        env = make_env(episode_time_limit=5.0)
        task = ImitationTask(env, standing_motion())
        learner = small_learner(task)
        steps = {"n": 0}

        def sabotage(n):
            if n == 4:
                env.qd[0] = np.inf
            steps["n"] = n

        result = run_episode(task, learner, deterministic=True, collect=True,
                             phase=0.0, on_step=sabotage)
        assert result.fault
        assert result.termination == Termination.FAILURE
        assert result.dropped_transitions == 1
        assert learner.buffer.size == result.steps - 1

    def test_on_step_runs_once_per_transition(self):
        env = make_env(episode_time_limit=0.3)
        task = ImitationTask(env, standing_motion())
        learner = small_learner(task)
        seen = []
        run_episode(task, learner, deterministic=True, phase=0.0,
                    on_step=seen.append)
        assert seen == list(range(1, 11))

    def test_max_steps_truncates(self):
        env = make_env(episode_time_limit=10.0)
        task = ImitationTask(env, standing_motion())
        learner = small_learner(task)
        result = run_episode(task, learner, deterministic=True, phase=0.0,
                             max_steps=7)
        assert result.steps == 7

    def test_stop_on_exit_reports_workspace_violation(self):
        env = make_env(episode_time_limit=10.0, workspace_halfwidth=0.2)
        task = ImitationTask(env, pacing_motion(0.5))
        learner = small_learner(task)
        # plant the robot outside the allowed band; first step trips the flag
        q = standing_pose()
        q[0] = 0.5
        env.reset(mode="pose", q=q)
        result = run_episode(task, learner, deterministic=True, phase=0.0,
                             reset=False, collect=False, stop_on_exit=True)
        assert result.workspace_exit
        assert result.steps == 1

    def test_deterministic_rollouts_repeat(self):
        returns = []
        for _ in range(2):
            env = make_env(episode_time_limit=0.3)
            task = ImitationTask(env, standing_motion())
            learner = small_learner(task, seed=3)
            r = run_episode(task, learner, deterministic=True, phase=0.1)
            returns.append(r.episode_return)
        assert returns[0] == returns[1]
