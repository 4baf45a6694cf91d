"""Tests for skill selection, pretraining, fine-tuning, and persistence."""

import math
import re

import numpy as np
import pytest

from quadfine.buffers import Termination, Transition
from quadfine.errors import ConfigError
from quadfine.logs import read_curve, read_metrics
from quadfine.motions import pacing_motion, standing_motion
from quadfine.orchestrator import (Session, SessionConfig, SessionHalt,
                                   SkillSpec, build_env, evaluate_skill,
                                   export_curves, finetune, make_skill,
                                   pretrain, pretrain_skill, restore_skill,
                                   save_skill, seed_for, select_skill,
                                   stitch_episode)
from quadfine.redq import LearnerConfig, REDQLearner

TINY = dict(hidden=(16, 16), n_critics=3, subset_size=2, batch_size=8,
            warmup=8, updates_per_step=1, buffer_capacity=20_000)


def tiny_skill(name, motion, env, seed=0, **overrides):
    kwargs = dict(TINY)
    kwargs.update(overrides)
    return make_skill(name, motion, env, seed=seed, **kwargs)


def tiny_reset_learner(env, seed=0, **overrides):
    kwargs = dict(TINY, obs_dim=env.obs_dim, goal_dim=0,
                  action_dim=env.action_dim, seed=seed)
    kwargs.update(overrides)
    return REDQLearner(LearnerConfig(**kwargs))


def fast_cfg(**overrides):
    kwargs = dict(pretrain_budget=60, finetune_budget=40, warmup=8,
                  eval_every=30, eval_episodes=1, plateau_window=2,
                  checkpoint_every=30, reset_time_limit=0.3,
                  workspace_halfwidth=3.0, seed=0,
                  source_env={"episode_time_limit": 0.3},
                  target_env={"episode_time_limit": 0.3})
    kwargs.update(overrides)
    return SessionConfig(**kwargs)


class TestSessionConfig:
    def test_negative_budget_rejected(self):
        with pytest.raises(ConfigError, match="budget"):
            SessionConfig(pretrain_budget=-1)

    def test_warmup_cannot_exceed_finetune_budget(self):
        with pytest.raises(ConfigError, match="warmup"):
            SessionConfig(warmup=100, finetune_budget=50)

    def test_zero_budgets_allowed(self):
        cfg = SessionConfig(pretrain_budget=0, finetune_budget=0)
        assert cfg.pretrain_budget == 0

    def test_cadences_must_be_positive(self):
        with pytest.raises(ConfigError, match="cadence"):
            SessionConfig(checkpoint_every=0)


class TestBuildEnv:
    def test_terrain_kinds(self):
        assert build_env({"terrain": {"kind": "flat"}}).terrain.name == "flat"
        assert (build_env({"terrain": {"kind": "low_friction"}})
                .terrain.friction == 0.25)
        env = build_env({"terrain": {"kind": "heightfield",
                                     "amplitude": 0.03}}, seed=4)
        assert env.terrain.heights.std() > 0

    def test_unknown_terrain_kind(self):
        with pytest.raises(ConfigError, match="hovercraft"):
            build_env({"terrain": {"kind": "hovercraft"}})

    def test_unknown_env_key_is_named(self):
        with pytest.raises(ConfigError, match="graviy"):
            build_env({"graviy": -9.81})

    def test_unknown_imu_key_is_named(self):
        with pytest.raises(ConfigError, match="wobble"):
            build_env({"imu": {"wobble": 1.0}})

    def test_env_fields_pass_through(self):
        env = build_env({"episode_time_limit": 3.0, "fail_on_fall": False,
                         "randomize": {"enabled": True,
                                       "friction": [0.5, 0.9]}})
        assert env.config.episode_time_limit == 3.0
        assert not env.config.fail_on_fall
        assert env.config.randomize.friction == (0.5, 0.9)


class TestSelectSkill:
    def setup_method(self):
        env = build_env()
        self.fwd = tiny_skill("forward", pacing_motion(0.5), env)
        self.bwd = tiny_skill("backward", pacing_motion(-0.5), env)

    def test_positive_x_walks_back(self):
        assert select_skill(2.0, [self.fwd, self.bwd]) is self.bwd

    def test_negative_x_walks_forward(self):
        assert select_skill(-2.0, [self.fwd, self.bwd]) is self.fwd

    def test_tie_prefers_forward(self):
        assert select_skill(0.0, [self.fwd, self.bwd]) is self.fwd
        assert select_skill(0.0, [self.bwd, self.fwd]) is self.fwd

    def test_single_skill_passthrough(self):
        assert select_skill(7.0, [self.bwd]) is self.bwd

    def test_empty_set_rejected(self):
        with pytest.raises(ConfigError):
            select_skill(0.0, [])


class TestSkillPersistence:
    def test_round_trip_reproduces_eval_actions_exactly(self, tmp_path):
        env = build_env({"episode_time_limit": 0.3}, seed=9)
        skill = tiny_skill("pace", pacing_motion(0.4), env, seed=5)
        # push the learner off its init so the test isn't trivial
        run_pretrain_steps(skill, env, 20)
        save_skill(skill, tmp_path, 20, with_buffer=True)

        eval_env = build_env({"episode_time_limit": 0.3}, seed=77)
        before = evaluate_skill(skill, eval_env, n_episodes=2, seed=3,
                                record_actions=True)

        copy = restore_skill(tmp_path, "pace", with_buffer=True)
        eval_env2 = build_env({"episode_time_limit": 0.3}, seed=77)
        after = evaluate_skill(copy, eval_env2, n_episodes=2, seed=3,
                               record_actions=True)
        assert before["mean"] == after["mean"]
        for a, b in zip(before["actions"], after["actions"]):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_restore_picks_latest_step(self, tmp_path):
        env = build_env()
        skill = tiny_skill("pace", standing_motion(), env)
        save_skill(skill, tmp_path, 10)
        marker = skill.learner.actor.net.get_flat().copy()
        skill.learner.actor.net.set_flat(marker + 0.5)
        save_skill(skill, tmp_path, 200)
        restored = restore_skill(tmp_path, "pace")
        assert np.allclose(restored.learner.actor.net.get_flat(),
                           marker + 0.5)
        early = restore_skill(tmp_path, "pace", step=10)
        assert np.allclose(early.learner.actor.net.get_flat(), marker)

    def test_missing_checkpoint_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nothere"):
            restore_skill(tmp_path, "nothere")

    def test_buffer_round_trip(self, tmp_path):
        env = build_env({"episode_time_limit": 0.3})
        skill = tiny_skill("pace", standing_motion(), env)
        run_pretrain_steps(skill, env, 10)
        save_skill(skill, tmp_path, 10, with_buffer=True)
        restored = restore_skill(tmp_path, "pace", with_buffer=True)
        assert restored.learner.buffer.size == skill.learner.buffer.size


def run_pretrain_steps(skill, env, budget):
    cfg = SessionConfig(pretrain_budget=budget, eval_every=10 ** 9,
                        checkpoint_every=10 ** 9, warmup=0,
                        finetune_budget=0)
    return pretrain_skill(skill, env, cfg)


class TestPretrain:
    def test_zero_budget_leaves_parameters_untouched(self):
        env = build_env()
        skill = tiny_skill("pace", standing_motion(), env)
        before = skill.learner.actor.net.get_flat().copy()
        stats = pretrain_skill(skill, env, fast_cfg(pretrain_budget=0))
        assert np.array_equal(skill.learner.actor.net.get_flat(), before)
        assert stats["stop_reason"] == "empty-budget"
        assert stats["pretrain_steps"] == 0

    def test_budget_is_respected_exactly(self, tmp_path):
        env = build_env({"episode_time_limit": 0.3}, seed=2)
        skill = tiny_skill("pace", standing_motion(), env)
        session = Session(tmp_path, fast_cfg(pretrain_budget=45))
        stats = pretrain_skill(skill, env, session.config, session=session)
        assert stats["pretrain_steps"] == 45
        assert skill.learner.env_steps == 45

    def test_session_artifacts_are_written(self, tmp_path):
        env = build_env({"episode_time_limit": 0.3}, seed=2)
        skill = tiny_skill("pace", standing_motion(), env)
        session = Session(tmp_path, fast_cfg(pretrain_budget=60))
        pretrain_skill(skill, env, session.config, session=session)
        metrics = read_metrics(session.log_dir / "pretrain-pace.csv")
        assert len(metrics["step"]) >= 1
        assert metrics["step"][-1] == 60
        cols, rows = read_curve(session.log_dir / "pretrain-pace-eval.csv")
        assert cols == ["step", "mean_return"]
        assert len(rows) == 2            # evals at 30 and 60
        assert (session.checkpoint_dir / "pace.motion.json").exists()
        assert list(session.checkpoint_dir.glob("pace-*.npz"))

    def test_plateau_stops_early(self):
        env = build_env({"episode_time_limit": 0.3}, seed=2)
        # huge warmup: no updates ever run, so eval returns are constant
        skill = tiny_skill("pace", standing_motion(), env, warmup=10 ** 6)
        cfg = fast_cfg(pretrain_budget=100_000, eval_every=20,
                       plateau_window=2)
        stats = pretrain_skill(skill, env, cfg)
        assert stats["stop_reason"] == "plateau"
        assert stats["pretrain_steps"] <= 100     # 4 evals' worth, not 100k
        evals = stats["eval_returns"]
        assert len(evals) == 4
        # frozen policy: only IMU noise moves the eval returns
        assert np.std(evals) < 1e-3

    def test_divergence_rolls_back_and_halves_lr(self, tmp_path):
        env = build_env({"episode_time_limit": 0.3}, seed=2)
        skill = tiny_skill("pace", standing_motion(), env)
        lr0 = skill.learner.cfg.lr
        session = Session(tmp_path, fast_cfg(pretrain_budget=40))
        poisoned = skill.learner

        def bad_update(n):
            return {"n_critic_updates": 1, "n_actor_updates": 1,
                    "critic_loss": math.inf, "actor_loss": 0.0,
                    "entropy": 0.0, "temperature": 0.1, "q_mean": math.inf}

        poisoned.update = bad_update
        stats = pretrain_skill(skill, env, session.config, session=session)
        assert stats["divergence_rollbacks"] == 1
        assert skill.learner is not poisoned          # rolled back copy
        assert skill.learner.cfg.lr == pytest.approx(lr0 / 2)
        assert skill.learner.actor_adam.lr == pytest.approx(lr0 / 2)
        assert session.incidents[0]["what"] == "divergence"
        assert (session.log_dir / "incidents.log").exists()
        assert stats["pretrain_steps"] == 40          # training continued

    def test_same_seed_is_order_independent(self):
        def build_pair():
            env = build_env()
            a = tiny_skill("fwd", pacing_motion(0.4), env,
                           seed=seed_for(0, "fwd"))
            b = tiny_skill("bwd", pacing_motion(-0.4), env,
                           seed=seed_for(0, "bwd"))
            return a, b

        def factory(name):
            return build_env({"episode_time_limit": 0.3},
                             seed=seed_for(0, name))

        cfg = fast_cfg(pretrain_budget=30, eval_every=10 ** 9)
        a1, b1 = build_pair()
        pretrain([a1, b1], cfg, env_factory=factory)
        a2, b2 = build_pair()
        pretrain([b2, a2], cfg, env_factory=factory)     # reversed order
        assert np.array_equal(a1.learner.actor.net.get_flat(),
                              a2.learner.actor.net.get_flat())
        assert np.array_equal(b1.learner.critics.online.get_flat(),
                              b2.learner.critics.online.get_flat())


class TestStitchEpisode:
    def make_world(self, tmp_path, **cfg_overrides):
        cfg = fast_cfg(**cfg_overrides)
        env = build_env(cfg.target_env, seed=1)
        env.config.workspace_halfwidth = cfg.workspace_halfwidth
        q = np.concatenate(([0.0, env.model.standing_height, 0.0],
                            env.model.standing_joints))
        env.reset(mode="pose", q=q)
        skill = tiny_skill("fwd", pacing_motion(0.4), env, seed=2)
        reset_learner = tiny_reset_learner(env, seed=3)
        session = Session(tmp_path, cfg)
        return env, skill, reset_learner, session

    def test_event_sequence_and_data_hygiene(self, tmp_path):
        env, skill, reset_learner, session = self.make_world(tmp_path)
        record, metrics = stitch_episode(env, skill, reset_learner,
                                         session.config, session)
        kinds = session.event_kinds()
        assert kinds[0] == "rollout"
        assert "train" in kinds and "reset" in kinds
        assert kinds.index("train") < kinds.index("reset")
        # reset transitions are stored nowhere
        assert reset_learner.buffer.size == 0
        assert skill.learner.buffer.size == record.skill_steps
        assert record.reset_steps >= 1

    def test_collect_false_stores_nothing(self, tmp_path):
        env, skill, reset_learner, session = self.make_world(tmp_path)
        stitch_episode(env, skill, reset_learner, session.config, session,
                       collect=False)
        assert skill.learner.buffer.size == 0
        assert reset_learner.buffer.size == 0

    def test_workspace_exit_teleports_home(self, tmp_path):
        env, skill, reset_learner, session = self.make_world(
            tmp_path, workspace_halfwidth=0.05)
        env.config.workspace_halfwidth = 0.05
        q = env.q.copy()
        q[0] = 0.2                      # parked outside the workspace
        env.reset(mode="pose", q=q)
        record, _ = stitch_episode(env, skill, reset_learner,
                                   session.config, session)
        assert record.teleports >= 1
        assert session.interventions == record.teleports
        assert "teleport" in session.event_kinds()
        assert abs(env.q[0]) <= 0.05 + 1e-9

    def test_reset_failure_is_marked_and_continues(self, tmp_path):
        # an untrained reset policy inside a 0.3 s cap cannot recover from
        # a fall, so the failure path is exercised deterministically
        env, skill, reset_learner, session = self.make_world(tmp_path)
        q = env.q.copy()
        q[1] = 0.12
        q[2] = 1.3                      # on its side
        env.reset(mode="pose", q=q)
        record, _ = stitch_episode(env, skill, reset_learner,
                                   session.config, session)
        assert not record.reset_success
        assert any(i["what"] == "reset-failure" for i in session.incidents)

    def test_fail_on_fall_restored_after_reset_phase(self, tmp_path):
        env, skill, reset_learner, session = self.make_world(tmp_path)
        env.config.fail_on_fall = True
        stitch_episode(env, skill, reset_learner, session.config, session)
        assert env.config.fail_on_fall


class TestFinetune:
    def run_session(self, tmp_path, budget=40, **cfg_overrides):
        cfg = fast_cfg(finetune_budget=budget, **cfg_overrides)
        env = build_env(cfg.target_env, seed=1)
        fwd = tiny_skill("fwd", pacing_motion(0.4), env, seed=2)
        bwd = tiny_skill("bwd", pacing_motion(-0.4), env, seed=4)
        reset_learner = tiny_reset_learner(env, seed=3)
        session = Session(tmp_path, cfg)
        summary = finetune([fwd, bwd], reset_learner, cfg, session, env=env)
        return session, summary, (fwd, bwd), env

    def test_trace_grammar(self, tmp_path):
        session, summary, _, _ = self.run_session(tmp_path)
        text = " ".join(session.event_kinds()) + " "
        pattern = r"^(select rollout (teleport )?train (teleport )*reset )+$"
        assert re.fullmatch(pattern, text), text

    def test_budget_and_metrics_rows(self, tmp_path):
        session, summary, _, _ = self.run_session(tmp_path)
        assert summary["steps"] >= 40
        metrics = read_metrics(session.log_dir / "finetune.csv")
        assert len(metrics["step"]) == summary["episodes"]
        assert metrics["step"][-1] == summary["steps"]

    def test_buffers_cleared_and_refilled_with_target_data_only(self,
                                                                tmp_path):
        cfg = fast_cfg(finetune_budget=40)
        env = build_env(cfg.target_env, seed=1)
        fwd = tiny_skill("fwd", pacing_motion(0.4), env, seed=2)
        bwd = tiny_skill("bwd", pacing_motion(-0.4), env, seed=4)
        junk = Transition(np.zeros(env.obs_dim), np.zeros(44), np.zeros(8),
                          5.0, np.zeros(env.obs_dim), np.zeros(44),
                          Termination.NONE)
        for s in (fwd, bwd):
            for _ in range(7):
                s.learner.buffer.add(junk)
        reset_learner = tiny_reset_learner(env, seed=3)
        session = Session(tmp_path, cfg)
        summary = finetune([fwd, bwd], reset_learner, cfg, session, env=env)
        total = fwd.learner.buffer.size + bwd.learner.buffer.size
        assert total == summary["steps"]       # junk gone, only fresh data

    def test_warmup_gates_updates(self, tmp_path):
        # warm-up spans the whole budget: updates may start only once the
        # buffer holds the full warm-up's worth of fresh samples
        cfg = fast_cfg(finetune_budget=30, warmup=30)
        env = build_env(cfg.target_env, seed=1)
        skill = tiny_skill("fwd", pacing_motion(0.4), env, seed=2)
        reset_learner = tiny_reset_learner(env, seed=3)
        session = Session(tmp_path, cfg)
        finetune([skill], reset_learner, cfg, session, env=env)
        assert skill.learner.cfg.warmup == 30
        train_events = [d for k, d in session.events if k == "train"]
        assert all(e["n_critic_updates"] == 0 for e in train_events[:-1])
        assert train_events[-1]["n_critic_updates"] > 0

    def test_repeated_faults_halt_session(self, tmp_path):
        cfg = fast_cfg(finetune_budget=500, max_consecutive_faults=2)
        env = build_env(cfg.target_env, seed=1)
        skill = tiny_skill("fwd", pacing_motion(0.4), env, seed=2)
        reset_learner = tiny_reset_learner(env, seed=3)
        session = Session(tmp_path, cfg)

        real_act = skill.learner.act

        def sabotage(obs, goal, deterministic=False):
            env.qd[0] = np.nan
            return real_act(obs, goal, deterministic=deterministic)

        skill.learner.act = sabotage
        with pytest.raises(SessionHalt, match="consecutive"):
            finetune([skill], reset_learner, cfg, session, env=env)
        faults = [i for i in session.incidents
                  if i["what"] == "simulation-fault"]
        assert len(faults) == 2
        assert (session.log_dir / "incidents.log").exists()

    def test_checkpoints_written_at_cadence(self, tmp_path):
        session, summary, skills, _ = self.run_session(
            tmp_path, budget=40, checkpoint_every=20)
        for s in skills:
            files = list(session.checkpoint_dir.glob(f"{s.name}-*.npz"))
            assert files, s.name


class TestExportCurves:
    def test_curves_mirror_logs_row_for_row(self, tmp_path):
        cfg = fast_cfg(pretrain_budget=45)
        env = build_env(cfg.source_env, seed=2)
        skill = tiny_skill("pace", standing_motion(), env)
        session = Session(tmp_path, cfg)
        pretrain_skill(skill, env, cfg, session=session)
        written = export_curves(tmp_path)
        assert written
        metrics = read_metrics(session.log_dir / "pretrain-pace.csv")
        cols, rows = read_curve(session.curve_dir
                                / "pretrain-pace-curve.csv")
        assert cols == ["step", "episode_return"]
        assert np.array_equal(rows[:, 0], metrics["step"])
        assert np.array_equal(rows[:, 1], metrics["episode_return"])
        # the eval curve is copied verbatim
        cols_e, rows_e = read_curve(session.curve_dir
                                    / "pretrain-pace-eval-curve.csv")
        cols_l, rows_l = read_curve(session.log_dir
                                    / "pretrain-pace-eval.csv")
        assert cols_e == cols_l
        assert np.array_equal(rows_e, rows_l)
