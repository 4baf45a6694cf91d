"""Training sessions: pretraining, deployment fine-tuning, episode stitching.

A session owns a set of skills (each a reference motion plus its own
learner — networks and replay data are never shared between skills), a
frozen stand-up policy, and a directory with ``checkpoints/``, ``logs/``
and ``curves/``.  Pretraining runs each skill independently in the source
environment until a return plateau or a sample budget.  Fine-tuning runs
the autonomy loop in the target environment: pick the skill that walks the
robot back toward the middle of the workspace, roll one episode, update
between episodes, then let the stand-up policy recover the robot for the
next episode.  Walking out of the workspace triggers a teleport back to
the origin, counted as an intervention.
"""

import dataclasses
import json
import math
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .buffers import Termination
from .errors import ConfigError, SchemaError
from .logs import (MetricsLog, read_curve, read_metrics, write_curve)
from .motions import ReferenceMotion
from .redq import LearnerConfig, REDQLearner
from .rewards import GOAL_DIM
from .sim import terrain as terrains
from .sim.env import EnvConfig, QuadrupedEnv
from .sim.randomize import RandomizeConfig
from .sim.sensors import ImuConfig
from .tasks import ImitationTask, ResetTask, run_episode


class SessionHalt(RuntimeError):
    """The autonomy loop stopped itself (e.g. repeated simulator faults)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SessionConfig:
    """Settings for one pretrain-then-deploy run."""

    source_env: dict = field(default_factory=dict)
    target_env: dict = field(default_factory=dict)
    warmup: int = 5000                  # target-domain samples before updates
    pretrain_budget: int = 100_000      # env steps per skill
    finetune_budget: int = 50_000       # env steps total on deployment
    eval_every: int = 2_000
    eval_episodes: int = 3
    plateau_window: int = 20
    plateau_tol: float = 0.01           # relative moving-average improvement
    checkpoint_every: int = 10_000
    clear_buffers: bool = True          # drop source-domain data on deploy
    interleaved: bool = False           # update during episodes, not between
    workspace_halfwidth: float = 3.0
    reset_time_limit: float = 5.0
    reset_hold_time: float = 0.5
    max_consecutive_faults: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.pretrain_budget < 0 or self.finetune_budget < 0:
            raise ConfigError("budgets must be non-negative")
        if self.finetune_budget and self.warmup > self.finetune_budget:
            raise ConfigError(
                f"warmup {self.warmup} exceeds fine-tune budget "
                f"{self.finetune_budget}")
        if self.checkpoint_every < 1 or self.eval_every < 1:
            raise ConfigError("cadences must be positive")
        if self.plateau_window < 1:
            raise ConfigError("plateau_window must be positive")
        if self.max_consecutive_faults < 1:
            raise ConfigError("max_consecutive_faults must be positive")


def build_env(spec=None, seed=0):
    """Construct an environment from a plain-dict description.

    ``spec`` keys: "terrain" ({"kind": flat|low_friction|heightfield, ...}),
    "imu", "randomize", and any EnvConfig field.  Unknown keys raise
    ConfigError naming the offender, so config files fail loudly.
    """
    spec = dict(spec or {})
    terrain_spec = dict(spec.pop("terrain", {}) or {})
    imu_spec = spec.pop("imu", None)
    rand_spec = spec.pop("randomize", None)

    kind = terrain_spec.pop("kind", "flat")
    if kind == "flat":
        terrain = terrains.flat(**terrain_spec)
    elif kind == "low_friction":
        terrain = terrains.low_friction(**terrain_spec)
    elif kind == "heightfield":
        terrain_spec.setdefault("seed", seed)
        terrain = terrains.heightfield(**terrain_spec)
    else:
        raise ConfigError(f"unknown terrain kind {kind!r}")

    env_fields = {f.name for f in dataclasses.fields(EnvConfig)}
    unknown = sorted(set(spec) - env_fields)
    if unknown:
        raise ConfigError(f"unknown environment key(s): {', '.join(unknown)}")
    kwargs = dict(spec)
    if imu_spec is not None:
        _check_fields(ImuConfig, imu_spec, "imu")
        kwargs["imu"] = ImuConfig(**imu_spec)
    if rand_spec is not None:
        _check_fields(RandomizeConfig, rand_spec, "randomize")
        rand_spec = {k: tuple(v) if isinstance(v, list) else v
                     for k, v in rand_spec.items()}
        kwargs["randomize"] = RandomizeConfig(**rand_spec)
    return QuadrupedEnv(terrain=terrain, config=EnvConfig(**kwargs),
                        seed=seed)


def _check_fields(cls, spec, where):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def seed_for(base, name):
    """Stable per-skill seed, independent of training order."""
    return (int(base) * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 31)


# ---------------------------------------------------------------------------
# skills


@dataclass
class SkillSpec:
    """One locomotion skill: a reference motion plus its private learner."""

    name: str
    motion: ReferenceMotion
    learner: REDQLearner
    stats: dict = field(default_factory=dict)

    @property
    def displacement(self):
        """Root travel of one full reference period."""
        return float(self.motion.pose_at(self.motion.duration)[0]
                     - self.motion.pose_at(0.0)[0])


def make_skill(name, motion, env, seed=0, **learner_overrides):
    kwargs = dict(obs_dim=env.obs_dim, goal_dim=GOAL_DIM,
                  action_dim=env.action_dim, seed=seed)
    kwargs.update(learner_overrides)
    return SkillSpec(name=name, motion=motion,
                     learner=REDQLearner(LearnerConfig(**kwargs)))


def select_skill(x, skills):
    """Pick the skill whose reference displacement shrinks |x| the most.

    Ties go to the skill that walks forward (positive displacement); a
    single-skill set is returned unconditionally.
    """
    if not skills:
        raise ConfigError("no skills to select from")
    if len(skills) == 1:
        return skills[0]
    best = None
    best_key = None
    for skill in skills:
        d = skill.displacement
        key = (abs(float(x) + d), -d)   # tie-break: larger d wins
        if best_key is None or key < best_key:
            best, best_key = skill, key
    return best


def set_learning_rate(learner, lr):
    learner.cfg.lr = float(lr)
    for adam in (learner.actor_adam, learner.critic_adam, learner.alpha_adam):
        adam.lr = float(lr)


# ---------------------------------------------------------------------------
# persistence


def save_skill(skill, directory, step, with_buffer=False):
    """Write a versioned checkpoint of one skill under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{skill.name}-{int(step):08d}"
    ckpt = directory / f"{stem}.npz"
    buffer_path = directory / f"{stem}-buffer.npz" if with_buffer else None
    skill.learner.save(ckpt, save_buffer_path=buffer_path)
    motion_path = directory / f"{skill.name}.motion.json"
    if not motion_path.exists():
        skill.motion.save(motion_path)
    meta = {
        "name": skill.name,
        "step": int(step),
        "config": _config_to_dict(skill.learner.cfg),
        "motion": motion_path.name,
        "checkpoint": ckpt.name,
        "buffer": buffer_path.name if with_buffer else None,
        "stats": _jsonable(skill.stats),
    }
    with open(directory / f"{stem}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return ckpt


def restore_skill(directory, name, step=None, with_buffer=False):
    """Rebuild a SkillSpec from ``save_skill`` output (latest by default)."""
    directory = Path(directory)
    metas = sorted(p for p in directory.glob(f"{name}-*.json")
                   if p.stem[len(name) + 1:].isdigit())
    if not metas:
        raise FileNotFoundError(f"no checkpoints for skill {name!r} "
                                f"in {directory}")
    if step is not None:
        wanted = directory / f"{name}-{int(step):08d}.json"
        if wanted not in metas:
            raise FileNotFoundError(f"no checkpoint at step {step} "
                                    f"for skill {name!r}")
        meta_path = wanted
    else:
        meta_path = metas[-1]
    with open(meta_path) as fh:
        meta = json.load(fh)
    cfg = _config_from_dict(meta["config"])
    buffer_path = None
    if with_buffer and meta.get("buffer"):
        buffer_path = directory / meta["buffer"]
    learner = REDQLearner.restore(directory / meta["checkpoint"], cfg,
                                  buffer_path=buffer_path)
    set_learning_rate(learner, cfg.lr)
    motion = ReferenceMotion.load(directory / meta["motion"])
    return SkillSpec(name=meta["name"], motion=motion, learner=learner,
                     stats=meta.get("stats", {}))


def _config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d


def _config_from_dict(d):
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    return LearnerConfig(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Termination):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# session bookkeeping


class Session:
    """Directory layout plus an append-only event/incident record."""

    def __init__(self, root, config=None):
        self.root = Path(root)
        self.config = config or SessionConfig()
        for sub in ("checkpoints", "logs", "curves"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.events = []
        self.incidents = []
        self.interventions = 0

    @property
    def checkpoint_dir(self):
        return self.root / "checkpoints"

    @property
    def log_dir(self):
        return self.root / "logs"

    @property
    def curve_dir(self):
        return self.root / "curves"

    def event(self, kind, **data):
        self.events.append((kind, data))

    def event_kinds(self):
        return [kind for kind, _ in self.events]

    def incident(self, what, **data):
        entry = {"what": what, **_jsonable(data)}
        self.incidents.append(entry)
        with open(self.log_dir / "incidents.log", "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pretraining


def _diverged(learner, metrics):
    """Non-finite losses (once updates actually ran) or non-finite params."""
    if metrics["n_critic_updates"] > 0 and not (
            math.isfinite(metrics["critic_loss"])
            and math.isfinite(metrics["q_mean"])):
        return True
    if metrics["n_actor_updates"] > 0 and not (
            math.isfinite(metrics["actor_loss"])
            and math.isfinite(metrics["entropy"])):
        return True
    return not np.isfinite(learner.actor.net.get_flat()).all()


def _plateaued(evals, window, tol):
    if len(evals) < 2 * window:
        return False
    recent = float(np.mean(evals[-window:]))
    previous = float(np.mean(evals[-2 * window:-window]))
    return (recent - previous) < tol * max(abs(previous), 1e-9)


def evaluate_skill(skill, env, n_episodes=10, seed=0, record_actions=False):
    """Deterministic (mean-action) evaluation rollouts with seeded phases."""
    rng = np.random.default_rng(seed)
    task = ImitationTask(env, skill.motion)
    returns, lengths, falls = [], [], 0
    actions = []
    for _ in range(int(n_episodes)):
        phase = float(rng.uniform(0.0, skill.motion.duration))
        trace = [] if record_actions else None
        learner = skill.learner
        if record_actions:
            recorder = _ActionRecorder(learner, trace)
            res = run_episode(task, recorder, deterministic=True, phase=phase)
        else:
            res = run_episode(task, learner, deterministic=True, phase=phase)
        returns.append(res.episode_return)
        lengths.append(res.steps)
        falls += int(res.termination == Termination.FAILURE)
        if record_actions:
            actions.append(np.asarray(trace))
    returns = np.asarray(returns)
    out = {
        "returns": returns,
        "lengths": np.asarray(lengths),
        "mean": float(returns.mean()),
        "std": float(returns.std()),
        "fall_rate": falls / float(n_episodes),
    }
    if record_actions:
        out["actions"] = actions
    return out


class _ActionRecorder:
    """Wraps a learner so evaluation can capture the emitted actions."""

    def __init__(self, learner, trace):
        self._learner = learner
        self._trace = trace

    def act(self, obs, goal, deterministic=False):
        a = self._learner.act(obs, goal, deterministic=deterministic)
        self._trace.append(np.asarray(a, dtype=np.float64).copy())
        return a

    def __getattr__(self, name):
        return getattr(self._learner, name)


def pretrain_skill(skill, env, config, session=None, eval_env=None):
    """Train one skill until its evaluation return plateaus or budget runs out.

    Returns the skill's stats dict: steps used, evaluation curve, stop
    reason, and any divergence incidents (each rollback halves the learning
    rate and resumes from the last checkpoint).
    """
    cfg = config
    learner = skill.learner
    task = ImitationTask(env, skill.motion)
    metrics_log = None
    if session is not None:
        metrics_log = MetricsLog(session.log_dir / f"pretrain-{skill.name}.csv",
                                 meta={"seed": cfg.seed})
    ckpt_dir = (session.checkpoint_dir if session is not None
                else Path(tempfile.mkdtemp(prefix="quadfine-ckpt-")))

    steps = 0
    evals = []
    eval_steps = []
    incidents = 0
    reason = "budget"
    next_eval = cfg.eval_every
    next_ckpt = cfg.checkpoint_every
    budget = cfg.pretrain_budget
    if budget == 0:
        reason = "empty-budget"
        last_good = None
        last_good_step = 0
    else:
        last_good = save_skill(skill, ckpt_dir, 0, with_buffer=True)
        last_good_step = 0
    while steps < budget:
        if cfg.interleaved:
            latest = {}

            def on_step(n, _latest=latest):
                _latest.update(
                    learner.update(learner.cfg.updates_per_step))

            res = run_episode(task, learner, collect=True,
                              max_steps=budget - steps, on_step=on_step)
            metrics = latest or learner.update(0)
        else:
            res = run_episode(task, learner, collect=True,
                              max_steps=budget - steps)
            metrics = learner.update(res.steps * learner.cfg.updates_per_step)
        steps += res.steps
        if metrics_log is not None:
            metrics_log.append(steps, res.episode_return, metrics)

        if _diverged(learner, metrics):
            incidents += 1
            new_lr = learner.cfg.lr * 0.5
            cfg_copy = _config_from_dict(_config_to_dict(learner.cfg))
            restored = REDQLearner.restore(
                last_good, cfg_copy,
                buffer_path=_buffer_path_for(last_good))
            skill.learner = learner = restored
            set_learning_rate(learner, new_lr)
            task = ImitationTask(env, skill.motion)
            if session is not None:
                session.incident("divergence", skill=skill.name, step=steps,
                                 rollback_step=last_good_step, lr=new_lr)
            continue

        if steps >= next_eval:
            next_eval += cfg.eval_every
            ev = evaluate_skill(skill, eval_env or env,
                                n_episodes=cfg.eval_episodes,
                                seed=seed_for(cfg.seed, skill.name))
            evals.append(ev["mean"])
            eval_steps.append(steps)
            if _plateaued(evals, cfg.plateau_window, cfg.plateau_tol):
                reason = "plateau"
                break
        if steps >= next_ckpt:
            next_ckpt += cfg.checkpoint_every
            last_good = save_skill(skill, ckpt_dir, steps, with_buffer=True)
            last_good_step = steps

    if steps > 0:
        save_skill(skill, ckpt_dir, steps, with_buffer=True)
    if metrics_log is not None:
        metrics_log.close()
        write_curve(session.log_dir / f"pretrain-{skill.name}-eval.csv",
                    ["step", "mean_return"], zip(eval_steps, evals))
    skill.stats.update({
        "pretrain_steps": steps,
        "stop_reason": reason,
        "eval_returns": list(map(float, evals)),
        "eval_steps": list(map(int, eval_steps)),
        "divergence_rollbacks": incidents,
    })
    return skill.stats


def _buffer_path_for(ckpt_path):
    p = Path(ckpt_path)
    candidate = p.with_name(p.stem + "-buffer.npz")
    return candidate if candidate.exists() else None


def pretrain(skills, config, session=None, env_factory=None):
    """Pretrain every skill independently (disjoint nets, buffers, seeds)."""
    results = {}
    for skill in skills:
        if env_factory is not None:
            env = env_factory(skill.name)
        else:
            env = build_env(config.source_env,
                            seed=seed_for(config.seed, skill.name))
        results[skill.name] = pretrain_skill(skill, env, config,
                                             session=session)
    return results


# ---------------------------------------------------------------------------
# stand-up policy


def make_reset_learner(env, seed=0, **learner_overrides):
    """A goal-free learner over the same observation layout."""
    kwargs = dict(obs_dim=env.obs_dim, goal_dim=0,
                  action_dim=env.action_dim, seed=seed)
    kwargs.update(learner_overrides)
    return REDQLearner(LearnerConfig(**kwargs))


def evaluate_reset(learner, env, n_drops=20, seed=0, time_limit=5.0,
                   hold_time=0.5):
    """Deterministic recovery rate over a seeded sequence of drops."""
    del seed  # drops come from the env's own seeded generator
    task = ResetTask(env, time_limit=time_limit, hold_time=hold_time)
    recovered = 0
    times = []
    for _ in range(int(n_drops)):
        res = run_episode(task, learner, deterministic=True)
        recovered += int(res.recovered)
        if res.recovered:
            times.append(res.steps * env.control_dt)
    return {
        "recovery_rate": recovered / float(n_drops),
        "n_drops": int(n_drops),
        "mean_recovery_time": float(np.mean(times)) if times else math.nan,
    }


def train_reset_policy(learner, env, config, session=None, eval_env=None):
    """Train the stand-up policy on the drop distribution.

    Mirrors ``pretrain_skill``: episodes with drop resets, updates between
    episodes, periodic deterministic evaluation of the recovery rate, stop
    on plateau or budget.
    """
    cfg = config
    task = ResetTask(env, time_limit=cfg.reset_time_limit,
                     hold_time=cfg.reset_hold_time)
    metrics_log = None
    if session is not None:
        metrics_log = MetricsLog(session.log_dir / "reset-train.csv",
                                 meta={"seed": cfg.seed})
    ckpt_dir = (session.checkpoint_dir if session is not None
                else Path(tempfile.mkdtemp(prefix="quadfine-ckpt-")))
    steps = 0
    evals = []
    eval_steps = []
    rollbacks = 0
    reason = "budget"
    next_eval = cfg.eval_every
    next_ckpt = cfg.checkpoint_every
    budget = cfg.pretrain_budget
    last_good = save_reset_policy(learner, ckpt_dir, 0) if budget else None
    while steps < budget:
        res = run_episode(task, learner, collect=True,
                          max_steps=budget - steps)
        steps += res.steps
        metrics = learner.update(res.steps * learner.cfg.updates_per_step)
        if metrics_log is not None:
            metrics_log.append(steps, res.episode_return, metrics)
        if _diverged(learner, metrics):
            rollbacks += 1
            new_lr = learner.cfg.lr * 0.5
            cfg_copy = _config_from_dict(_config_to_dict(learner.cfg))
            learner = REDQLearner.restore(last_good, cfg_copy)
            set_learning_rate(learner, new_lr)
            if session is not None:
                session.incident("divergence", policy="reset", step=steps,
                                 lr=new_lr)
            continue
        if steps >= next_eval:
            next_eval += cfg.eval_every
            ev = evaluate_reset(learner, eval_env or env,
                                n_drops=cfg.eval_episodes,
                                time_limit=cfg.reset_time_limit,
                                hold_time=cfg.reset_hold_time)
            evals.append(ev["recovery_rate"])
            eval_steps.append(steps)
            if _plateaued(evals, cfg.plateau_window, cfg.plateau_tol):
                reason = "plateau"
                break
        if steps >= next_ckpt:
            next_ckpt += cfg.checkpoint_every
            last_good = save_reset_policy(learner, ckpt_dir, steps)
    if steps > 0:
        save_reset_policy(learner, ckpt_dir, steps)
    if metrics_log is not None:
        metrics_log.close()
        write_curve(session.log_dir / "reset-train-eval.csv",
                    ["step", "recovery_rate"], zip(eval_steps, evals))
    return {
        "steps": steps,
        "stop_reason": reason,
        "recovery_rates": list(map(float, evals)),
        "eval_steps": list(map(int, eval_steps)),
        "divergence_rollbacks": rollbacks,
        "learner": learner,
    }


def save_reset_policy(learner, directory, step):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"reset-policy-{int(step):08d}"
    ckpt = directory / f"{stem}.npz"
    learner.save(ckpt)
    with open(directory / f"{stem}.json", "w") as fh:
        json.dump({"step": int(step),
                   "config": _config_to_dict(learner.cfg)}, fh, indent=2,
                  sort_keys=True)
    return ckpt


def load_reset_policy(directory, step=None):
    directory = Path(directory)
    metas = sorted(p for p in directory.glob("reset-policy-*.json")
                   if p.stem[len("reset-policy-"):].isdigit())
    if not metas:
        raise FileNotFoundError(f"no stand-up policy checkpoints "
                                f"in {directory}")
    meta_path = metas[-1]
    if step is not None:
        meta_path = directory / f"reset-policy-{int(step):08d}.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no stand-up policy at step {step}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    cfg = _config_from_dict(meta["config"])
    ckpt = directory / (meta_path.stem + ".npz")
    learner = REDQLearner.restore(ckpt, cfg)
    set_learning_rate(learner, cfg.lr)
    return learner


# ---------------------------------------------------------------------------
# fine-tuning with autonomous resets


@dataclass
class StitchRecord:
    skill: str
    skill_steps: int
    reset_steps: int
    episode_return: float
    termination: Termination
    fault: bool
    reset_success: bool
    teleports: int


def stitch_episode(env, skill, reset_learner, config, session,
                   collect=True, estimator=None):
    """One autonomy cycle: skill episode, then stand-up recovery in place.

    The stand-up policy is frozen: it acts deterministically and none of
    its transitions are stored anywhere.  Workspace exits teleport the
    robot back to the origin and count as interventions.
    """
    cfg = config
    session.event("rollout", skill=skill.name)
    was_failing = env.config.fail_on_fall
    env.config.fail_on_fall = True
    task = ImitationTask(env, skill.motion, estimator=estimator)
    learner = skill.learner
    # updates run between episodes by default; the interleaved flag moves
    # them inside the rollout, one train-step-sized call per transition
    if collect and cfg.interleaved:
        latest = {}

        def on_step(n, _latest=latest):
            _latest.update(learner.update(learner.cfg.updates_per_step))

        res = run_episode(task, learner, collect=True, reset=False,
                          stop_on_exit=True, on_step=on_step)
        metrics = latest or learner.update(0)
    else:
        res = run_episode(task, learner, collect=collect, reset=False,
                          stop_on_exit=True)
        n = res.steps * learner.cfg.updates_per_step if collect else 0
        metrics = learner.update(n)
    teleports = 0
    if res.workspace_exit:
        env.teleport(0.0)
        session.interventions += 1
        teleports += 1
        session.event("teleport", during="rollout")
    session.event("train", skill=skill.name,
                  n_critic_updates=metrics["n_critic_updates"])

    env.config.fail_on_fall = False
    reset_task = ResetTask(env, time_limit=cfg.reset_time_limit,
                           hold_time=cfg.reset_hold_time,
                           estimator=estimator)
    obs, goal = reset_task.begin(reset=False)
    reset_steps = 0
    success = False
    while True:
        action = reset_learner.act(obs, goal, deterministic=True)
        obs, goal, _, info = reset_task.step(action)
        reset_steps += 1
        if info["workspace_exit"]:
            env.teleport(0.0)
            session.interventions += 1
            teleports += 1
            session.event("teleport", during="reset")
        if info["task_done"]:
            success = info["recovered"]
            break
    env.config.fail_on_fall = was_failing
    session.event("reset", skill=skill.name, success=success,
                  steps=reset_steps)
    if not success:
        session.incident("reset-failure", skill=skill.name,
                         steps=reset_steps)
    return StitchRecord(skill=skill.name, skill_steps=res.steps,
                        reset_steps=reset_steps,
                        episode_return=res.episode_return,
                        termination=res.termination, fault=res.fault,
                        reset_success=success, teleports=teleports), metrics


def finetune(skills, reset_learner, config, session, env=None,
             estimator=None):
    """Run the autonomy loop on the target environment.

    Buffers are cleared on entry by default (stale source-domain data out),
    then each skill re-enters its warm-up: updates stay no-ops until the
    buffer holds ``config.warmup`` fresh target-domain samples.  Repeated
    simulator faults halt the session with a diagnostic.
    """
    cfg = config
    if env is None:
        env = build_env(cfg.target_env, seed=cfg.seed)
    env.config.workspace_halfwidth = cfg.workspace_halfwidth
    if cfg.clear_buffers:
        for skill in skills:
            skill.learner.buffer.clear()
    for skill in skills:
        skill.learner.cfg.warmup = cfg.warmup

    # start standing at the origin
    q = np.concatenate(([0.0, env.model.standing_height, 0.0],
                        env.model.standing_joints))
    env.reset(mode="pose", q=q)

    metrics_log = MetricsLog(session.log_dir / "finetune.csv",
                             meta={"seed": cfg.seed})
    steps = 0
    episodes = 0
    consecutive_faults = 0
    records = []
    next_ckpt = cfg.checkpoint_every
    try:
        while steps < cfg.finetune_budget:
            skill = select_skill(env.q[0], skills)
            session.event("select", skill=skill.name, x=float(env.q[0]))
            record, metrics = stitch_episode(env, skill, reset_learner, cfg,
                                             session, collect=True,
                                             estimator=estimator)
            steps += record.skill_steps
            episodes += 1
            records.append(record)
            metrics_log.append(steps, record.episode_return, metrics)
            if record.fault:
                consecutive_faults += 1
                session.incident("simulation-fault", skill=skill.name,
                                 step=steps, consecutive=consecutive_faults)
                if consecutive_faults >= cfg.max_consecutive_faults:
                    raise SessionHalt(
                        f"{consecutive_faults} consecutive simulator faults "
                        f"at step {steps}; see "
                        f"{session.log_dir / 'incidents.log'}")
            else:
                consecutive_faults = 0
            if steps >= next_ckpt:
                next_ckpt += cfg.checkpoint_every
                for s in skills:
                    save_skill(s, session.checkpoint_dir, s.learner.env_steps)
    finally:
        metrics_log.close()

    for s in skills:
        save_skill(s, session.checkpoint_dir, s.learner.env_steps)
    returns = [r.episode_return for r in records]
    summary = {
        "steps": steps,
        "episodes": episodes,
        "interventions": session.interventions,
        "reset_failures": sum(not r.reset_success for r in records),
        "mean_return": float(np.mean(returns)) if returns else math.nan,
        "returns": returns,
    }
    return summary


# ---------------------------------------------------------------------------
# curve export


def export_curves(session_root):
    """Mirror every log in logs/ into curves/ (a pure function of the logs).

    Metrics streams become (step, episode_return) curves; files that are
    already curves are copied row for row.
    """
    root = Path(session_root)
    log_dir = root / "logs"
    curve_dir = root / "curves"
    curve_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for log_path in sorted(log_dir.glob("*.csv")):
        out = curve_dir / (log_path.stem + "-curve.csv")
        try:
            data = read_metrics(log_path)
            rows = zip(data["step"], data["episode_return"])
            write_curve(out, ["step", "episode_return"], rows)
        except SchemaError:
            columns, table = read_curve(log_path)
            write_curve(out, columns, table)
        written.append(out)
    return written
