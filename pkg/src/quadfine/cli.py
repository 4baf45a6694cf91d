"""Command-line entry points for training, evaluation, and log tooling.

Every command takes a YAML config file, an optional ``--seed`` override,
and an optional ``--output`` directory (default: ``$QUADFINE_OUTPUT`` or
``./runs``, plus the config stem).  Successful runs leave their artifacts
in the output directory next to a ``manifest.json`` recording the config
hash, effective seed, and package version.  Exit codes: 0 on success, 1 on
a runtime fault (an incident log is written), 2 on a bad command line or
an invalid config (the diagnostic names the offending key and line).
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path

import yaml

from . import __version__
from .errors import ConfigError, SchemaError
from .estimation import EstimatorConfig, estimate_rollout
from .logs import (read_trajectory, sensor_log_from_trajectory, write_curve)
from .motions import ReferenceMotion, pacing_motion, standing_motion
from .orchestrator import (Session, SessionConfig, SessionHalt, build_env,
                           evaluate_reset, evaluate_skill, export_curves,
                           finetune, load_reset_policy, make_reset_learner,
                           make_skill, pretrain, restore_skill, seed_for,
                           train_reset_policy)
from .redq import LearnerConfig
from .sim.model import RobotModel

OUTPUT_ENV_VAR = "QUADFINE_OUTPUT"

COMMANDS = ("pretrain", "finetune", "evaluate", "reset-train",
            "estimate-replay", "export-curves")


# ---------------------------------------------------------------------------
# config loading with line-aware diagnostics


class ConfigFile:
    """Parsed YAML plus a key-path → line map for error messages."""

    def __init__(self, path, data, lines, sha256):
        self.path = Path(path)
        self.data = data
        self.lines = lines
        self.sha256 = sha256

    def error(self, key_path, message):
        line = self.lines.get(key_path)
        where = f"{self.path}:{line}" if line else str(self.path)
        raise ConfigError(f"{where}: key {key_path!r}: {message}")

    def section(self, name, required=False):
        value = self.data.get(name)
        if value is None:
            if required:
                self.error(name, "section is required for this command")
            return {}
        if not isinstance(value, dict):
            self.error(name, "must be a mapping")
        return value


def _key_lines(node, prefix="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else key_node.value
            out[path] = key_node.start_mark.line + 1
            _key_lines(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _key_lines(item, f"{prefix}[{i}]", out)
    return out


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(node) if node is not None else {}
    digest = hashlib.sha256(text.encode()).hexdigest()
    return ConfigFile(path, data, lines, digest)


_TOP_LEVEL = {"session", "skills", "learner", "reset", "finetune",
              "evaluate", "estimate_replay", "export"}


def check_sections(cfg):
    for key in cfg.data:
        if key not in _TOP_LEVEL:
            cfg.error(key, f"unknown section (expected one of "
                           f"{', '.join(sorted(_TOP_LEVEL))})")


def session_config(cfg, seed_override=None):
    spec = dict(cfg.section("session"))
    allowed = {f.name for f in dataclasses.fields(SessionConfig)}
    for key in spec:
        if key not in allowed:
            cfg.error(f"session.{key}", "unknown session setting")
    if seed_override is not None:
        spec["seed"] = int(seed_override)
    try:
        return SessionConfig(**spec)
    except ConfigError as exc:
        raise ConfigError(f"{cfg.path}: session: {exc}")


def motion_from_spec(cfg, key_path, spec):
    if not isinstance(spec, dict):
        cfg.error(key_path, "must be a mapping")
    spec = dict(spec)
    if "file" in spec:
        return ReferenceMotion.load(spec["file"])
    kind = spec.pop("type", None)
    try:
        if kind == "pacing":
            return pacing_motion(**spec)
        if kind == "standing":
            return standing_motion(**spec)
    except TypeError as exc:
        cfg.error(key_path, str(exc))
    cfg.error(f"{key_path}.type",
              f"unknown motion type {kind!r} (pacing, standing, or file)")


_LEARNER_KEYS = ({f.name for f in dataclasses.fields(LearnerConfig)}
                 - {"obs_dim", "goal_dim", "action_dim"})


def learner_overrides(cfg, extra=None, extra_path=""):
    spec = dict(cfg.section("learner"))
    for key in spec:
        if key not in _LEARNER_KEYS:
            cfg.error(f"learner.{key}", "unknown learner setting")
    for key in dict(extra or {}):
        if key not in _LEARNER_KEYS:
            cfg.error(f"{extra_path}.{key}", "unknown learner setting")
    spec.update(extra or {})
    if "hidden" in spec:
        spec["hidden"] = tuple(spec["hidden"])
    return spec


def build_skills(cfg, env, seed):
    entries = cfg.data.get("skills")
    if not entries:
        cfg.error("skills", "at least one skill is required")
    if not isinstance(entries, list):
        cfg.error("skills", "must be a list")
    overrides = learner_overrides(cfg)
    skills = []
    for i, entry in enumerate(entries):
        where = f"skills[{i}]"
        if not isinstance(entry, dict) or "name" not in entry:
            cfg.error(where, "each skill needs a name and a motion")
        extra = set(entry) - {"name", "motion"}
        if extra:
            cfg.error(f"{where}.{sorted(extra)[0]}", "unknown skill setting")
        motion = motion_from_spec(cfg, f"{where}.motion",
                                  entry.get("motion"))
        skills.append(make_skill(entry["name"], motion, env,
                                 seed=seed_for(seed, entry["name"]),
                                 **overrides))
    return skills


# ---------------------------------------------------------------------------
# output handling


def resolve_output(args, cfg):
    if args.output is not None:
        out = Path(args.output)
    else:
        root = Path(os.environ.get(OUTPUT_ENV_VAR, "runs"))
        out = root / f"{cfg.path.stem}-{args.command.replace('-', '_')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out_dir, command, cfg, seed, extra=None):
    manifest = {
        "command": command,
        "config": str(cfg.path),
        "config_sha256": cfg.sha256,
        "seed": int(seed),
        "version": __version__,
    }
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return path


def write_incident(out_dir, command, exc):
    path = Path(out_dir) / "incident.log"
    with open(path, "a") as fh:
        fh.write(f"command: {command}\n")
        fh.write(f"error: {exc}\n")
        fh.write(traceback.format_exc())
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, cfg):
    scfg = session_config(cfg, args.seed)
    out = resolve_output(args, cfg)
    session = Session(out, scfg)
    env = build_env(scfg.source_env, seed=scfg.seed)
    skills = build_skills(cfg, env, scfg.seed)

    def factory(name):
        return build_env(scfg.source_env, seed=seed_for(scfg.seed, name))

    results = pretrain(skills, scfg, session=session, env_factory=factory)
    write_manifest(out, "pretrain", cfg, scfg.seed,
                   {"skills": {n: {k: v for k, v in s.items()
                                   if k != "eval_returns"}
                               for n, s in results.items()},
                    "checkpoints": str(session.checkpoint_dir)})
    for name, stats in results.items():
        print(f"{name}: {stats['pretrain_steps']} steps "
              f"({stats['stop_reason']})")
    return 0


def cmd_reset_train(args, cfg):
    scfg = session_config(cfg, args.seed)
    spec = dict(cfg.section("reset"))
    unknown = set(spec) - {"env", "learner", "eval_drops"}
    if unknown:
        cfg.error(f"reset.{sorted(unknown)[0]}", "unknown reset setting")
    env_spec = dict(spec.get("env") or {})
    env_spec.setdefault("fail_on_fall", False)
    env = build_env(env_spec, seed=scfg.seed)
    overrides = learner_overrides(cfg, extra=spec.get("learner"),
                                  extra_path="reset.learner")
    learner = make_reset_learner(env, seed=seed_for(scfg.seed, "reset"),
                                 **overrides)
    out = resolve_output(args, cfg)
    session = Session(out, scfg)
    stats = train_reset_policy(learner, env, scfg, session=session)
    learner = stats.pop("learner")
    eval_env = build_env(env_spec, seed=scfg.seed + 1)
    held_out = evaluate_reset(learner, eval_env,
                              n_drops=int(spec.get("eval_drops", 20)),
                              time_limit=scfg.reset_time_limit,
                              hold_time=scfg.reset_hold_time)
    write_manifest(out, "reset-train", cfg, scfg.seed,
                   {"training": stats, "held_out": held_out,
                    "checkpoints": str(session.checkpoint_dir)})
    print(f"reset policy: {stats['steps']} steps ({stats['stop_reason']}), "
          f"held-out recovery rate {held_out['recovery_rate']:.2f}")
    return 0


def cmd_finetune(args, cfg):
    scfg = session_config(cfg, args.seed)
    spec = dict(cfg.section("finetune", required=True))
    unknown = set(spec) - {"checkpoint_dir", "skills", "reset_checkpoint_dir"}
    if unknown:
        cfg.error(f"finetune.{sorted(unknown)[0]}",
                  "unknown fine-tuning setting")
    ckpt_dir = spec.get("checkpoint_dir")
    if not ckpt_dir:
        cfg.error("finetune.checkpoint_dir",
                  "fine-tuning needs pretrained skill checkpoints")
    names = spec.get("skills")
    if not names:
        cfg.error("finetune.skills",
                  "fine-tuning needs the skill names to load")
    if not isinstance(names, list):
        cfg.error("finetune.skills", "must be a list of names")
    skills = [restore_skill(ckpt_dir, n, with_buffer=False) for n in names]
    env = build_env(scfg.target_env, seed=scfg.seed)
    reset_dir = spec.get("reset_checkpoint_dir")
    if reset_dir:
        reset_learner = load_reset_policy(reset_dir)
    else:
        reset_learner = make_reset_learner(
            env, seed=seed_for(scfg.seed, "reset"))
    out = resolve_output(args, cfg)
    session = Session(out, scfg)
    summary = finetune(skills, reset_learner, scfg, session, env=env)
    summary.pop("returns")
    write_manifest(out, "finetune", cfg, scfg.seed,
                   {"summary": summary,
                    "checkpoints": str(session.checkpoint_dir)})
    print(f"fine-tune: {summary['steps']} steps over "
          f"{summary['episodes']} episodes, "
          f"{summary['interventions']} interventions, "
          f"mean return {summary['mean_return']:.3f}")
    return 0


def cmd_evaluate(args, cfg):
    spec = dict(cfg.section("evaluate", required=True))
    unknown = set(spec) - {"checkpoint_dir", "skill", "episodes", "env"}
    if unknown:
        cfg.error(f"evaluate.{sorted(unknown)[0]}",
                  "unknown evaluation setting")
    ckpt_dir = spec.get("checkpoint_dir")
    if not ckpt_dir:
        cfg.error("evaluate.checkpoint_dir", "required")
    name = spec.get("skill")
    if not name:
        cfg.error("evaluate.skill", "required")
    n_episodes = int(spec.get("episodes", 10))
    seed = int(args.seed if args.seed is not None
               else cfg.section("session").get("seed", 0))
    skill = restore_skill(ckpt_dir, name)
    env = build_env(spec.get("env") or {}, seed=seed)
    if env.obs_dim != skill.learner.cfg.obs_dim:
        raise SchemaError(
            f"checkpoint expects {skill.learner.cfg.obs_dim}-dim "
            f"observations but the environment produces {env.obs_dim}")
    result = evaluate_skill(skill, env, n_episodes=n_episodes, seed=seed)
    out = resolve_output(args, cfg)
    rows = [(i, r, n) for i, (r, n) in
            enumerate(zip(result["returns"], result["lengths"]))]
    write_curve(out / "evaluation.csv", ["episode", "episode_return",
                                         "steps"], rows)
    write_manifest(out, "evaluate", cfg, seed,
                   {"skill": name, "episodes": n_episodes,
                    "mean": result["mean"], "std": result["std"],
                    "fall_rate": result["fall_rate"]})
    for i, r, n in rows:
        print(f"rollout {i}: return {r:.4f} over {n} steps")
    print(f"summary: mean {result['mean']:.4f} std {result['std']:.4f} "
          f"fall rate {result['fall_rate']:.2f}")
    return 0


def cmd_estimate_replay(args, cfg):
    spec = dict(cfg.section("estimate_replay", required=True))
    unknown = set(spec) - {"log", "estimator"}
    if unknown:
        cfg.error(f"estimate_replay.{sorted(unknown)[0]}",
                  "unknown replay setting")
    log_path = spec.get("log")
    if not log_path:
        cfg.error("estimate_replay.log", "required")
    est_spec = dict(spec.get("estimator") or {})
    allowed = {f.name for f in dataclasses.fields(EstimatorConfig)}
    for key in est_spec:
        if key not in allowed:
            cfg.error(f"estimate_replay.estimator.{key}",
                      "unknown estimator setting")
    traj = read_trajectory(log_path)
    log = sensor_log_from_trajectory(traj)
    result = estimate_rollout(log, model=RobotModel(),
                              config=EstimatorConfig(**est_spec))
    out = resolve_output(args, cfg)
    rows = zip(result["time"],
               result["est_pos"][:, 0], result["est_pos"][:, 1],
               result["true_pos"][:, 0], result["true_pos"][:, 1],
               result["est_vel"][:, 0], result["est_vel"][:, 1],
               result["true_vel"][:, 0], result["true_vel"][:, 1],
               result["vel_err"], result["pos_err"])
    write_curve(out / "estimate-vs-truth.csv",
                ["time", "est_x", "est_z", "true_x", "true_z",
                 "est_vx", "est_vz", "true_vx", "true_vz",
                 "vel_err", "pos_err"], rows)
    seed = args.seed if args.seed is not None else 0
    write_manifest(out, "estimate-replay", cfg, seed,
                   {"log": str(log_path),
                    "vel_rmse": result["vel_rmse"],
                    "pos_drift": result["pos_drift"],
                    "stance_fraction": result["stance_fraction"],
                    "faults": int(result["faults"])})
    print(f"velocity RMSE {result['vel_rmse']:.4f} m/s, "
          f"final position drift {result['pos_drift']:.4f} m, "
          f"faults {int(result['faults'])}")
    return 0


def cmd_export_curves(args, cfg):
    spec = dict(cfg.section("export"))
    session_root = spec.get("session")
    if session_root is None:
        if args.output is None:
            cfg.error("export.session",
                      "required (or pass --output SESSION_DIR)")
        session_root = args.output
    written = export_curves(session_root)
    seed = args.seed if args.seed is not None else 0
    write_manifest(Path(session_root), "export-curves", cfg, seed,
                   {"curves": [str(p) for p in written]})
    for p in written:
        print(p)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="quadfine",
        description="Desk-scale quadruped skill training and analysis.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="|".join(COMMANDS))
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a YAML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed")
        p.add_argument("--output", default=None,
                       help=f"output directory (default: "
                            f"${OUTPUT_ENV_VAR} or ./runs)")
    return parser


_RUNNERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "reset-train": cmd_reset_train,
    "estimate-replay": cmd_estimate_replay,
    "export-curves": cmd_export_curves,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        check_sections(cfg)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _RUNNERS[args.command](args, cfg)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SessionHalt as exc:
        out_dir = resolve_output(args, cfg)
        incident = write_incident(out_dir, args.command, exc)
        print(f"session halted: {exc}\nincident log: {incident}",
              file=sys.stderr)
        return 1
    except Exception as exc:   # the process boundary: log, report, exit 1
        out_dir = resolve_output(args, cfg)
        incident = write_incident(out_dir, args.command, exc)
        print(f"runtime fault: {exc}\nincident log: {incident}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
