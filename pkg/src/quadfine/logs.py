"""Plain-text run logs: trajectory rows and training-metrics rows.

Both formats are delimited text with a one-line versioned header so that
files stay greppable and diffable.  Floats are written with ``repr`` so a
read-back parses to the exact same double; curve exports built from these
files can therefore match the training loop row for row.
"""

import csv
import os

import numpy as np

from .buffers import Termination
from .errors import SchemaError
from .motions import N_JOINTS, POSE_DIM
from .sim import physics

MAGIC = "# quadfine-log"
LOG_VERSION = 1

# Trajectory rows carry the full generalized state plus the raw sensor
# channels, so a recorded file doubles as an estimator replay input.
_Q_NAMES = ["x", "z", "pitch"] + [f"j{i}" for i in range(N_JOINTS)]
TRAJECTORY_COLUMNS = (
    ["time"]
    + _Q_NAMES
    + [f"d{n}" for n in _Q_NAMES]
    + [f"a{i}" for i in range(N_JOINTS)]
    + ["reward"]
    + [f"contact{i}" for i in range(physics.N_CONTACTS)]
    + [f"stance{i}" for i in range(4)]
    + ["termination", "imu_pitch", "imu_pitch_rate", "imu_accel_x",
       "imu_accel_z"]
)

METRICS_COLUMNS = ["step", "episode_return", "critic_loss", "actor_loss",
                   "entropy", "temperature"]


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _header(kind, meta):
    fields = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(meta.items()))
    line = f"{MAGIC} v{LOG_VERSION} kind={kind}"
    return line + (" " + fields if fields else "")


def _parse_header(line, expected_kind, path):
    if not line.startswith(MAGIC):
        raise SchemaError(f"{path}: not a quadfine log (bad magic line)")
    tokens = line[len(MAGIC):].split()
    if not tokens or not tokens[0].startswith("v"):
        raise SchemaError(f"{path}: missing log version")
    version = int(tokens[0][1:])
    if version != LOG_VERSION:
        raise SchemaError(f"{path}: unsupported log version {version}")
    meta = {}
    for tok in tokens[1:]:
        key, _, value = tok.partition("=")
        meta[key] = value
    kind = meta.pop("kind", None)
    if kind != expected_kind:
        raise SchemaError(
            f"{path}: expected a {expected_kind!r} log, found {kind!r}")
    return meta


class _Writer:
    """Shared line-oriented CSV writer with a versioned comment header."""

    kind = None
    columns = None

    def __init__(self, path, meta=None):
        self.path = os.fspath(path)
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._fh.write(_header(self.kind, meta or {}) + "\n")
        self._csv.writerow(self.columns)
        self.n_rows = 0

    def _write(self, values):
        if len(values) != len(self.columns):
            raise SchemaError(
                f"{self.kind} row has {len(values)} fields, "
                f"expected {len(self.columns)}")
        self._csv.writerow([_fmt(v) for v in values])
        self.n_rows += 1

    def flush(self):
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TrajectoryLog(_Writer):
    """Writer for per-control-step rollout rows."""

    kind = "trajectory"
    columns = TRAJECTORY_COLUMNS

    def __init__(self, path, dt, meta=None):
        merged = {"dt": float(dt)}
        merged.update(meta or {})
        super().__init__(path, merged)
        self.dt = float(dt)

    def append(self, time, q, qd, action, reward, contacts, stance,
               termination, sensors):
        q = np.asarray(q, dtype=np.float64)
        qd = np.asarray(qd, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        contacts = np.asarray(contacts)
        stance = np.asarray(stance)
        if q.shape != (POSE_DIM,) or qd.shape != (POSE_DIM,):
            raise SchemaError("trajectory row needs full generalized state")
        if contacts.shape != (physics.N_CONTACTS,) or stance.shape != (4,):
            raise SchemaError("trajectory row needs contact and stance flags")
        row = ([time] + list(q) + list(qd) + list(action) + [reward]
               + list(contacts) + list(stance)
               + [int(termination), sensors["pitch"], sensors["pitch_rate"],
                  sensors["accel"][0], sensors["accel"][1]])
        self._write(row)

    def append_step(self, action, reward, info):
        """Convenience wrapper over an environment step's info dict."""
        self.append(info["time"], info["pose"], info["velocity"], action,
                    reward, info["touched"], info["foot_stance"],
                    info["termination"], info["sensors"])


class MetricsLog(_Writer):
    """Writer for per-episode training statistics."""

    kind = "metrics"
    columns = METRICS_COLUMNS

    def append(self, step, episode_return, metrics):
        self._write([int(step), episode_return,
                     metrics.get("critic_loss", np.nan),
                     metrics.get("actor_loss", np.nan),
                     metrics.get("entropy", np.nan),
                     metrics.get("temperature", np.nan)])


def _read_table(path, kind):
    path = os.fspath(path)
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        meta = _parse_header(header, kind, path)
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing column header")
        rows = [row for row in reader if row]
    width = len(columns)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise SchemaError(
                f"{path}: row {i} has {len(row)} fields, expected {width}")
    data = (np.array(rows, dtype=np.float64) if rows
            else np.empty((0, width)))
    return meta, columns, data


def _columns(path, columns, data, names, kind):
    missing = [n for n in names if n not in columns]
    if missing:
        raise SchemaError(f"{path}: {kind} log is missing column(s) "
                          + ", ".join(repr(n) for n in missing))
    idx = [columns.index(n) for n in names]
    return data[:, idx]


def read_trajectory(path):
    """Parse a trajectory log back into named arrays (plus the header meta)."""
    meta, columns, data = _read_table(path, "trajectory")
    if "dt" not in meta:
        raise SchemaError(f"{path}: trajectory header is missing dt")
    get = lambda names: _columns(path, columns, data, names, "trajectory")
    out = {
        "dt": float(meta["dt"]),
        "time": get(["time"])[:, 0],
        "q": get(_Q_NAMES),
        "qd": get([f"d{n}" for n in _Q_NAMES]),
        "action": get([f"a{i}" for i in range(N_JOINTS)]),
        "reward": get(["reward"])[:, 0],
        "contacts": get([f"contact{i}"
                         for i in range(physics.N_CONTACTS)]) > 0.5,
        "stance": get([f"stance{i}" for i in range(4)]) > 0.5,
        "termination": get(["termination"])[:, 0].astype(int),
        "imu_pitch": get(["imu_pitch"])[:, 0],
        "imu_pitch_rate": get(["imu_pitch_rate"])[:, 0],
        "imu_accel": get(["imu_accel_x", "imu_accel_z"]),
    }
    return out


def sensor_log_from_trajectory(traj, initial_pos=None, initial_vel=None):
    """Convert trajectory arrays into the estimator's replay-input schema.

    Root columns of the trajectory double as the ground truth, so replays
    produce estimate-vs-truth errors without extra bookkeeping.  Initial
    conditions default to the first row's truth (a calibrated boot).
    """
    n = len(traj["time"])
    if initial_pos is None:
        initial_pos = traj["q"][0, :2] if n else np.zeros(2)
    if initial_vel is None:
        initial_vel = traj["qd"][0, :2] if n else np.zeros(2)
    return {
        "dt": traj["dt"],
        "time": traj["time"],
        "pitch": traj["imu_pitch"],
        "pitch_rate": traj["imu_pitch_rate"],
        "accel": traj["imu_accel"],
        "joints": traj["q"][:, 3:],
        "joint_rates": traj["qd"][:, 3:],
        "foot_stance": traj["stance"],
        "true_pos": traj["q"][:, :2],
        "true_vel": traj["qd"][:, :2],
        "initial_pos": np.asarray(initial_pos, dtype=np.float64),
        "initial_vel": np.asarray(initial_vel, dtype=np.float64),
    }


def read_metrics(path):
    """Parse a metrics log into named arrays."""
    meta, columns, data = _read_table(path, "metrics")
    get = lambda names: _columns(path, columns, data, names, "metrics")
    return {
        "step": get(["step"])[:, 0].astype(int),
        "episode_return": get(["episode_return"])[:, 0],
        "critic_loss": get(["critic_loss"])[:, 0],
        "actor_loss": get(["actor_loss"])[:, 0],
        "entropy": get(["entropy"])[:, 0],
        "temperature": get(["temperature"])[:, 0],
        "meta": meta,
    }


def write_curve(path, columns, rows):
    """Write a generic named-column curve file (same dialect as the logs)."""
    class _Curve(_Writer):
        kind = "curve"
    _Curve.columns = list(columns)
    with _Curve(path) as w:
        for row in rows:
            w._write(list(row))


def read_curve(path):
    meta, columns, data = _read_table(path, "curve")
    return columns, data


def rollout_to_log(env, policy, n_steps, path, reward_fn=None):
    """Drive ``policy(obs) -> action`` for n steps and record a trajectory."""
    obs = env.observe()
    with TrajectoryLog(path, env.control_dt) as log:
        for _ in range(n_steps):
            action = policy(obs)
            obs, info = env.step(action)
            reward = 0.0 if reward_fn is None else reward_fn(info)
            log.append_step(action, reward, info)
            if info["termination"] != Termination.NONE:
                break
    return log.path
