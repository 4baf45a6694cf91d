"""Reference motions for the planar quadruped.

A pose is a flat float array ``[root_x, root_z, pitch, q_0 .. q_7]`` with the
eight joints ordered (hip, knee) for legs FL, FR, RL, RR.  A
:class:`ReferenceMotion` is a uniformly sampled sequence of poses that can be
queried at arbitrary times with linear interpolation.  Cyclic motions wrap in
phase while the root pose keeps accumulating the per-cycle displacement, so a
0.5 s pacing cycle queried at t = 7.3 s returns a root that has travelled
fourteen-and-a-bit cycles downrange.

Motions are generated procedurally (pacing at a target speed, standing) or
loaded from a small versioned JSON format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

ROOT_X, ROOT_Z, PITCH = 0, 1, 2
N_LEGS = 4
N_JOINTS = 2 * N_LEGS
POSE_DIM = 3 + N_JOINTS

# Nominal crouched standing posture.  Hip angles are measured from straight
# down (positive swings the thigh forward), knees flex negative.  With equal
# thigh/calf segments the (+0.5, -1.0) pair puts each foot directly below its
# hip, which keeps the standing root height a one-liner.
STAND_HIP = 0.5
STAND_KNEE = -1.0
LEG_SEGMENT = 0.2

STANDING_JOINTS = np.array([STAND_HIP, STAND_KNEE] * N_LEGS)
STANDING_HEIGHT = 2.0 * LEG_SEGMENT * np.cos(STAND_HIP)

# Reference motions are sampled at the control rate (33 1/3 Hz).
FRAME_DT = 0.03

MOTION_FORMAT_VERSION = 1


def feet_relative(pose, half_body=0.2, thigh=LEG_SEGMENT, calf=LEG_SEGMENT):
    """Foot positions relative to the root, world axes, shape (4, 2).

    Forward kinematics for the four (hip, knee) leg chains; legs 0-1 hang
    from the +x torso end, legs 2-3 from the -x end.
    """
    pose = np.asarray(pose, dtype=np.float64)
    th = pose[PITCH]
    out = np.empty((N_LEGS, 2))
    for leg in range(N_LEGS):
        sgn = 1.0 if leg < 2 else -1.0
        a1 = th + pose[3 + 2 * leg]
        a2 = a1 + pose[4 + 2 * leg]
        out[leg, 0] = (sgn * half_body * np.cos(th)
                       + thigh * np.sin(a1) + calf * np.sin(a2))
        out[leg, 1] = (sgn * half_body * np.sin(th)
                       - thigh * np.cos(a1) - calf * np.cos(a2))
    return out


def joints(pose):
    """Joint slice of a pose array (view, not copy)."""
    return pose[..., 3:]


def root(pose):
    """Root slice ``[x, z, pitch]`` of a pose array (view, not copy)."""
    return pose[..., :3]


@dataclass
class ReferenceMotion:
    """Uniformly sampled pose trajectory with linear interpolation.

    frames: (F, POSE_DIM) array, one pose per row, ``dt`` seconds apart.
    cyclic: if True the motion repeats forever; the root offset between the
        last and first frame is applied once per completed cycle.  Generated
        cyclic motions store the closing frame explicitly, i.e.
        ``frames[-1] == frames[0] + cycle_offset``.
    """

    frames: np.ndarray
    dt: float
    cyclic: bool = False
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != POSE_DIM:
            raise SchemaError(
                f"frames must be (F, {POSE_DIM}), got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise SchemaError("a motion needs at least two frames")
        if not np.isfinite(self.frames).all():
            raise SchemaError("frames contain non-finite values")
        if self.dt <= 0.0:
            raise SchemaError(f"dt must be positive, got {self.dt}")

    @property
    def duration(self):
        """Length of one pass through the frames, in seconds."""
        return (self.frames.shape[0] - 1) * self.dt

    @property
    def cycle_offset(self):
        """Root pose increment per cycle (zero for non-cyclic motions)."""
        off = np.zeros(POSE_DIM)
        if self.cyclic:
            off[:3] = self.frames[-1, :3] - self.frames[0, :3]
        return off

    def _locate(self, t):
        """Map time to (whole_cycles, segment index, fraction within segment)."""
        dur = self.duration
        if self.cyclic:
            cycles = np.floor(t / dur)
            tau = t - cycles * dur
            # guard against tau == dur from floating point
            if tau >= dur:
                tau -= dur
                cycles += 1.0
        else:
            cycles = 0.0
            tau = min(max(t, 0.0), dur)
        seg = min(int(tau / self.dt), self.frames.shape[0] - 2)
        frac = tau / self.dt - seg
        return cycles, seg, frac

    def pose_at(self, t):
        """Interpolated pose at time ``t`` (seconds)."""
        cycles, seg, frac = self._locate(float(t))
        pose = (1.0 - frac) * self.frames[seg] + frac * self.frames[seg + 1]
        if self.cyclic and cycles != 0.0:
            pose = pose + cycles * self.cycle_offset
        return pose

    def velocity_at(self, t):
        """Pose rate at time ``t``: the slope of the active linear segment."""
        _, seg, frac = self._locate(float(t))
        if not self.cyclic and (t < 0.0 or t >= self.duration):
            return np.zeros(POSE_DIM)
        return (self.frames[seg + 1] - self.frames[seg]) / self.dt

    def end_effectors(self, t):
        """Root-relative foot positions of the interpolated pose at ``t``."""
        return feet_relative(self.pose_at(t))

    # -- persistence --------------------------------------------------------

    def save(self, path):
        doc = {
            "format_version": MOTION_FORMAT_VERSION,
            "name": self.name,
            "dt": self.dt,
            "cyclic": self.cyclic,
            "frames": self.frames.tolist(),
            "meta": self.meta,
        }
        with open(path, "w") as f:
            json.dump(doc, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = json.load(f)
        if not isinstance(doc, dict):
            raise SchemaError("motion file must hold a JSON object")
        for key in ("format_version", "dt", "cyclic", "frames"):
            if key not in doc:
                raise SchemaError(f"motion file missing key {key!r}")
        if doc["format_version"] != MOTION_FORMAT_VERSION:
            raise SchemaError(
                f"unsupported motion format version {doc['format_version']!r}")
        return cls(frames=np.array(doc["frames"], dtype=np.float64),
                   dt=float(doc["dt"]), cyclic=bool(doc["cyclic"]),
                   name=str(doc.get("name", "")), meta=doc.get("meta", {}))


# -- procedural generators --------------------------------------------------

# Legs are paced in lateral pairs: FL+RL share a phase, FR+RR the opposite.
_PACING_PHASE = {0: 0.0, 1: 0.5, 2: 0.0, 3: 0.5}  # FL, FR, RL, RR


def pacing_motion(speed, cycle_time=0.48, dt=FRAME_DT, knee_lift=0.35,
                  stand_height=None, name=None):
    """Pacing gait at a target root speed (m/s, negative paces backward).

    Hips follow a cosine sweep around the standing angle; the swing amplitude
    is chosen so the stance-phase foot sweep matches the commanded root travel
    (chord approximation, v = 4 * L * sin(A) / T with L the hip-to-foot
    distance).  Knees add a half-sine flexion bump during swing to clear the
    ground.  The root translates at constant speed at standing height.
    """
    if stand_height is None:
        stand_height = STANDING_HEIGHT
    n_frames = max(int(round(cycle_time / dt)), 2)
    cycle_time = n_frames * dt  # snap so frames tile the cycle exactly

    leg_len = STANDING_HEIGHT  # hip-to-foot distance in the standing posture
    ratio = speed * cycle_time / (4.0 * leg_len)
    if abs(ratio) >= 1.0:
        raise ValueError(f"speed {speed} not reachable with cycle {cycle_time}")
    amp = np.arcsin(ratio)

    ts = np.arange(n_frames + 1) * dt
    frames = np.zeros((n_frames + 1, POSE_DIM))
    frames[:, ROOT_X] = speed * ts
    frames[:, ROOT_Z] = stand_height
    for leg in range(N_LEGS):
        s = (ts / cycle_time + _PACING_PHASE[leg]) % 1.0
        # stance on s in [0, 0.5): hip sweeps +A -> -A; swing returns it
        hip = STAND_HIP + amp * np.cos(2.0 * np.pi * s)
        swing = s >= 0.5
        bump = np.where(swing, np.sin(np.pi * (2.0 * s - 1.0)), 0.0)
        knee = STAND_KNEE - knee_lift * bump
        frames[:, 3 + 2 * leg] = hip
        frames[:, 4 + 2 * leg] = knee
    # pin the closing frame to an exact phase wrap of the first
    frames[-1, 2:] = frames[0, 2:]
    frames[-1, ROOT_Z] = frames[0, ROOT_Z]
    frames[-1, ROOT_X] = frames[0, ROOT_X] + speed * cycle_time
    if name is None:
        name = f"pace{'+' if speed >= 0 else '-'}{abs(speed):.2f}"
    return ReferenceMotion(frames=frames, dt=dt, cyclic=True, name=name,
                           meta={"speed": speed, "cycle_time": cycle_time})


def standing_motion(duration=0.99, dt=FRAME_DT, stand_height=None,
                    name="stand"):
    """Hold the nominal standing posture in place."""
    if stand_height is None:
        stand_height = STANDING_HEIGHT
    n_frames = max(int(round(duration / dt)), 1)
    pose = np.concatenate(([0.0, stand_height, 0.0], STANDING_JOINTS))
    frames = np.tile(pose, (n_frames + 1, 1))
    return ReferenceMotion(frames=frames, dt=dt, cyclic=True, name=name,
                           meta={"speed": 0.0})
