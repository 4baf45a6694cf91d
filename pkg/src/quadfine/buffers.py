"""Ring replay buffer over (observation, goal, action) transitions."""

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, ShapeError

BUFFER_FORMAT_VERSION = 1


class Termination(enum.IntEnum):
    NONE = 0
    FAILURE = 1
    TIMEOUT = 2


@dataclass
class Transition:
    obs: np.ndarray
    goal: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    next_goal: np.ndarray
    termination: Termination = Termination.NONE


@dataclass
class Batch:
    obs: np.ndarray
    goal: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    next_goal: np.ndarray
    termination: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer with seeded uniform sampling (with replacement).

    Storage grows in chunks up to `capacity` so that the default 1e6 capacity
    does not preallocate hundreds of MB for short runs.
    """

    def __init__(self, obs_dim, goal_dim, action_dim, capacity=1_000_000,
                 seed=0, dtype=np.float32):
        self.obs_dim = int(obs_dim)
        self.goal_dim = int(goal_dim)
        self.action_dim = int(action_dim)
        self.capacity = int(capacity)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._alloc = 0
        self._next = 0
        self.size = 0
        self.inserted = 0  # total insertions ever
        self._data = None

    def _ensure(self, n):
        if self._data is not None and n <= self._alloc:
            return
        new_alloc = max(1024, self._alloc * 2)
        while new_alloc < n:
            new_alloc *= 2
        new_alloc = min(new_alloc, self.capacity)
        fields = {
            "obs": self.obs_dim, "goal": self.goal_dim, "action": self.action_dim,
            "next_obs": self.obs_dim, "next_goal": self.goal_dim,
        }
        data = {k: np.zeros((new_alloc, d), dtype=self.dtype)
                for k, d in fields.items()}
        data["reward"] = np.zeros(new_alloc, dtype=self.dtype)
        data["termination"] = np.zeros(new_alloc, dtype=np.int8)
        if self._data is not None:
            for k in data:
                data[k][:self.size] = self._data[k][:self.size]
        self._data = data
        self._alloc = new_alloc

    def add(self, tr: Transition):
        self.add_arrays(tr.obs, tr.goal, tr.action, tr.reward,
                        tr.next_obs, tr.next_goal, tr.termination)

    def add_arrays(self, obs, goal, action, reward, next_obs, next_goal,
                   termination):
        vecs = (obs, goal, action, next_obs, next_goal)
        dims = (self.obs_dim, self.goal_dim, self.action_dim,
                self.obs_dim, self.goal_dim)
        for v, d in zip(vecs, dims):
            v = np.asarray(v)
            if v.shape != (d,):
                raise ShapeError(f"transition field shape {v.shape} != ({d},)")
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite transition field")
        if not np.isfinite(reward):
            raise ValueError("non-finite reward")
        self._ensure(min(self.size + 1, self.capacity))
        i = self._next
        self._data["obs"][i] = obs
        self._data["goal"][i] = goal
        self._data["action"][i] = action
        self._data["reward"][i] = reward
        self._data["next_obs"][i] = next_obs
        self._data["next_goal"][i] = next_goal
        self._data["termination"][i] = int(termination)
        self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def sample(self, batch_size) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer size {self.size} < batch {batch_size}")
        idx = self.sample_indices(batch_size)
        d = self._data
        return Batch(obs=d["obs"][idx], goal=d["goal"][idx],
                     action=d["action"][idx], reward=d["reward"][idx],
                     next_obs=d["next_obs"][idx], next_goal=d["next_goal"][idx],
                     termination=d["termination"][idx])

    def sample_indices(self, batch_size):
        return self.rng.integers(0, self.size, size=batch_size)

    def clear(self):
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def save(self, path):
        meta = {
            "version": BUFFER_FORMAT_VERSION,
            "obs_dim": self.obs_dim, "goal_dim": self.goal_dim,
            "action_dim": self.action_dim, "capacity": self.capacity,
            "size": self.size, "next": self._next, "inserted": self.inserted,
            "dtype": self.dtype.name,
            "rng_state": self.rng.bit_generator.state,
        }
        payload = {"__meta__": np.frombuffer(
            json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()}
        if self.size:
            for k, v in self._data.items():
                payload[k] = v[:self.size]
        with open(path, "wb") as f:
            np.savez(f, **payload)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
            if meta.get("version") != BUFFER_FORMAT_VERSION:
                raise SchemaError(f"unsupported buffer version {meta.get('version')}")
            buf = cls(meta["obs_dim"], meta["goal_dim"], meta["action_dim"],
                      capacity=meta["capacity"], dtype=np.dtype(meta["dtype"]))
            buf.rng.bit_generator.state = meta["rng_state"]
            n = meta["size"]
            if n:
                buf._ensure(n)
                for k in buf._data:
                    buf._data[k][:n] = z[k]
            buf.size = n
            buf._next = meta["next"]
            buf.inserted = meta["inserted"]
        return buf
