"""Per-episode domain randomization.

Each episode draws a global mass scale, per-joint strength scales, a ground
friction coefficient, and an action latency (whole control steps).  The
draw is returned as a plain record so environments can log it and tests can
pin it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..motions import N_JOINTS


@dataclass
class RandomizeConfig:
    enabled: bool = True
    mass_scale: tuple = (0.8, 1.25)
    inertia_scale: tuple = (0.8, 1.25)
    strength_scale: tuple = (0.8, 1.25)
    friction: tuple = (0.4, 1.0)
    latency_steps: tuple = (0, 2)


@dataclass
class EpisodeRandomization:
    mass_scale: float = 1.0
    inertia_scale: float = 1.0
    strength_scale: np.ndarray = field(
        default_factory=lambda: np.ones(N_JOINTS))
    friction: float = None
    latency_steps: int = 0


def sample_randomization(rng, config):
    """Draw one episode's randomization (identity draw when disabled)."""
    if not config.enabled:
        return EpisodeRandomization()
    lo, hi = config.latency_steps
    return EpisodeRandomization(
        mass_scale=float(rng.uniform(*config.mass_scale)),
        inertia_scale=float(rng.uniform(*config.inertia_scale)),
        strength_scale=rng.uniform(*config.strength_scale, size=N_JOINTS),
        friction=float(rng.uniform(*config.friction)),
        latency_steps=int(rng.integers(lo, hi + 1)),
    )
