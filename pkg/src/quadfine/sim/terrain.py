"""Ground profiles for the planar world.

A terrain is a uniformly sampled height profile with linear interpolation
between samples plus a friction coefficient.  Slopes are assumed gentle
enough that contact normals stay vertical, which keeps the contact model a
pair of scalar force laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass
class Terrain:
    heights: np.ndarray
    cell: float
    x0: float
    friction: float = 0.7
    restitution: float = 0.0
    name: str = "flat"

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.heights.ndim != 1 or self.heights.size < 2:
            raise ConfigError("heights must be a 1-D array of 2+ samples")
        if self.cell <= 0:
            raise ConfigError("cell must be positive")
        if self.friction < 0:
            raise ConfigError("friction must be non-negative")
        if not 0.0 <= self.restitution < 1.0:
            raise ConfigError("restitution must be in [0, 1)")

    def height_at(self, x):
        """Linearly interpolated ground height (clamped beyond the grid)."""
        u = (np.asarray(x, dtype=np.float64) - self.x0) / self.cell
        u = np.clip(u, 0.0, self.heights.size - 1.000001)
        i = np.floor(u).astype(np.int64)
        frac = u - i
        return (1.0 - frac) * self.heights[i] + frac * self.heights[i + 1]


def flat(friction=0.7, extent=200.0):
    """Level ground."""
    return Terrain(heights=np.zeros(3), cell=extent, x0=-1.5 * extent,
                   friction=friction, name="flat")


def low_friction(friction=0.25, extent=200.0):
    """Level ground with a slick surface."""
    t = flat(friction=friction, extent=extent)
    t.name = "low_friction"
    return t


def heightfield(seed, amplitude=0.04, cell=0.25, extent=40.0, friction=0.7):
    """Smooth random bumps with the given peak amplitude.

    White noise is box-filtered twice and rescaled so the largest bump
    magnitude equals ``amplitude``; the profile is flattened near x = 0 so
    episodes start from a level patch.
    """
    rng = np.random.default_rng(seed)
    n = max(int(round(2.0 * extent / cell)) + 1, 8)
    h = rng.normal(size=n)
    kernel = np.ones(5) / 5.0
    for _ in range(2):
        h = np.convolve(h, kernel, mode="same")
    h -= h.mean()
    peak = np.max(np.abs(h))
    if peak > 0:
        h *= amplitude / peak
    x0 = -extent
    # level launch pad around the origin
    xs = x0 + cell * np.arange(n)
    pad = np.abs(xs) < 0.6
    ramp = np.clip((np.abs(xs) - 0.6) / 0.4, 0.0, 1.0)
    h = np.where(pad, 0.0, h * ramp)
    return Terrain(heights=h, cell=cell, x0=x0, friction=friction,
                   name=f"heightfield_a{amplitude:g}_s{seed}")
