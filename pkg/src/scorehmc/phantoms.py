"""Synthetic ellipse phantoms: unlimited i.i.d. training data at desk scale.

Each phantom is a sum of randomly placed, rotated ellipses with random
intensities, clipped to [0, 1]. Generation is deterministic under the spec
seed and parallelizes by index (phantom ``i`` uses stream ``i``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream

__all__ = ["PhantomSpec", "make_phantoms"]


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    min_ellipses: int = 3
    max_ellipses: int = 7
    min_intensity: float = 0.2
    max_intensity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.size < 2 or (self.size & (self.size - 1)) != 0:
            raise ValueError(f"size must be a power of two >= 2, got {self.size}")
        if not (0 <= self.min_ellipses <= self.max_ellipses):
            raise ValueError("need 0 <= min_ellipses <= max_ellipses")
        if not (0.0 <= self.min_intensity <= self.max_intensity):
            raise ValueError("need 0 <= min_intensity <= max_intensity")


def _one_phantom(spec: PhantomSpec, rng: RngStream, grid) -> np.ndarray:
    xx, yy = grid
    k = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1)) \
        if spec.max_ellipses > spec.min_ellipses else spec.min_ellipses
    img = np.zeros((spec.size, spec.size))
    for _ in range(k):
        cx, cy = rng.uniform(2) * 1.4 - 0.7
        a, b = rng.uniform(2) * 0.4 + 0.15
        theta = rng.uniform() * np.pi
        amp = spec.min_intensity + rng.uniform() * (spec.max_intensity - spec.min_intensity)
        ct, st = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * ct + (yy - cy) * st) / a
        v = ((yy - cy) * ct - (xx - cx) * st) / b
        img += amp * (u * u + v * v <= 1.0)
    return np.clip(img, 0.0, 1.0)


def make_phantoms(spec: PhantomSpec, count: int) -> np.ndarray:
    """Batch of ``count`` phantoms, shape ``(count, size, size)``, values in [0, 1]."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    coords = (np.arange(spec.size) + 0.5) / spec.size * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords)
    out = np.empty((count, spec.size, spec.size))
    for i in range(count):
        out[i] = _one_phantom(spec, RngStream(spec.seed, stream_id=i), (xx, yy))
    return out
