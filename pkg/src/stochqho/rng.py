"""Counter-based Gaussian noise streams.

Each stream is a Philox generator keyed by (seed, stream id), so any block of
trajectories can be regenerated on any worker without coordination.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class NoiseStream:
    """Independent N(0, dt) increments for one (seed, stream id) pair."""

    def __init__(self, seed: int, stream_id: int, dt: float = 1.0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.dt = float(dt)
        key = [self.seed & _MASK64, self.stream_id & _MASK64]
        self._gen = np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))

    def normals(self, shape):
        return self._gen.standard_normal(shape)

    def increments(self, shape):
        """Brownian increments with variance ``dt``."""
        return self._gen.standard_normal(shape) * np.sqrt(self.dt)
