"""Value types passed between the I/O layer and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from pcloop.errors import InvariantViolation
from pcloop.geometry import PointCloud, RigidTransform

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """``N x d`` unit-norm descriptors, row ``i`` describing point ``i`` of a companion cloud."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvariantViolation(f"descriptor set must be a non-empty N x d array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvariantViolation("descriptor entries must be finite")
        norms = np.linalg.norm(v, axis=1)
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise InvariantViolation("every descriptor must have unit L2 norm")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def select(self, indices) -> "DescriptorSet":
        return DescriptorSet(self.vectors[np.asarray(indices, dtype=np.intp)])

    @classmethod
    def normalized(cls, vectors) -> "DescriptorSet":
        v = np.asarray(vectors, dtype=np.float64)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class KeyframeRecord:
    id: int
    timestamp: float
    cloud: PointCloud
    pose_prior: Optional[RigidTransform] = None


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped poses; timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if ts.shape[0] != len(poses):
            raise ValueError("timestamps and poses differ in length")
        if ts.shape[0] > 1 and not np.all(np.diff(ts) > 0):
            raise InvariantViolation("trajectory timestamps must be strictly increasing")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])
