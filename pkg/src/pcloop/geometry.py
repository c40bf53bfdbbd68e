"""Point clouds and exact rigid-body math.

Transforms are stored as a rotation matrix plus a translation vector; the
4x4 homogeneous form only exists at I/O boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from pcloop.errors import DegenerateInput, InvariantViolation

ORTHO_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points in meters with optional per-point intensity."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = _as_points(self.points) if np.size(self.points) else np.zeros((0, 3))
        if not np.all(np.isfinite(pts)):
            raise InvariantViolation("point coordinates must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1).copy()
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length must match the number of points")
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if not np.array_equal(self.points, other.points):
            return False
        if (self.intensity is None) != (other.intensity is None):
            return False
        return self.intensity is None or np.array_equal(self.intensity, other.intensity)

    def select(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.intp)
        inten = None if self.intensity is None else self.intensity[idx]
        return PointCloud(self.points[idx], inten)

    def transformed(self, T: "RigidTransform") -> "PointCloud":
        return PointCloud(apply(T, self.points), self.intensity)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvariantViolation("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise InvariantViolation("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvariantViolation("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape == (16,):
            M = M.reshape(4, 4)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {M.shape}")
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], rtol=0.0, atol=ORTHO_TOL):
            raise InvariantViolation("last row of a homogeneous transform must be [0 0 0 1]")
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def to_row(self) -> list[float]:
        """The 16 entries of the homogeneous matrix in row-major order."""
        return [float(v) for v in self.as_matrix().reshape(16)]

    def to_bytes(self) -> bytes:
        return struct.pack("<16d", *self.to_row())

    @classmethod
    def from_bytes(cls, data: bytes) -> "RigidTransform":
        if len(data) != 128:
            raise ValueError("a binary transform is exactly 16 little-endian doubles")
        return cls.from_matrix(struct.unpack("<16d", data))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def format_transform(T: RigidTransform) -> str:
    return " ".join(repr(v) for v in T.to_row())


def parse_transform(text: str) -> RigidTransform:
    values = [float(v) for v in text.replace(",", " ").split()]
    if len(values) != 16:
        raise ValueError(f"expected 16 floats, got {len(values)}")
    return RigidTransform.from_matrix(values)


def apply(T: RigidTransform, p) -> np.ndarray:
    """Apply ``T`` to a single point ``(3,)`` or to an ``(N, 3)`` array."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        return T.rotation @ arr + T.translation
    return arr @ T.rotation.T + T.translation


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """``compose(A, B)`` applies ``B`` first, then ``A``."""
    return RigidTransform(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def transform_error(A: RigidTransform, B: RigidTransform) -> tuple[float, float]:
    """(rotation angle in radians, translation distance in meters) between two transforms."""
    return rotation_angle(A.rotation.T @ B.rotation), float(np.linalg.norm(A.translation - B.translation))


def _scatter_rank_ok(centered: np.ndarray) -> bool:
    s = np.linalg.svd(centered, compute_uv=False)
    scale = max(s[0], 1.0)
    return s[1] > 1e-10 * scale


def kabsch_fit(src, dst, check: bool = True) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Minimizes ``sum ||dst_i - T(src_i)||^2``. A reflection returned by the
    SVD is turned into a proper rotation by flipping the last singular
    direction.

    With ``check=False`` collinear input is accepted; the rotation about
    the common line is then arbitrary but the residual is still minimal.

    Raises:
        DegenerateInput: fewer than 3 pairs, or (when checking) either set
            is collinear or coincident.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same number of points")
    if src.shape[0] < 3:
        raise DegenerateInput("kabsch_fit needs at least 3 point pairs")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    if check and not (_scatter_rank_ok(a) and _scatter_rank_ok(b)):
        raise DegenerateInput("point set is collinear or coincident")
    H = a.T @ b
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) >= 0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def kabsch_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised Kabsch over a batch ``(B, k, 3)``; returns ``(R (B,3,3), t (B,3))``.

    No degeneracy checks; callers filter degenerate samples beforehand.
    """
    cs = src.mean(axis=1)
    cd = dst.mean(axis=1)
    H = np.einsum("bki,bkj->bij", src - cs[:, None, :], dst - cd[:, None, :])
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.where(np.linalg.det(V @ Ut) >= 0, 1.0, -1.0)
    V = V.copy()
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = cd - np.einsum("bij,bj->bi", R, cs)
    return R, t
