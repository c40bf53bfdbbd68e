"""Seeded synthetic scenes, loop pairs and trajectories, plus brute-force oracles.

Scenes are built from analytic primitives (a floor plane, extra planes,
spheres and open-bottom boxes) sampled on a jittered grid, so point
density is even and every surface has a closed-form normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from pcloop.evaluation import GtLabel, gt_overlap
from pcloop.geometry import PointCloud, RigidTransform, apply, compose, invert
from pcloop.matching import CorrespondenceSet
from pcloop.records import DescriptorSet, KeyframeRecord, Trajectory


# ground-truth overlap distance for desk-scale scenes (m)
INDOOR_GT_DISTANCE = 0.05


@dataclass(frozen=True)
class SceneSpec:
    n_planes: int = 1
    plane_size: float = 2.0
    n_spheres: int = 2
    sphere_radius: tuple = (0.15, 0.35)
    n_boxes: int = 3
    box_size: tuple = (0.2, 0.6)
    density: float = 300.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class Plane:
    center: np.ndarray
    rotation: np.ndarray
    size: tuple


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    yaw: float
    size: np.ndarray


def scene_primitives(spec: SceneSpec) -> list:
    """Analytic primitive layout for ``spec`` (deterministic per seed).

    The first plane is the floor ``z = 0``; further planes are walls on the
    floor's edges. Spheres and boxes rest on the floor.
    """
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    half = spec.plane_size / 2.0
    prims: list = []
    for k in range(spec.n_planes):
        if k == 0:
            prims.append(Plane(np.zeros(3), np.eye(3), (spec.plane_size, spec.plane_size)))
        else:
            yaw = (k - 1) * np.pi / 2.0
            R = Rotation.from_euler("ZX", [yaw, np.pi / 2.0]).as_matrix()
            c = Rotation.from_euler("z", yaw).apply([0.0, half, 0.0]) + [0.0, 0.0, half / 2.0]
            prims.append(Plane(c, R, (spec.plane_size, spec.plane_size / 2.0)))
    lo, hi = spec.sphere_radius
    for _ in range(spec.n_spheres):
        r = rng.uniform(lo, hi)
        xy = rng.uniform(-half + r, half - r, size=2)
        prims.append(Sphere(np.array([xy[0], xy[1], r]), r))
    lo, hi = spec.box_size
    for _ in range(spec.n_boxes):
        size = rng.uniform(lo, hi, size=3)
        xy = rng.uniform(-half + hi / 2, half - hi / 2, size=2)
        prims.append(Box(np.array([xy[0], xy[1], size[2] / 2.0]), rng.uniform(0, np.pi), size))
    return prims


def _grid(rng, w: float, h: float, density: float) -> np.ndarray:
    """Jittered grid over ``[-w/2, w/2] x [-h/2, h/2]`` at ``density`` points per m^2."""
    step = 1.0 / np.sqrt(density)
    nx = max(1, int(round(w / step)))
    ny = max(1, int(round(h / step)))
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    u = (gx.reshape(-1) + rng.uniform(size=nx * ny)) * (w / nx) - w / 2.0
    v = (gy.reshape(-1) + rng.uniform(size=nx * ny)) * (h / ny) - h / 2.0
    return np.column_stack([u, v])


def _sample(prim, rng, density: float) -> np.ndarray:
    if isinstance(prim, Plane):
        uv = _grid(rng, prim.size[0], prim.size[1], density)
        local = np.column_stack([uv, np.zeros(len(uv))])
        return local @ prim.rotation.T + prim.center
    if isinstance(prim, Sphere):
        n = max(4, int(round(4.0 * np.pi * prim.radius**2 * density)))
        # Fibonacci lattice: even coverage, no poles clumping
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        phi = np.pi * (1.0 + 5.0**0.5) * i + rng.uniform(0, 2 * np.pi)
        r = np.sqrt(1.0 - z * z)
        dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
        return prim.center + prim.radius * dirs
    if isinstance(prim, Box):
        sx, sy, sz = prim.size
        faces = [
            (np.array([0, 0, sz / 2]), np.eye(3), sx, sy),
            (np.array([sx / 2, 0, 0]), Rotation.from_euler("y", np.pi / 2).as_matrix(), sz, sy),
            (np.array([-sx / 2, 0, 0]), Rotation.from_euler("y", -np.pi / 2).as_matrix(), sz, sy),
            (np.array([0, sy / 2, 0]), Rotation.from_euler("x", -np.pi / 2).as_matrix(), sx, sz),
            (np.array([0, -sy / 2, 0]), Rotation.from_euler("x", np.pi / 2).as_matrix(), sx, sz),
        ]
        Rb = Rotation.from_euler("z", prim.yaw).as_matrix()
        chunks = []
        for c, R, w, h in faces:
            uv = _grid(rng, w, h, density)
            local = np.column_stack([uv, np.zeros(len(uv))]) @ R.T + c
            chunks.append(local @ Rb.T + prim.center)
        return np.concatenate(chunks)
    raise TypeError(f"unknown primitive {prim!r}")


def gen_scene(spec: SceneSpec) -> PointCloud:
    rng = np.random.default_rng([spec.seed, 0x5A3B1E])
    pts = np.concatenate([_sample(p, rng, spec.density) for p in scene_primitives(spec)])
    if spec.noise > 0:
        pts = pts + rng.normal(scale=spec.noise, size=pts.shape)
    return PointCloud(pts)


def gen_room(size: float = 1.6, height: float = 1.0, density: float = 300.0, noise: float = 0.0, seed: int = 0) -> PointCloud:
    """Closed box room (floor, ceiling, four walls) with a sphere inside.

    Every surface point has a full neighbourhood, so no descriptor centre is
    lost to a boundary.
    """
    rng = np.random.default_rng([seed, 0x2003])
    h2, s2 = height / 2.0, size / 2.0
    walls = [
        Plane(np.array([0, 0, 0.0]), np.eye(3), (size, size)),
        Plane(np.array([0, 0, height]), np.eye(3), (size, size)),
    ]
    for yaw in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
        R = Rotation.from_euler("ZX", [yaw, np.pi / 2]).as_matrix()
        c = Rotation.from_euler("z", yaw).apply([0.0, s2, 0.0]) + [0.0, 0.0, h2]
        walls.append(Plane(c, R, (size, height)))
    pts = [_sample(p, rng, density) for p in walls]
    pts.append(_sample(Sphere(np.array([0.3 * size, -0.2 * size, 0.2]), 0.2), rng, density))
    pts = np.concatenate(pts)
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return PointCloud(pts)


def random_transform(rng, max_angle: float = np.pi, max_translation: float = 1.0) -> RigidTransform:
    """Uniform random axis, angle in ``[0, max_angle]``, translation in a cube of half-side ``max_translation``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    return RigidTransform(R, rng.uniform(-max_translation, max_translation, size=3))


def crop_half_space(cloud: PointCloud, fraction: float, axis: int = 0) -> np.ndarray:
    """Indices of the ``round(fraction * N)`` points lowest along ``axis`` (a half-space cut)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("crop fraction must lie in [0, 1]")
    m = int(round(fraction * len(cloud)))
    order = np.argsort(cloud.points[:, axis], kind="stable")
    return np.sort(order[:m])


def gen_loop_pair(
    cloud: PointCloud, T: RigidTransform, crop_fraction: float, sigma: float, seed: int, axis: int = 0
) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """``(P_t, P_t', T_gt)``: ``P_t'`` is a cropped copy of ``cloud`` moved by ``T`` and noised.

    ``T_gt = T^-1`` maps ``P_t'`` back onto ``P_t = cloud``.
    """
    keep = crop_half_space(cloud, crop_fraction, axis)
    moved = apply(T, cloud.points[keep])
    if sigma > 0:
        moved = moved + np.random.default_rng(seed).normal(scale=sigma, size=moved.shape)
    return cloud, PointCloud(moved), invert(T)


def brute_nn(q: np.ndarray, V: np.ndarray) -> int:
    """Linear scan over every row of ``V``; the first minimum wins ties."""
    d = np.sum((V - q) ** 2, axis=1)
    return int(np.argmin(d))


def brute_mnn(D_query, D_candidate) -> CorrespondenceSet:
    """O(N^2) double loop; reference oracle for ``matching.mutual_nn``."""
    A = D_query.vectors if isinstance(D_query, DescriptorSet) else np.asarray(D_query, float)
    B = D_candidate.vectors if isinstance(D_candidate, DescriptorSet) else np.asarray(D_candidate, float)
    fwd = [brute_nn(A[i], B) for i in range(A.shape[0])]
    back = [brute_nn(B[j], A) for j in range(B.shape[0])]
    pairs = [(i, j) for i, j in enumerate(fwd) if back[j] == i]
    return CorrespondenceSet(np.array(pairs, dtype=np.intp).reshape(-1, 2), A.shape[0], B.shape[0])


@dataclass(frozen=True)
class PlantedLoop:
    """Keyframe ``j`` revisits keyframe ``i``; ``transform`` maps frame ``i`` points into frame ``j``."""

    i: int
    j: int
    transform: RigidTransform
    overlap: float


@dataclass(frozen=True)
class LoopSpec:
    n_loops: int = 5
    crop: float = 0.6
    min_gap: int = 100
    noise: float = 0.001


@dataclass
class SyntheticSequence:
    keyframes: list
    trajectory: Trajectory
    loops: list
    scene: SceneSpec = field(default_factory=SceneSpec)


def place_spec(base: SceneSpec, k: int) -> SceneSpec:
    return SceneSpec(**{**base.__dict__, "seed": base.seed * 100_003 + k})


def gen_trajectory(
    n_frames: int,
    loop_spec: LoopSpec = LoopSpec(),
    scene: SceneSpec = SceneSpec(noise=0.001),
    spacing: float = 5.0,
    seed: int = 0,
    dt: float = 0.1,
) -> SyntheticSequence:
    """Keyframes along a winding path through a world of distinct places.

    Keyframe ``k`` observes place ``k`` from its centre. A planted loop
    ``(i, j)`` puts keyframe ``j`` back at place ``i`` with a random heading
    and offset; it sees a ``loop_spec.crop`` half-space share of what
    keyframe ``i`` saw. Clouds are expressed in each keyframe's own frame;
    the trajectory holds the world poses.
    """
    rng = np.random.default_rng([seed, 0x7A1])
    loops_ij = []
    if loop_spec.n_loops:
        span = n_frames - loop_spec.min_gap
        if span <= 0 or span < loop_spec.n_loops:
            raise ValueError("sequence too short for the requested loops")
        for k in range(loop_spec.n_loops):
            i = int((k + 0.5) * span / loop_spec.n_loops)
            slack = n_frames - 1 - i - loop_spec.min_gap
            j = i + loop_spec.min_gap + int(rng.integers(0, min(slack, 10) + 1))
            loops_ij.append((i, j))
        if len({j for _, j in loops_ij}) != len(loops_ij):
            raise ValueError("planted loops collide; use fewer loops or a longer sequence")
    revisit = {j: i for i, j in loops_ij}

    poses: list[RigidTransform] = []
    clouds: list[PointCloud] = []
    planted = []
    for k in range(n_frames):
        if k in revisit:
            i = revisit[k]
            offset = RigidTransform(
                Rotation.from_euler("z", rng.uniform(-np.pi, np.pi)).as_matrix(),
                np.append(rng.uniform(-0.3, 0.3, size=2), 0.0),
            )
            pose = compose(poses[i], offset)
            _, view, T_gt = gen_loop_pair(
                clouds[i], invert(offset), loop_spec.crop, loop_spec.noise, int(rng.integers(2**31)), axis=int(rng.integers(2))
            )
            poses.append(pose)
            clouds.append(view)
            planted.append((i, k, T_gt))
        else:
            s = k * spacing
            pos = np.array([s, 8.0 * np.sin(s / 60.0), 0.0])
            heading = np.arctan2(8.0 / 60.0 * np.cos(s / 60.0), 1.0)
            poses.append(RigidTransform(Rotation.from_euler("z", heading).as_matrix(), pos))
            clouds.append(gen_scene(place_spec(scene, k)))

    keyframes = [KeyframeRecord(k, k * dt, clouds[k], poses[k]) for k in range(n_frames)]
    traj = Trajectory(np.arange(n_frames) * dt, poses)
    loops = []
    for i, j, T_gt in planted:
        T_ji = invert(T_gt)
        loops.append(PlantedLoop(i, j, T_ji, gt_overlap(clouds[j], clouds[i], T_ji, INDOOR_GT_DISTANCE)))
    return SyntheticSequence(keyframes, traj, loops, scene)


def sequence_labels(seq: SyntheticSequence, dist: float = INDOOR_GT_DISTANCE) -> list[GtLabel]:
    """Ground-truth overlap for every ordered pair ``(query j, candidate i < j)``.

    Pairs whose world-frame bounding spheres are further apart than ``dist``
    get 0 without a neighbour search.
    """
    kfs = seq.keyframes
    poses = seq.trajectory.poses
    centres, radii = [], []
    for kf, pose in zip(kfs, poses):
        c = kf.cloud.points.mean(axis=0)
        radii.append(float(np.linalg.norm(kf.cloud.points - c, axis=1).max()))
        centres.append(apply(pose, c))
    centres = np.array(centres)
    out = []
    for j in range(len(kfs)):
        for i in range(j):
            if np.linalg.norm(centres[j] - centres[i]) > radii[i] + radii[j] + dist:
                ov = 0.0
            else:
                T = compose(invert(poses[j]), poses[i])
                ov = gt_overlap(kfs[j].cloud, kfs[i].cloud, T, dist)
            out.append(GtLabel(kfs[j].id, kfs[i].id, ov))
    return out
