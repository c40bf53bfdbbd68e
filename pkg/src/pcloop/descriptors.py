"""Keyframe subsampling and local descriptors.

Descriptors come either from the built-in FPFH implementation or from an
L3DD file produced by an external network. Both paths yield unit-norm
``DescriptorSet`` objects index-aligned with the subsampled points.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from pcloop import io as pio
from pcloop.errors import EmptyPatch
from pcloop.geometry import PointCloud
from pcloop.records import DescriptorSet, KeyframeRecord

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS
MIN_PATCH_POINTS = 16

# patch radius (m) and normal neighbourhood size per dataset profile
PROFILES = {
    "lidar": {"patch_radius": 2.5, "normal_k": 16},
    "indoor": {"patch_radius": 0.2, "normal_k": 16},
}


@dataclass(frozen=True)
class SamplingConfig:
    fraction: float = 0.4
    seed: int = 0
    patch_radius: float = 0.2
    normal_k: int = 16
    min_patch_points: int = MIN_PATCH_POINTS

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("sampling fraction must lie in (0, 1]")
        if not self.patch_radius > 0:
            raise ValueError("patch_radius must be positive")
        if self.normal_k < 3:
            raise ValueError("normal_k must be >= 3")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "SamplingConfig":
        try:
            base = PROFILES[profile]
        except KeyError:
            raise ValueError(f"unknown dataset profile {profile!r}; choose from {sorted(PROFILES)}") from None
        return cls(**{**base, **overrides})

    def with_seed(self, seed: int) -> "SamplingConfig":
        return replace(self, seed=seed)


def subsample(cloud: PointCloud, cfg: SamplingConfig) -> tuple[np.ndarray, PointCloud]:
    """Draw ``max(1, round(fraction * N))`` distinct points uniformly, seeded."""
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot subsample an empty cloud")
    m = max(1, int(round(cfg.fraction * n)))
    rng = np.random.default_rng(cfg.seed)
    idx = rng.choice(n, size=m, replace=False)
    return idx, cloud.select(idx)


def extract_patch(cloud: PointCloud, center, radius: float, min_points: int = MIN_PATCH_POINTS) -> PointCloud:
    """Points within ``radius`` of ``center`` (inclusive)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    d = np.linalg.norm(cloud.points - c, axis=1)
    idx = np.flatnonzero(d <= radius)
    if idx.size < min_points:
        raise EmptyPatch(f"patch holds {idx.size} points, need {min_points}")
    return cloud.select(idx)


def estimate_normals(cloud: PointCloud, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from the k-NN covariance, oriented away from the cloud centroid.

    Returns ``(normals, valid)``. Points whose neighbourhood covariance has
    rank < 2 get ``valid = False`` and a zero normal.
    """
    pts = cloud.points
    if k < 3 or len(pts) <= k:
        raise ValueError(f"need |cloud| > k >= 3, got |cloud|={len(pts)}, k={k}")
    _, nbr = cKDTree(pts).query(pts, k=k)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-300)
    valid = (w[:, 2] > 0) & (w[:, 1] > 1e-10 * scale)
    outward = np.einsum("ij,ij->i", normals, pts - pts.mean(axis=0))
    normals[outward < 0] *= -1.0
    normals[~valid] = 0.0
    return normals, valid


def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angle triple per pair, following the Open3D convention."""
    dp = p2 - p1
    f4 = np.linalg.norm(dp, axis=1)
    safe = np.where(f4 > 0, f4, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / safe
    a2 = np.einsum("ij,ij->i", n2, dp) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    other = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f2 = np.where(swap, -a2, a1)
    v = np.cross(dp, u)
    vn = np.linalg.norm(v, axis=1)
    ok = (f4 > 0) & (vn > 0)
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    f1 = np.einsum("ij,ij->i", v, other)
    f0 = np.arctan2(np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other))
    f0 = np.where(ok, f0, 0.0)
    f1 = np.where(ok, f1, 0.0)
    f2 = np.where(ok, f2, 0.0)
    return f0, f1, f2


def _bin(values, lo, hi):
    idx = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(idx, 0, FPFH_BINS - 1)


def compute_fpfh(
    cloud: PointCloud,
    indices,
    radius: float,
    normal_k: int = 16,
    min_patch_points: int = MIN_PATCH_POINTS,
    normals: Optional[np.ndarray] = None,
    valid: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, DescriptorSet]:
    """33-bin FPFH descriptors at ``indices``, L2-normalised.

    Centres with an invalid normal, or with fewer than ``min_patch_points``
    valid points inside ``radius`` (centre included), are dropped. Returns
    the surviving indices together with their descriptors, row-aligned.
    """
    pts = cloud.points
    idx = np.asarray(indices, dtype=np.int64)
    if normals is None:
        normals, valid = estimate_normals(cloud, normal_k)
    elif valid is None:
        valid = np.linalg.norm(normals, axis=1) > 0
    good = np.flatnonzero(valid)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[good] = np.arange(good.size)
    gp, gn = pts[good], normals[good]
    n = good.size

    # every ordered neighbour pair (a, b), a != b, within the radius
    tree = cKDTree(gp)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    a = np.concatenate([pairs[:, 0], pairs[:, 1]])
    b = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((b, a))
    a, b = a[order], b[order]
    n_nbrs = np.bincount(a, minlength=n)

    centres = remap[idx[valid[idx]]]
    centres = centres[n_nbrs[centres] + 1 >= min_patch_points]
    if centres.size == 0:
        raise EmptyPatch("no selected point has a describable neighbourhood")

    # simplified point feature histogram of every point
    f0, f1, f2 = _pair_features(gp[a], gn[a], gp[b], gn[b])
    weight = 100.0 / np.maximum(n_nbrs[a], 1)
    spfh = np.zeros(n * FPFH_DIM)
    for block, (f, lo, hi) in enumerate(((f0, -np.pi, np.pi), (f1, -1.0, 1.0), (f2, -1.0, 1.0))):
        spfh += np.bincount(a * FPFH_DIM + block * FPFH_BINS + _bin(f, lo, hi), weights=weight, minlength=n * FPFH_DIM)
    spfh = spfh.reshape(n, FPFH_DIM)

    # neighbour-weighted re-aggregation with 1/d^2 weights, each block rescaled to 100
    d2 = np.einsum("ij,ij->i", gp[a] - gp[b], gp[a] - gp[b])
    keep = d2 > 0
    W = sparse.csr_matrix((1.0 / d2[keep], (a[keep], b[keep])), shape=(n, n))
    agg = np.asarray(W[centres] @ spfh)
    sums = agg.reshape(len(centres), 3, FPFH_BINS).sum(axis=2)
    scale = np.where(sums != 0, 100.0 / np.where(sums != 0, sums, 1.0), 0.0)
    feat = agg * np.repeat(scale, FPFH_BINS, axis=1) + spfh[centres]
    norms = np.linalg.norm(feat, axis=1)
    ok = norms > 0
    return good[centres][ok], DescriptorSet(feat[ok] / norms[ok, None])


Backend = Union[str, tuple]


def describe_keyframe(
    rec: KeyframeRecord, cfg: SamplingConfig, backend: Backend = "fpfh"
) -> tuple[PointCloud, DescriptorSet]:
    """Subsampled points and their descriptors for one keyframe.

    ``backend`` is ``"fpfh"`` or ``("external", path)``; an external L3DD
    file supplies both the points and the descriptors as stored.
    """
    if isinstance(backend, tuple):
        kind, path = backend
        if kind != "external":
            raise ValueError(f"unknown descriptor backend {kind!r}")
        return pio.read_descriptors(Path(path))
    if backend != "fpfh":
        raise ValueError(f"unknown descriptor backend {backend!r}")
    idx, _ = subsample(rec.cloud, cfg)
    kept, D = compute_fpfh(rec.cloud, idx, cfg.patch_radius, cfg.normal_k, cfg.min_patch_points)
    return rec.cloud.select(kept), D
