"""RANSAC rigid registration from descriptor correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcloop.errors import DegenerateInput, InsufficientCorrespondences, NoConsensus
from pcloop.geometry import RigidTransform, apply, kabsch_batch, kabsch_fit
from pcloop.matching import CorrespondenceSet

# triangles smaller than this (m^2) are rejected as minimal samples
MIN_SAMPLE_AREA = 1e-6
# float64 residual entries evaluated per batch
_BATCH_ENTRIES = 1_500_000

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 500_000
    confirmation_iterations: int = 1_000
    inlier_threshold: float = 0.03
    sample_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.confirmation_iterations < 0:
            raise ValueError("confirmation_iterations must be >= 0")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3")


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    inlier_pairs: CorrespondenceSet
    inlier_rmse: float
    iterations_used: int
    hypothesis_rmse: float


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def sample_indices(seed: int, iterations: np.ndarray, n: int, k: int) -> np.ndarray:
    """Draw ``k`` distinct indices in ``[0, n)`` for each iteration number.

    Every iteration has its own counter-based stream keyed by ``(seed, iteration)``,
    so any batch split of the iteration range yields the same samples.
    """
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    base = _splitmix64(key ^ _splitmix64(iterations.astype(np.uint64)))
    out = np.empty((iterations.shape[0], k), dtype=np.int64)
    for m in range(k):
        u = _splitmix64(base + np.uint64(m))
        v = (u % np.uint64(n - m)).astype(np.int64)
        # shift past already-drawn indices in increasing order
        if m:
            taken = np.sort(out[:, :m], axis=1)
            for c in range(m):
                v += v >= taken[:, c]
        out[:, m] = v
    return out


def count_inliers(P_query, P_candidate, C: CorrespondenceSet, T: RigidTransform, threshold: float) -> tuple[int, float]:
    """Pairs with ``||p_q - T(p_c)|| <= threshold`` and their RMSE (0 when none)."""
    pq = np.asarray(getattr(P_query, "points", P_query))[C.query_indices]
    pc = np.asarray(getattr(P_candidate, "points", P_candidate))[C.candidate_indices]
    r = np.linalg.norm(pq - apply(T, pc), axis=1)
    mask = r <= threshold
    cnt = int(mask.sum())
    return cnt, float(np.sqrt(np.mean(r[mask] ** 2))) if cnt else 0.0


def _score_batch(src, dst, samples, thr):
    """Score minimal-sample hypotheses; returns (count, rmse, mean_err, R, t)."""
    a = dst[samples]
    b = src[samples]
    area_a = 0.5 * np.linalg.norm(np.cross(a[:, 1] - a[:, 0], a[:, 2] - a[:, 0]), axis=1)
    area_b = 0.5 * np.linalg.norm(np.cross(b[:, 1] - b[:, 0], b[:, 2] - b[:, 0]), axis=1)
    ok = (area_a >= MIN_SAMPLE_AREA) & (area_b >= MIN_SAMPLE_AREA)
    R, t = kabsch_batch(b, a)
    resid = dst[None, :, :] - (np.einsum("bij,nj->bni", R, src) + t[:, None, :])
    r2 = np.einsum("bni,bni->bn", resid, resid)
    inl = r2 <= thr * thr
    cnt = np.where(ok, inl.sum(axis=1), 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = np.sqrt(np.where(inl, r2, 0.0).sum(axis=1) / cnt)
        mean_err = np.where(inl, np.sqrt(r2), 0.0).sum(axis=1) / cnt
    rmse = np.where(cnt > 0, rmse, np.inf)
    mean_err = np.where(cnt > 0, mean_err, np.inf)
    return cnt, rmse, mean_err, R, t, inl


def ransac_register(P_query, P_candidate, C: CorrespondenceSet, cfg: RansacConfig = RansacConfig()) -> RegistrationResult:
    """Estimate ``T`` with ``P_query ~ T(P_candidate)`` from correspondences ``C``.

    The best hypothesis maximises the inlier count (ties: lower inlier RMSE).
    The search stops once that hypothesis has stood unbeaten for
    ``confirmation_iterations`` iterations with mean inlier error within the
    threshold, or after ``max_iterations``. The final transform is a
    least-squares refit on the best hypothesis' inliers.
    """
    n = len(C)
    if n < cfg.sample_size:
        raise InsufficientCorrespondences(f"{n} correspondences, need at least {cfg.sample_size}")
    dst = np.asarray(getattr(P_query, "points", P_query), dtype=np.float64)[C.query_indices]
    src = np.asarray(getattr(P_candidate, "points", P_candidate), dtype=np.float64)[C.candidate_indices]
    thr = cfg.inlier_threshold
    k_samp = cfg.sample_size

    best_k = -1
    best_cnt, best_rmse, best_mean = -1, np.inf, np.inf
    best_R = best_t = None
    best_mask = None
    stop_at = None
    batch = max(16, min(4096, _BATCH_ENTRIES // (3 * n)))
    k0 = 0
    while k0 < cfg.max_iterations and stop_at is None:
        k1 = min(cfg.max_iterations, k0 + batch)
        its = np.arange(k0, k1)
        samples = sample_indices(cfg.seed, its, n, k_samp)
        cnt, rmse, mean_err, R, t, inl = _score_batch(src, dst, samples, thr)
        cand = np.flatnonzero(cnt >= max(best_cnt, 0))
        for b in cand.tolist():
            k = k0 + b
            if best_k >= 0 and best_cnt >= k_samp and best_mean <= thr and k > best_k + cfg.confirmation_iterations:
                stop_at = best_k + cfg.confirmation_iterations
                break
            c = int(cnt[b])
            if best_k < 0 or c > best_cnt or (c == best_cnt and rmse[b] < best_rmse):
                best_k, best_cnt, best_rmse, best_mean = k, c, float(rmse[b]), float(mean_err[b])
                best_R, best_t, best_mask = R[b].copy(), t[b].copy(), inl[b].copy()
        if stop_at is None and best_cnt >= k_samp and best_mean <= thr and k1 - 1 >= best_k + cfg.confirmation_iterations:
            stop_at = best_k + cfg.confirmation_iterations
        k0 = k1

    used = cfg.max_iterations if stop_at is None else stop_at + 1
    if best_cnt < k_samp:
        raise NoConsensus(f"best hypothesis has {max(best_cnt, 0)} inliers (< {k_samp})")

    hyp_rmse = best_rmse
    try:
        T = kabsch_fit(src[best_mask], dst[best_mask])
    except DegenerateInput:
        T = RigidTransform(best_R, best_t)
    r = np.linalg.norm(dst[best_mask] - apply(T, src[best_mask]), axis=1)
    refit_rmse = float(np.sqrt(np.mean(r**2)))
    if refit_rmse > hyp_rmse:
        # least squares cannot do worse on its own fit set; guard against rounding
        T = RigidTransform(best_R, best_t)
        refit_rmse = hyp_rmse
    return RegistrationResult(T, C.subset(best_mask), refit_rmse, used, hyp_rmse)
