"""Ground-truth overlap labels, precision-recall curves, registration recall and ATE."""

from __future__ import annotations

import csv
import io as _stdio
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from pcloop.errors import InsufficientAssociations, MissingLabel, NoConsensus, InsufficientCorrespondences
from pcloop.geometry import PointCloud, RigidTransform, apply, compose, format_transform, invert, kabsch_fit
from pcloop.loopclosure import NOT_SELECTED, ScoredPair
from pcloop.matching import mutual_nn
from pcloop.records import DescriptorSet, Trajectory
from pcloop.registration import RansacConfig, ransac_register

LOOP_OVERLAP = 0.3


def _pts(P) -> np.ndarray:
    return np.asarray(getattr(P, "points", P), dtype=np.float64)


def gt_overlap(P_query, P_candidate, T_gt: RigidTransform, dist: float = 1.0) -> float:
    """Fraction of ``P_query`` points with a point of ``T_gt(P_candidate)`` within ``dist``."""
    q = _pts(P_query)
    moved = apply(T_gt, _pts(P_candidate))
    if len(q) == 0 or len(moved) == 0:
        return 0.0
    d, _ = cKDTree(moved).query(q, k=1)
    return float(np.mean(d <= dist))


@dataclass(frozen=True)
class GtLabel:
    query_id: int
    candidate_id: int
    gt_overlap: float

    @property
    def is_loop(self) -> bool:
        return self.gt_overlap > LOOP_OVERLAP


@dataclass(frozen=True)
class PRCurve:
    points: tuple  # (threshold, precision, recall), thresholds ascending
    auc: float


def select_best(scores: Iterable[ScoredPair], score: str = "overlap") -> list[ScoredPair]:
    """One row per query: the verified candidate, else the top-scoring one."""
    by_query: dict[int, list[ScoredPair]] = defaultdict(list)
    for s in scores:
        by_query[s.query_id].append(s)
    out = []
    for q in sorted(by_query):
        rows = by_query[q]
        chosen = [r for r in rows if r.decision != NOT_SELECTED]
        if len(chosen) == 1:
            out.append(chosen[0])
        else:
            out.append(max(rows, key=lambda r: (_score(r, score), -r.candidate_id)))
    return out


def _score(row: ScoredPair, score: str) -> float:
    if score == "overlap":
        return row.overlap
    if score == "ron":
        return 0.0 if row.ron is None else row.ron
    raise ValueError(f"unknown score column {score!r}")


def pr_curve(scores: Iterable[ScoredPair], labels: Iterable[GtLabel], score: str = "overlap") -> PRCurve:
    """Sweep an acceptance threshold over the best-candidate scores.

    A pair is accepted when its score is strictly above the threshold.
    Thresholds are every distinct score plus one below all of them.
    Precision with nothing accepted is taken as 1. AUC integrates precision
    over recall with the trapezoidal rule.
    """
    table = {(l.query_id, l.candidate_id): l for l in labels}
    best = select_best(scores, score)
    if not best:
        raise ValueError("score log is empty")
    s = np.empty(len(best))
    pos = np.empty(len(best), dtype=bool)
    for k, row in enumerate(best):
        lab = table.get((row.query_id, row.candidate_id))
        if lab is None:
            raise MissingLabel(f"no ground-truth label for pair ({row.query_id}, {row.candidate_id})")
        s[k] = _score(row, score)
        pos[k] = lab.is_loop
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("no true loops among the evaluated pairs; recall is undefined")
    uniq = np.unique(s)
    thresholds = np.concatenate([[uniq[0] - 1.0], uniq])
    pts = []
    for th in thresholds:
        acc = s > th
        tp = int(np.sum(acc & pos))
        fp = int(np.sum(acc & ~pos))
        precision = tp / (tp + fp) if tp + fp else 1.0
        pts.append((float(th), precision, tp / n_pos))
    return PRCurve(tuple(pts), auc_from_points(pts))


def auc_from_points(pts: Sequence[tuple]) -> float:
    ordered = sorted(((r, p) for _, p, r in pts), key=lambda rp: (rp[0], -rp[1]))
    r = np.array([x[0] for x in ordered])
    p = np.array([x[1] for x in ordered])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def format_pr(curve: PRCurve) -> str:
    lines = ["threshold,precision,recall"]
    lines += [f"{t!r},{p!r},{r!r}" for t, p, r in curve.points]
    lines.append(f"auc={curve.auc!r}")
    return "\n".join(lines) + "\n"


def parse_labels(text: str) -> list[GtLabel]:
    out = []
    for row in csv.DictReader(_stdio.StringIO(text)):
        try:
            out.append(GtLabel(int(row["query_id"]), int(row["candidate_id"]), float(row["gt_overlap"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed label row {row}: {exc}") from exc
    return out


def format_labels(labels: Iterable[GtLabel]) -> str:
    lines = ["query_id,candidate_id,gt_overlap"]
    lines += [f"{l.query_id},{l.candidate_id},{l.gt_overlap!r}" for l in labels]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class RegistrationPair:
    points_a: PointCloud
    descriptors_a: DescriptorSet
    points_b: PointCloud
    descriptors_b: DescriptorSet
    T_gt: RigidTransform  # maps b onto a
    gt_pairs: Optional[np.ndarray] = None  # (K, 2) indices into a and b


def ground_truth_pairs(points_a, points_b, T_gt: RigidTransform, max_dist: float) -> np.ndarray:
    """Pairs ``(i, j)`` where ``a_i`` is the nearest point to ``T_gt(b_j)`` within ``max_dist``."""
    d, i = cKDTree(_pts(points_a)).query(apply(T_gt, _pts(points_b)), k=1)
    j = np.flatnonzero(d <= max_dist)
    return np.column_stack([i[j], j])


def registration_recall(
    pairs: Sequence[RegistrationPair],
    threshold: float = 0.2,
    rcfg: RansacConfig = RansacConfig(),
    gt_pair_dist: float = 0.05,
) -> float:
    """Share of pairs whose mean ground-truth correspondence error after RANSAC is below ``threshold``."""
    if not pairs:
        raise ValueError("no registration pairs given")
    ok = 0
    for pr in pairs:
        gt = pr.gt_pairs if pr.gt_pairs is not None else ground_truth_pairs(pr.points_a, pr.points_b, pr.T_gt, gt_pair_dist)
        gt = np.asarray(gt, dtype=np.intp).reshape(-1, 2)
        if len(gt) == 0:
            continue
        try:
            C = mutual_nn(pr.descriptors_a, pr.descriptors_b)
            T = ransac_register(pr.points_a, pr.points_b, C, rcfg).transform
        except (NoConsensus, InsufficientCorrespondences):
            continue
        err = np.linalg.norm(_pts(pr.points_a)[gt[:, 0]] - apply(T, _pts(pr.points_b)[gt[:, 1]]), axis=1)
        if err.mean() < threshold:
            ok += 1
    return ok / len(pairs)


def associate(est_ts: np.ndarray, gt_ts: np.ndarray, max_dt: float) -> list[tuple[int, int]]:
    """Greedy one-to-one timestamp matching, closest pairs first; returned in estimate order."""
    cands = []
    for i, t in enumerate(est_ts):
        lo = np.searchsorted(gt_ts, t - max_dt, side="left")
        hi = np.searchsorted(gt_ts, t + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(gt_ts[j] - t)
            if dt <= max_dt:
                cands.append((dt, i, j))
    cands.sort()
    used_e, used_g, out = set(), set(), []
    for _, i, j in cands:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        out.append((i, j))
    return sorted(out)


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> tuple[float, RigidTransform]:
    """Translational RMSE of ``G_t^-1 S C_t`` with ``S`` the least-squares alignment of estimate onto ground truth."""
    matches = associate(est.timestamps, gt.timestamps, max_dt)
    if len(matches) < 3:
        raise InsufficientAssociations(f"{len(matches)} timestamp associations, need at least 3")
    C = [est.poses[i] for i, _ in matches]
    G = [gt.poses[j] for _, j in matches]
    S = kabsch_fit(np.stack([c.translation for c in C]), np.stack([g.translation for g in G]), check=False)
    err = np.array([compose(invert(g), compose(S, c)).translation for c, g in zip(C, G)])
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1)))), S


def format_ate(rmse: float, S: RigidTransform) -> str:
    return f"rmse_m={rmse!r}\n{format_transform(S)}\n"
