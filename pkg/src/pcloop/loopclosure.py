"""Loop detection by mutual-NN overlap and verification by RON.

For a query keyframe ``t`` and an earlier keyframe ``t'``:

* ``o`` is the fraction of the smaller descriptor set that is matched by
  mutual nearest neighbours;
* if ``o > tau_o`` the pair is registered with RANSAC, giving ``T`` with
  ``P_t ~ T(P_t')``;
* RON is the fraction of mutual-NN pairs closer than ``tau_e`` after
  applying ``T``; the loop is accepted when ``RON > tau_rho``.
"""

from __future__ import annotations

import csv
import io as _stdio
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from pcloop.descriptors import SamplingConfig, describe_keyframe
from pcloop.errors import EmptyCorrespondences, InsufficientCorrespondences, NoConsensus
from pcloop.geometry import PointCloud, RigidTransform, apply, format_transform
from pcloop.matching import CorrespondenceSet, mnn_overlap, mutual_nn
from pcloop.records import DescriptorSet, KeyframeRecord
from pcloop.registration import RansacConfig, ransac_register

ACCEPTED = "accepted"
REJECTED_OVERLAP = "rejected_overlap"
REJECTED_REGISTRATION = "rejected_registration"
REJECTED_RON = "rejected_ron"
NOT_SELECTED = "not_selected"

SETTING1 = "setting1"
SETTING2 = "setting2"


@dataclass(frozen=True)
class PositionalPrior:
    """Candidates must lie within ``multiplier * sigma`` of the query's prior position.

    ``sigma`` is either a constant (m) or a per-keyframe series indexed by keyframe id.
    """

    sigma: Union[float, Sequence[float]] = 1.0
    multiplier: float = 3.0

    def radius(self, kid: int) -> float:
        if np.ndim(self.sigma) == 0:
            return self.multiplier * float(self.sigma)
        series = self.sigma
        return self.multiplier * float(series[min(kid, len(series) - 1)])


@dataclass(frozen=True)
class LoopConfig:
    tau_o: float = 0.13
    tau_e: float = 0.10
    tau_rho: float = 0.2
    exclusion_window: int = 100
    positional_prior: Optional[PositionalPrior] = None
    rank_by: str = "overlap"

    def __post_init__(self):
        for name in ("tau_o", "tau_rho"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.tau_e > 0:
            raise ValueError("tau_e must be positive")
        if self.exclusion_window < 0:
            raise ValueError("exclusion_window must be >= 0")
        if self.rank_by not in ("overlap", "ron"):
            raise ValueError("rank_by must be 'overlap' or 'ron'")


@dataclass(eq=False)
class DescribedKeyframe:
    """A keyframe's subsampled points with their descriptors."""

    id: int
    timestamp: float
    points: PointCloud
    descriptors: DescriptorSet
    pose_prior: Optional[RigidTransform] = None

    def __post_init__(self):
        if len(self.points) != len(self.descriptors):
            raise ValueError("points and descriptors must be index-aligned")


@dataclass(frozen=True, eq=False)
class LoopVerdict:
    query_id: int
    candidate_id: int
    overlap: float
    decision: str
    transform: Optional[RigidTransform] = None
    ron: Optional[float] = None

    @property
    def accepted(self) -> bool:
        return self.decision == ACCEPTED


@dataclass(frozen=True)
class ScoredPair:
    query_id: int
    candidate_id: int
    overlap: float
    ron: Optional[float]
    decision: str


def ron(P_query, P_candidate, C: CorrespondenceSet, T: RigidTransform, tau_e: float) -> float:
    """Fraction of correspondences with ``||p_q - T(p_c)|| < tau_e``."""
    if len(C) == 0:
        raise EmptyCorrespondences("RON is undefined without correspondences")
    pq = np.asarray(getattr(P_query, "points", P_query))[C.query_indices]
    pc = np.asarray(getattr(P_candidate, "points", P_candidate))[C.candidate_indices]
    d = np.linalg.norm(pq - apply(T, pc), axis=1)
    return int((d < tau_e).sum()) / len(C)


def verify_pair(
    query: DescribedKeyframe,
    cand: DescribedKeyframe,
    cfg: LoopConfig = LoopConfig(),
    rcfg: RansacConfig = RansacConfig(),
    C: Optional[CorrespondenceSet] = None,
) -> LoopVerdict:
    if C is None:
        C = mutual_nn(query.descriptors, cand.descriptors)
    o = mnn_overlap(C)
    if not o > cfg.tau_o:
        return LoopVerdict(query.id, cand.id, o, REJECTED_OVERLAP)
    try:
        reg = ransac_register(query.points, cand.points, C, rcfg)
    except (NoConsensus, InsufficientCorrespondences):
        return LoopVerdict(query.id, cand.id, o, REJECTED_REGISTRATION)
    r = ron(query.points, cand.points, C, reg.transform, cfg.tau_e)
    decision = ACCEPTED if r > cfg.tau_rho else REJECTED_RON
    return LoopVerdict(query.id, cand.id, o, decision, reg.transform, r)


def candidate_ids(db: Sequence[DescribedKeyframe], query: DescribedKeyframe, cfg: LoopConfig, mode: str) -> list[int]:
    """Positions in ``db`` eligible as loop candidates for ``query``."""
    if mode == SETTING2:
        return [k for k, kf in enumerate(db) if kf.id < query.id]
    if mode != SETTING1:
        raise ValueError(f"unknown query mode {mode!r}")
    out = []
    prior = cfg.positional_prior
    for k, kf in enumerate(db):
        if kf.id > query.id - cfg.exclusion_window or kf.id >= query.id:
            continue
        if prior is not None and query.pose_prior is not None and kf.pose_prior is not None:
            gap = np.linalg.norm(query.pose_prior.translation - kf.pose_prior.translation)
            if gap > prior.radius(query.id):
                continue
        out.append(k)
    return out


def query_loops(
    db: Sequence[DescribedKeyframe],
    query: DescribedKeyframe,
    cfg: LoopConfig = LoopConfig(),
    mode: str = SETTING1,
    rcfg: RansacConfig = RansacConfig(),
) -> tuple[Optional[LoopVerdict], list[ScoredPair]]:
    """Score every eligible candidate by ``o`` and fully verify the best one.

    With ``cfg.rank_by == "ron"`` every candidate above ``tau_o`` is verified
    and the highest RON wins instead.
    """
    picks = candidate_ids(db, query, cfg, mode)
    if not picks:
        return None, []
    corr = [mutual_nn(query.descriptors, db[k].descriptors) for k in picks]
    overlaps = np.array([mnn_overlap(C) for C in corr])

    verdicts: dict[int, LoopVerdict] = {}
    if cfg.rank_by == "ron" and np.any(overlaps > cfg.tau_o):
        for pos in np.flatnonzero(overlaps > cfg.tau_o).tolist():
            verdicts[pos] = verify_pair(query, db[picks[pos]], cfg, rcfg, corr[pos])
        best = max(verdicts, key=lambda p: (verdicts[p].ron if verdicts[p].ron is not None else -1.0, overlaps[p], -p))
    else:
        best = int(np.argmax(overlaps))
        verdicts[best] = verify_pair(query, db[picks[best]], cfg, rcfg, corr[best])

    scored = []
    for pos, k in enumerate(picks):
        v = verdicts.get(pos)
        if pos == best:
            scored.append(ScoredPair(query.id, db[k].id, float(overlaps[pos]), v.ron, v.decision))
        else:
            scored.append(ScoredPair(query.id, db[k].id, float(overlaps[pos]), v.ron if v else None, NOT_SELECTED))
    return verdicts[best], scored


@dataclass
class SequenceResult:
    verdicts: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    n_queries: int = 0

    @property
    def accepted(self) -> list:
        return [v for v in self.verdicts if v.accepted]


def keyframe_seed(seed: int, kid: int) -> int:
    """Per-keyframe subsampling seed derived from the run seed."""
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, kid]).generate_state(1, np.uint64)[0])


def fpfh_describer(scfg: SamplingConfig) -> Callable[[KeyframeRecord], DescribedKeyframe]:
    def describe(rec: KeyframeRecord) -> DescribedKeyframe:
        pts, D = describe_keyframe(rec, scfg.with_seed(keyframe_seed(scfg.seed, rec.id)), "fpfh")
        return DescribedKeyframe(rec.id, rec.timestamp, pts, D, rec.pose_prior)

    return describe


def run_sequence(
    keyframes: Iterable[Union[KeyframeRecord, DescribedKeyframe]],
    cfg: LoopConfig = LoopConfig(),
    rcfg: RansacConfig = RansacConfig(),
    mode: str = SETTING1,
    stride: int = 1,
    describe: Optional[Callable[[KeyframeRecord], DescribedKeyframe]] = None,
) -> SequenceResult:
    """Replay a keyframe stream, querying each keyframe against the ones before it.

    ``stride`` keeps every ``stride``-th keyframe of the stream (by position);
    dropped keyframes neither query nor enter the database.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    describe = describe or fpfh_describer(SamplingConfig())
    db: list[DescribedKeyframe] = []
    result = SequenceResult()
    last_id = None
    for pos, kf in enumerate(keyframes):
        if last_id is not None and kf.id <= last_id:
            raise ValueError(f"keyframe ids must increase: {kf.id} after {last_id}")
        last_id = kf.id
        if pos % stride:
            continue
        dk = kf if isinstance(kf, DescribedKeyframe) else describe(kf)
        best, scored = query_loops(db, dk, cfg, mode, rcfg)
        result.n_queries += 1
        if best is not None:
            result.verdicts.append(best)
        result.scores.extend(scored)
        db.append(dk)
    return result


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def format_score_log(scores: Iterable[ScoredPair]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "candidate_id", "overlap", "ron", "decision"])
    for s in scores:
        w.writerow([s.query_id, s.candidate_id, _fmt(s.overlap), _fmt(s.ron), s.decision])
    return buf.getvalue()


def parse_score_log(text: str) -> list[ScoredPair]:
    rows = list(csv.DictReader(_stdio.StringIO(text)))
    out = []
    for r in rows:
        try:
            out.append(
                ScoredPair(
                    int(r["query_id"]),
                    int(r["candidate_id"]),
                    float(r["overlap"]),
                    float(r["ron"]) if r["ron"] not in ("", None) else None,
                    r["decision"],
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed score log row {r}: {exc}") from exc
    return out


def format_loops(verdicts: Iterable[LoopVerdict]) -> str:
    """``query_id,candidate_id`` followed by the 16 row-major transform entries, accepted loops only."""
    lines = ["query_id,candidate_id," + ",".join(f"t{r}{c}" for r in range(4) for c in range(4))]
    for v in verdicts:
        if v.accepted:
            lines.append(f"{v.query_id},{v.candidate_id}," + format_transform(v.transform).replace(" ", ","))
    return "\n".join(lines) + "\n"
