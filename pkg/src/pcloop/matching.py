"""Exact nearest-neighbour search in descriptor space and mutual-NN matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcloop.errors import DimensionMismatch
from pcloop.records import DescriptorSet

# budget of float64 entries per distance block (~32 MB)
_BLOCK_ENTRIES = 4_000_000


def _vectors(D) -> np.ndarray:
    if isinstance(D, DescriptorSet):
        return D.vectors
    v = np.asarray(D, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("descriptor array must be 2-D")
    return v


class NNIndex:
    """Exact L2 nearest-neighbour index; ties go to the smallest index.

    Squared distances are computed blockwise through a matrix product. Any
    row whose runner-up lies within the rounding band of that product is
    re-resolved with directly computed differences, so the result equals a
    linear scan.
    """

    def __init__(self, D):
        v = _vectors(D)
        if v.shape[0] == 0:
            raise ValueError("cannot index an empty descriptor set")
        self.vectors = np.ascontiguousarray(v)
        self.vectors.setflags(write=False)
        self._sqnorms = np.einsum("ij,ij->i", self.vectors, self.vectors)
        self._max_sqnorm = float(self._sqnorms.max())

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def query(self, Q) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of the nearest indexed vector for each row of ``Q``."""
        q = Q.vectors if isinstance(Q, DescriptorSet) else np.atleast_2d(np.asarray(Q, dtype=np.float64))
        if q.ndim != 2:
            raise ValueError("queries must be a vector or a 2-D array")
        if q.shape[1] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[1]} != index dim {self.dim}")
        V = self.vectors
        n = V.shape[0]
        out_idx = np.empty(q.shape[0], dtype=np.intp)
        rows = max(1, _BLOCK_ENTRIES // n)
        for s in range(0, q.shape[0], rows):
            qb = q[s : s + rows]
            qn = np.einsum("ij,ij->i", qb, qb)
            d2 = qn[:, None] + self._sqnorms[None, :] - 2.0 * (qb @ V.T)
            out_idx[s : s + rows] = _resolve_rows(d2, qb, V, qn, self._max_sqnorm)
        diff = q - V[out_idx]
        return out_idx, np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _resolve_rows(d2, q, V, qn, max_sqnorm) -> np.ndarray:
    """Row-wise argmin of GEMM distances ``d2`` (q x V), exact within the rounding band."""
    best = d2.argmin(axis=1)
    m = d2[np.arange(len(q)), best]
    tol = 1e-9 * (1.0 + qn + max_sqnorm)
    near = d2 <= (m + tol)[:, None]
    ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
    if ambiguous.size:
        r, c = np.nonzero(near[ambiguous])
        diff = q[ambiguous[r]] - V[c]
        exact = np.einsum("ij,ij->i", diff, diff)
        # per row: smallest exact distance, then smallest index
        order = np.lexsort((c, exact, r))
        first = np.ones(order.size, dtype=bool)
        first[1:] = r[order][1:] != r[order][:-1]
        best[ambiguous[r[order][first]]] = c[order][first]
    return best


def build_index(D: DescriptorSet) -> NNIndex:
    return NNIndex(D)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Mutual-NN pairs ``(i, j)``: ``i`` indexes the query set, ``j`` the candidate set."""

    pairs: np.ndarray
    n_query: int
    n_candidate: int

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        p.setflags(write=False)
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def query_indices(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def candidate_indices(self) -> np.ndarray:
        return self.pairs[:, 1]

    def subset(self, mask_or_idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs[mask_or_idx], self.n_query, self.n_candidate)

    def transposed(self) -> "CorrespondenceSet":
        p = self.pairs[:, ::-1]
        order = np.lexsort((p[:, 1], p[:, 0]))
        return CorrespondenceSet(p[order], self.n_candidate, self.n_query)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs}

    def is_partial_matching(self) -> bool:
        return (
            len(np.unique(self.pairs[:, 0])) == len(self)
            and len(np.unique(self.pairs[:, 1])) == len(self)
            and len(self) <= min(self.n_query, self.n_candidate)
        )


def mutual_nn(D_query: DescriptorSet, D_candidate: DescriptorSet) -> CorrespondenceSet:
    """Pairs whose descriptors are each other's nearest neighbour, sorted by query index."""
    a = _vectors(D_query)
    b = _vectors(D_candidate)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"descriptor dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] * b.shape[0] <= _BLOCK_ENTRIES:
        # one distance matrix serves both directions
        an = np.einsum("ij,ij->i", a, a)
        bn = np.einsum("ij,ij->i", b, b)
        d2 = an[:, None] + bn[None, :] - 2.0 * (a @ b.T)
        fwd = _resolve_rows(d2, a, b, an, float(bn.max()))
        back = _resolve_rows(d2.T, b, a, bn, float(an.max()))
    else:
        fwd, _ = NNIndex(b).query(a)
        back, _ = NNIndex(a).query(b)
    i = np.flatnonzero(back[fwd] == np.arange(a.shape[0]))
    return CorrespondenceSet(np.column_stack([i, fwd[i]]), a.shape[0], b.shape[0])


def mnn_overlap(C: CorrespondenceSet) -> float:
    """Fraction of the smaller descriptor set that is mutually matched."""
    return len(C) / min(C.n_query, C.n_candidate)
