"""Retrieval evaluation: distances, CMC / mAP, multi-query pooling, k-reciprocal re-ranking."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import JUNK_ID

QUERY_MODES = ("single", "multi")
POOLINGS = ("mean", "max")


@dataclass(frozen=True)
class EvalProtocol:
    exclude_same_id_same_cam: bool = True
    junk_ids: tuple[int, ...] = (JUNK_ID,)
    query_mode: str = "single"
    pooling: str = "mean"
    # False: queries without a valid match are dropped; True: they score 0
    score_unmatched_as_zero: bool = False

    def __post_init__(self):
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        object.__setattr__(self, "junk_ids", tuple(sorted(int(j) for j in self.junk_ids)))


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    n_query: int
    n_gallery: int
    excluded_queries: int = 0
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    seed: int = 0

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        return {
            "map": float(self.mAP),
            "cmc": {str(k): self.rank(k) for k in (1, 5, 10)},
            "n_query": int(self.n_query),
            "n_gallery": int(self.n_gallery),
            "excluded_queries": int(self.excluded_queries),
            "protocol": {**asdict(self.protocol), "junk_ids": list(self.protocol.junk_ids)},
            "seed": int(self.seed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def pairwise_distances(query: np.ndarray, gallery: np.ndarray, squared: bool = False) -> np.ndarray:
    """Euclidean distances between rows; exact zeros on identical rows."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature widths differ: {q.shape[1]} vs {g.shape[1]}")
    # explicit differences keep d(x, x) == 0 and symmetry exact
    diff = q[:, None, :] - g[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return d2 if squared else np.sqrt(d2)


def _as_meta(meta) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(meta, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def evaluate(dist: np.ndarray, q_meta, g_meta, protocol: EvalProtocol | None = None,
             seed: int = 0) -> EvalReport:
    """CMC and mAP under the benchmark protocol.

    ``q_meta``/``g_meta`` are ``(identity, camera)`` rows.  Per query, gallery
    entries with a junk identity, and (optionally) entries sharing both
    identity and camera with the query, are removed; the rest is ranked by
    ascending distance with ties broken by gallery index.  AP is the mean of
    precision at each true match.
    """
    protocol = protocol or EvalProtocol()
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = _as_meta(q_meta)
    g_ids, g_cams = _as_meta(g_meta)
    if dist.shape != (len(q_ids), len(g_ids)):
        raise ValueError(f"distance matrix {dist.shape} does not match metadata ({len(q_ids)}, {len(g_ids)})")
    n_q, n_g = dist.shape
    junk_g = np.isin(g_ids, protocol.junk_ids)
    cmc_sum = np.zeros(n_g)
    aps = []
    excluded = 0
    for i in range(n_q):
        order = np.argsort(dist[i], kind="stable")
        keep = ~junk_g[order]
        if protocol.exclude_same_id_same_cam:
            keep &= ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        matches = g_ids[order][keep] == q_ids[i]
        if q_ids[i] in protocol.junk_ids or not matches.any():
            excluded += 1
            if protocol.score_unmatched_as_zero:
                aps.append(0.0)
            continue
        hits = np.flatnonzero(matches)
        cmc_sum[hits[0]:] += 1
        precision = np.arange(1, len(hits) + 1) / (hits + 1)
        # correctly rounded sums make the result independent of summation order
        aps.append(math.fsum(precision.tolist()) / len(hits))
    n_scored = len(aps)
    cmc = cmc_sum / n_scored if n_scored else np.zeros(n_g)
    mAP = math.fsum(aps) / n_scored if aps else 0.0
    return EvalReport(mAP, cmc, n_q, n_g, excluded, protocol, seed)


def pool_multi_query(features: np.ndarray, q_meta, pooling: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """One row per (identity, camera) group, in order of first appearance."""
    if pooling not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}")
    features = np.asarray(features, dtype=np.float64)
    ids, cams = _as_meta(q_meta)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(ids.tolist(), cams.tolist())):
        groups.setdefault(key, []).append(i)
    reduce = np.mean if pooling == "mean" else np.max
    pooled = np.stack([reduce(features[rows], axis=0) for rows in groups.values()])
    return pooled, np.array(list(groups.keys()), dtype=np.int64).reshape(-1, 2)


def _k_reciprocal(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = rank[i, :k + 1]
    backward = rank[forward, :k + 1]
    return forward[np.any(backward == i, axis=1)]


def rerank_k_reciprocal(dist_qg: np.ndarray, dist_qq: np.ndarray, dist_gg: np.ndarray,
                        k1: int = 20, k2: int = 6, lam: float = 0.3) -> np.ndarray:
    """k-reciprocal encoding re-ranking.

    Neighbourhoods are computed on the column-normalised squared distances of
    the joint (query + gallery) set.  Each probe's k1-reciprocal set is
    expanded with the round(k1/2)-reciprocal sets of its members when they
    overlap by more than two thirds, encoded as Gaussian-weighted vectors,
    averaged over the k2 nearest neighbours (local query expansion) and
    compared with a Jaccard distance.  The output is
    ``lam * dist_qg + (1 - lam) * jaccard``.
    """
    dist_qg = np.asarray(dist_qg, dtype=np.float64)
    dist_qq = np.asarray(dist_qq, dtype=np.float64)
    dist_gg = np.asarray(dist_gg, dtype=np.float64)
    n_q, n_g = dist_qg.shape
    if dist_qq.shape != (n_q, n_q) or dist_gg.shape != (n_g, n_g):
        raise ValueError("inconsistent distance matrix shapes")
    if not 1 <= k2 < k1:
        raise ValueError("need k1 > k2 >= 1")
    if k1 >= n_g:
        raise ValueError(f"k1={k1} must be smaller than the gallery size {n_g}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")

    full = np.block([[dist_qq, dist_qg], [dist_qg.T, dist_gg]]) ** 2
    full = (full / np.max(full, axis=0)).T
    n = n_q + n_g
    rank = np.argsort(full, axis=1, kind="stable")
    half = int(np.around(k1 / 2.0))

    V = np.zeros((n, n))
    for i in range(n):
        recip = _k_reciprocal(rank, i, k1)
        expansion = recip
        for c in recip:
            cand = _k_reciprocal(rank, c, half)
            if len(np.intersect1d(cand, recip)) > 2.0 / 3.0 * len(cand):
                expansion = np.append(expansion, cand)
        expansion = np.unique(expansion)
        weight = np.exp(-full[i, expansion])
        V[i, expansion] = weight / weight.sum()

    if k2 != 1:
        V = np.stack([V[rank[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.empty((n_q, n_g))
    for i in range(n_q):
        overlap = np.minimum(V[i][None, :], V[n_q:]).sum(axis=1)
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)
    return lam * dist_qg + (1.0 - lam) * jaccard
