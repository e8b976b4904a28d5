"""Query/gallery distances and ReID metrics (mAP and CMC).

Gallery entries that share both identity and camera with a query are junk:
they are dropped from that query's ranking before scoring.  Rankings are
stable sorts on (distance, gallery index).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

DISTANCES = ("euclidean", "cosine")


class ProtocolError(ValueError):
    """Raised when no query has a valid positive in the gallery."""


@dataclass(frozen=True)
class EvalProtocol:
    distance: str = "euclidean"
    junk_same_camera: bool = True

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")


@dataclass
class EvalReport:
    mAP: float
    cmc: List[float]
    ap: List[float]
    num_queries: int
    num_valid_queries: int
    gallery_size: int
    protocol: dict
    zero_vectors: int = 0
    seconds: float = 0.0

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rank1"] = self.rank1
        return d


def pairwise_distances(queries: np.ndarray, gallery: np.ndarray, kind: str = "euclidean") -> np.ndarray:
    """Distance matrix ``[Nq, Ng]`` in float64.

    Cosine distance against a zero vector is defined as 1.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    if kind == "euclidean":
        d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(d2, 0.0))
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        denom = qn[:, None] * gn[None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(denom > 0, (q @ g.T) / np.where(denom > 0, denom, 1.0), 0.0)
        return 1.0 - sim
    raise ValueError(f"unknown distance kind {kind!r}")


def _zero_rows(x: np.ndarray) -> int:
    return int((np.abs(x).sum(axis=1) == 0).sum())


def evaluate_distances(dist: np.ndarray, q_ids, q_cams, g_ids, g_cams,
                       protocol: EvalProtocol = EvalProtocol(), max_rank: Optional[int] = None):
    """Score a precomputed distance matrix.  Returns ``(mAP, cmc, ap_list, n_valid)``."""
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    Ng = dist.shape[1]
    max_rank = Ng if max_rank is None else min(max_rank, Ng)
    cmc = np.zeros(max_rank)
    aps = []
    for i in range(dist.shape[0]):
        order = np.lexsort((np.arange(Ng), dist[i]))
        keep = np.ones(Ng, bool)
        if protocol.junk_same_camera:
            keep = ~((g_ids == q_ids[i]) & (g_cams == q_cams[i]))
        order = order[keep[order]]
        hits = g_ids[order] == q_ids[i]
        if not hits.any():
            continue
        ranks = np.flatnonzero(hits)
        precision = np.arange(1, len(ranks) + 1) / (ranks + 1)
        aps.append(float(precision.mean()))
        if ranks[0] < max_rank:
            cmc[ranks[0]:] += 1
    if not aps:
        raise ProtocolError("no query has a valid positive in the gallery")
    n = len(aps)
    return float(np.mean(aps)), (cmc / n).tolist(), aps, n


def evaluate(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams,
             protocol: EvalProtocol = EvalProtocol(), max_rank: Optional[int] = None) -> EvalReport:
    start = time.perf_counter()
    dist = pairwise_distances(q_feats, g_feats, protocol.distance)
    mAP, cmc, aps, n_valid = evaluate_distances(dist, q_ids, q_cams, g_ids, g_cams, protocol, max_rank)
    zeros = _zero_rows(np.asarray(q_feats)) + _zero_rows(np.asarray(g_feats)) if protocol.distance == "cosine" else 0
    return EvalReport(mAP=mAP, cmc=cmc, ap=aps, num_queries=len(q_ids), num_valid_queries=n_valid,
                      gallery_size=len(g_ids), protocol=asdict(protocol), zero_vectors=zeros,
                      seconds=time.perf_counter() - start)


def evaluate_banks(query_bank, gallery_bank, protocol: EvalProtocol = EvalProtocol(),
                   max_rank: Optional[int] = None) -> EvalReport:
    return evaluate(query_bank.features, query_bank.identity, query_bank.camera,
                    gallery_bank.features, gallery_bank.identity, gallery_bank.camera,
                    protocol, max_rank)
