"""Retrieval evaluation: gallery ranking, mAP and CMC."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from fancl.errors import ContractError

log = logging.getLogger(__name__)

RANKS = (1, 5, 10)


@dataclass
class Metrics:
    mAP: float
    rank1: float
    rank5: float
    rank10: float
    n_query: int
    n_gallery: int

    def to_dict(self) -> dict:
        return asdict(self)


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by descending cosine similarity, ties by index."""
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ContractError("rank_gallery needs a non-empty (N, D) gallery")
    sims = gallery @ np.asarray(query, dtype=np.float64)
    return np.argsort(-sims, kind="stable")


def average_precision(relevant) -> float:
    """AP of a relevance-flagged ranking; ``nan`` when nothing is relevant."""
    rel = np.asarray(relevant, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return float("nan")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float((hits[rel] / ranks).sum() / n_rel)


def evaluate(query_feats, query_ids, gallery_feats, gallery_ids, ranks=RANKS) -> Metrics:
    """mAP over queries with at least one match; CMC over all queries."""
    query_feats = np.asarray(query_feats, dtype=np.float64)
    gallery_feats = np.asarray(gallery_feats, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if query_feats.shape[0] == 0:
        raise ContractError("evaluate needs at least one query")
    if gallery_feats.shape[0] == 0:
        raise ContractError("evaluate needs a non-empty gallery")
    sims = query_feats @ gallery_feats.T
    aps = []
    hits_at = np.zeros(len(ranks))
    for qi in range(query_feats.shape[0]):
        order = np.argsort(-sims[qi], kind="stable")
        rel = gallery_ids[order] == query_ids[qi]
        ap = average_precision(rel)
        if np.isnan(ap):
            log.warning("query %d has no relevant gallery item; excluded from mAP", qi)
        else:
            aps.append(ap)
        first = np.argmax(rel) if rel.any() else None
        for j, r in enumerate(ranks):
            hits_at[j] += first is not None and first < r
    cmc = hits_at / query_feats.shape[0]
    mAP = float(np.mean(aps)) if aps else 0.0
    by_rank = dict(zip(ranks, cmc.tolist()))
    return Metrics(
        mAP=mAP,
        rank1=by_rank.get(1, float("nan")),
        rank5=by_rank.get(5, float("nan")),
        rank10=by_rank.get(10, float("nan")),
        n_query=int(query_feats.shape[0]),
        n_gallery=int(gallery_feats.shape[0]),
    )


def cmc_curve(query_feats, query_ids, gallery_feats, gallery_ids, max_rank: int = 20) -> np.ndarray:
    """CMC values for ranks 1..max_rank (used by the report figures)."""
    sims = np.asarray(query_feats, dtype=np.float64) @ np.asarray(gallery_feats, dtype=np.float64).T
    gallery_ids = np.asarray(gallery_ids)
    curve = np.zeros(max_rank)
    for qi, qid in enumerate(np.asarray(query_ids)):
        rel = gallery_ids[np.argsort(-sims[qi], kind="stable")] == qid
        if rel.any():
            curve[np.argmax(rel):] += 1
    return curve / len(query_ids)
