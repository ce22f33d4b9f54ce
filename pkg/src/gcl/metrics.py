"""Exact top-k search and graded-relevance metrics.

Conventions:

* hits are ordered by score descending, ties by ascending doc id;
* documents missing from the qrels have gain 0;
* NDCG@k truncates both DCG and the ideal DCG at ``k``;
* ERR and RBP use the per-query maximum gain as ``s_max`` and run over the
  retrieved list (``depth="run"``) or over its first ``n_doc`` entries
  (``depth="judged"``, ``n_doc`` = number of judged documents).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

Qrels = Mapping[str, Mapping[str, float]]


@dataclass
class RankedRun:
    query_id: str
    hits: list[tuple[str, float]] = field(default_factory=list)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.hits]


def _rank_order(scores: np.ndarray, doc_ids: Sequence[str]) -> np.ndarray:
    return np.lexsort((np.asarray(doc_ids), -scores))


def topk_search(query_emb, corpus_emb, doc_ids: Sequence[str], k_hits: int, query_id: str = "") -> RankedRun:
    """Exact dot-product top-``k_hits`` over the whole corpus."""
    if k_hits < 1:
        raise ValueError(f"k_hits must be >= 1, got {k_hits}")
    corpus_emb = np.asarray(corpus_emb, dtype=np.float64)
    if corpus_emb.ndim != 2 or corpus_emb.shape[0] == 0:
        raise ValueError("corpus must be a non-empty 2-D array")
    if corpus_emb.shape[0] != len(doc_ids):
        raise ValueError(f"{corpus_emb.shape[0]} corpus rows but {len(doc_ids)} doc ids")
    scores = corpus_emb @ np.asarray(query_emb, dtype=np.float64)
    order = _rank_order(scores, doc_ids)[:k_hits]
    return RankedRun(query_id, [(doc_ids[i], float(scores[i])) for i in order])


def search_many(query_embs, query_ids, corpus_emb, doc_ids: Sequence[str], k_hits: int) -> list[RankedRun]:
    """:func:`topk_search` for a batch of queries with one matrix product."""
    if k_hits < 1:
        raise ValueError(f"k_hits must be >= 1, got {k_hits}")
    doc_ids = list(doc_ids)
    by_id = sorted(range(len(doc_ids)), key=doc_ids.__getitem__)
    sorted_ids = [doc_ids[i] for i in by_id]
    corpus_sorted = np.asarray(corpus_emb, dtype=np.float64)[by_id]
    scores = np.asarray(query_embs, dtype=np.float64) @ corpus_sorted.T
    # stable sort on an id-sorted corpus gives the (score desc, id asc) order
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k_hits]
    runs = []
    for qi, qid in enumerate(query_ids):
        row = scores[qi]
        runs.append(RankedRun(qid, [(sorted_ids[j], float(row[j])) for j in order[qi]]))
    return runs


def _gains(run: RankedRun, judged: Mapping[str, float]) -> list[float]:
    return [float(judged.get(d, 0.0)) for d, _ in run.hits]


def _judged(run: RankedRun, qrels: Qrels) -> Mapping[str, float] | None:
    judged = qrels.get(run.query_id)
    if not judged or max(judged.values()) <= 0:
        return None
    return judged


def dcg(gains: Sequence[float], k: int | None = None) -> float:
    gains = gains if k is None else gains[:k]
    return math.fsum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(run: RankedRun, qrels: Qrels, k: int = 10) -> float | None:
    """NDCG@k, or None when the query has no positive judged gain."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    judged = _judged(run, qrels)
    if judged is None:
        return None
    ideal = dcg(sorted(judged.values(), reverse=True), k)
    if ideal <= 0:
        return None
    return dcg(_gains(run, judged), k) / ideal


def _depth(gains: list[float], judged: Mapping[str, float], depth: str) -> list[float]:
    if depth == "run":
        return gains
    if depth == "judged":
        return gains[: len(judged)]
    raise ValueError(f"depth must be 'run' or 'judged', got {depth!r}")


def err(run: RankedRun, qrels: Qrels, depth: str = "run") -> float | None:
    """Expected reciprocal rank with ``R(s) = s / (s_max + 1)``."""
    judged = _judged(run, qrels)
    if judged is None:
        return None
    s_max = max(judged.values())
    total, reach = 0.0, 1.0
    for i, g in enumerate(_depth(_gains(run, judged), judged, depth), start=1):
        r = g / (s_max + 1.0)
        total += reach * r / i
        reach *= 1.0 - r
    return total


def rbp(run: RankedRun, qrels: Qrels, p: float = 0.9, depth: str = "run") -> float | None:
    """Rank-biased precision with gains normalized by the per-query maximum."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"persistence p must be in (0, 1), got {p}")
    judged = _judged(run, qrels)
    if judged is None:
        return None
    s_max = max(judged.values())
    gains = _depth(_gains(run, judged), judged, depth)
    return (1.0 - p) * math.fsum((g / s_max) * p**i for i, g in enumerate(gains))
