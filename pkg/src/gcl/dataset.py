"""Triplet data model, score derivations and the quadruple split.

Queries are split 80/20 into ``train``/``eval`` and documents 50/50 into
``corpus1``/``corpus2``. Routing of (query bucket, doc bucket) pairs:

=============  ============  ============
split          queries       documents
=============  ============  ============
train          train         corpus1
in_domain      train         corpus1
novel_query    eval          corpus1
novel_corpus   train         corpus2
zero_shot      eval          corpus2
=============  ============  ============
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .rng import derive_seed, shuffled

RANK_S_MAX = 100
TRAIN_FRACTION = 0.8

ROUTES = {
    "train": ("train", "corpus1"),
    "in_domain": ("train", "corpus1"),
    "novel_query": ("eval", "corpus1"),
    "novel_corpus": ("train", "corpus2"),
    "zero_shot": ("eval", "corpus2"),
}
EVAL_SPLITS = ("in_domain", "novel_query", "novel_corpus", "zero_shot")


@dataclass
class Triplet:
    query_id: str
    doc_id: str
    score: float
    weight: float | None = None


@dataclass
class QueryRecord:
    query_id: str
    fields: dict = field(default_factory=dict)


@dataclass
class CorpusRecord:
    doc_id: str
    fields: dict = field(default_factory=dict)


@dataclass
class Dataset:
    queries: list[QueryRecord]
    corpus: list[CorpusRecord]
    triplets: list[Triplet]
    s_max: float = RANK_S_MAX
    dense_dims: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.query_index = {q.query_id: q for q in self.queries}
        self.doc_index = {d.doc_id: d for d in self.corpus}


def score_from_rank(rank: int) -> int:
    """Listing position 1..100 to score ``101 - rank`` (so 100..1)."""
    if isinstance(rank, bool) or int(rank) != rank:
        raise ValueError(f"rank must be an integer, got {rank!r}")
    rank = int(rank)
    if not 1 <= rank <= RANK_S_MAX:
        raise ValueError(f"rank {rank} outside 1..{RANK_S_MAX}")
    return RANK_S_MAX + 1 - rank


def score_from_atc(atc: float) -> float:
    """Add-to-cart count to score ``log_1.1(atc) + 1`` (unclamped)."""
    atc = float(atc)
    if not atc >= 1:
        raise ValueError(f"add-to-cart count must be >= 1, got {atc}")
    return math.log(atc) / math.log(1.1) + 1.0


def scores_from_atc(counts: Iterable[float], s_max: float = RANK_S_MAX) -> tuple[list[float], int]:
    """Vector form of :func:`score_from_atc`; values above ``s_max`` are clamped.

    Returns the scores and the number of clamped values.
    """
    out, clamped = [], 0
    for c in counts:
        s = score_from_atc(c)
        if s > s_max:
            s = float(s_max)
            clamped += 1
        out.append(s)
    return out, clamped


@dataclass
class SplitAssignment:
    query_split: dict[str, str]
    doc_split: dict[str, str]
    seed: int

    def queries_in(self, bucket: str) -> list[str]:
        return sorted(q for q, b in self.query_split.items() if b == bucket)

    def docs_in(self, bucket: str) -> list[str]:
        return sorted(d for d, b in self.doc_split.items() if b == bucket)


def _dupes(ids: Sequence[str]) -> list[str]:
    return sorted(i for i, c in Counter(ids).items() if c > 1)


def quadruple_split(query_ids: Sequence[str], doc_ids: Sequence[str], seed: int) -> SplitAssignment:
    """Deterministic 80/20 query and 50/50 document partition.

    Ids are sorted, shuffled with the portable SplitMix64 Fisher-Yates
    shuffle, and the first ``floor(0.8 n + 0.5)`` queries (resp.
    ``ceil(n / 2)`` documents) go to ``train`` (resp. ``corpus1``).
    """
    query_ids, doc_ids = list(query_ids), list(doc_ids)
    if not query_ids or not doc_ids:
        raise ValueError("need at least one query id and one doc id")
    for kind, ids in (("query", query_ids), ("doc", doc_ids)):
        d = _dupes(ids)
        if d:
            raise ValueError(f"duplicate {kind} id {d[0]!r}")
    q_order = shuffled(sorted(query_ids), derive_seed(seed, "split", "queries"))
    d_order = shuffled(sorted(doc_ids), derive_seed(seed, "split", "docs"))
    n_train = int(math.floor(TRAIN_FRACTION * len(q_order) + 0.5))
    n_c1 = (len(d_order) + 1) // 2
    query_split = {q: ("train" if i < n_train else "eval") for i, q in enumerate(q_order)}
    doc_split = {d: ("corpus1" if i < n_c1 else "corpus2") for i, d in enumerate(d_order)}
    return SplitAssignment(query_split, doc_split, seed)


@dataclass
class FilterResult:
    triplets: list[Triplet]
    split: str
    n_queries: int
    dropped_queries: list[str]


def filter_triplets(triplets: Sequence[Triplet], assignment: SplitAssignment, split_name: str) -> FilterResult:
    """Triplets routed to ``split_name``.

    Queries of the routed class with no triplet in the routed corpus are
    reported in ``dropped_queries``.
    """
    if split_name not in ROUTES:
        raise ValueError(f"unknown split {split_name!r}; expected one of {sorted(ROUTES)}")
    q_bucket, d_bucket = ROUTES[split_name]
    kept = [
        t
        for t in triplets
        if assignment.query_split.get(t.query_id) == q_bucket and assignment.doc_split.get(t.doc_id) == d_bucket
    ]
    with_rows = {t.query_id for t in kept}
    judged = {t.query_id for t in triplets if assignment.query_split.get(t.query_id) == q_bucket}
    dropped = sorted(judged - with_rows)
    return FilterResult(kept, split_name, len(with_rows), dropped)


def qrels_from_triplets(triplets: Iterable[Triplet]) -> dict[str, dict[str, float]]:
    qrels: dict[str, dict[str, float]] = {}
    for t in triplets:
        qrels.setdefault(t.query_id, {})[t.doc_id] = float(t.score)
    return qrels


def apply_stw(triplets: Sequence[Triplet], stw) -> np.ndarray:
    """Compute and cache STW weights on each triplet."""
    out = np.empty(len(triplets))
    for i, t in enumerate(triplets):
        try:
            t.weight = stw(t.score)
        except ValueError as exc:
            raise ValueError(f"triplet ({t.query_id}, {t.doc_id}): {exc}") from None
        out[i] = t.weight
    return out
