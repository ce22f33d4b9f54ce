"""Per-split retrieval evaluation and the metrics report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import EVAL_SPLITS, ROUTES, Dataset, SplitAssignment, filter_triplets, qrels_from_triplets
from .metrics import RankedRun, err, ndcg_at_k, rbp, search_many
from .multifield import FieldWeights, eval_gamma_profile
from .rng import derive_seed, shuffled

REPORT_COLUMNS = ("split", "metric", "k", "value", "n_queries", "n_dropped")


@dataclass
class EvalConfig:
    ndcg_k: tuple[int, ...] = (10,)
    rbp_p: float = 0.9
    k_hits: int = 100
    max_queries: int = 5000
    seed: int = 0
    depth: str = "run"


@dataclass
class MetricRow:
    split: str
    metric: str
    k: int | None
    value: float | None
    n_queries: int
    n_dropped: int


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    per_query: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict, repr=False)
    runs: dict[str, list[RankedRun]] = field(default_factory=dict, repr=False)

    def get(self, split: str, metric: str, k: int | None = None) -> float | None:
        for r in self.rows:
            if r.split == split and r.metric == metric and (k is None or r.k == k):
                return r.value
        raise KeyError((split, metric, k))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [r.split, r.metric, "" if r.k is None else r.k, "" if r.value is None else repr(r.value), r.n_queries, r.n_dropped]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_json(self, path=None) -> str:
        text = json.dumps([r.__dict__ for r in self.rows], indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def write_trec(self, path, run_tag: str = "gcl") -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for split in sorted(self.runs):
                for run in self.runs[split]:
                    for rank, (doc_id, score) in enumerate(run.hits, start=1):
                        fh.write(f"{run.query_id} Q0 {doc_id} {rank} {score!r} {run_tag}-{split}\n")


def metric_names(config: EvalConfig) -> list[tuple[str, int | None]]:
    return [("ndcg", k) for k in config.ndcg_k] + [("err", None), ("rbp", None)]


def _metric_key(name: str, k: int | None) -> str:
    return f"{name}@{k}" if k is not None else name


def score_runs(runs: Sequence[RankedRun], qrels, config: EvalConfig) -> dict[str, dict[str, float]]:
    """Per-query metric values keyed ``query_id -> metric -> value``."""
    out = {}
    for run in runs:
        vals = {}
        for k in config.ndcg_k:
            vals[_metric_key("ndcg", k)] = ndcg_at_k(run, qrels, k)
        vals["err"] = err(run, qrels, depth=config.depth)
        vals["rbp"] = rbp(run, qrels, p=config.rbp_p, depth=config.depth)
        if any(v is None for v in vals.values()):
            continue
        out[run.query_id] = vals
    return out


def evaluate_splits(
    embedder,
    dataset: Dataset,
    assignment: SplitAssignment,
    gamma_profile: Mapping | None,
    config: EvalConfig | None = None,
    training_gamma: FieldWeights | None = None,
    splits: Sequence[str] = EVAL_SPLITS,
    keep_runs: bool = False,
) -> MetricsReport:
    """Embed, search and score each evaluation split.

    ``embedder.embed(side, records, gamma)`` must return fused embeddings
    for ``side`` in {"lhs", "rhs"}. ``gamma_profile`` maps split names to
    field weights; unnamed splits fall back to ``training_gamma``.
    """
    config = config or EvalConfig()
    missing = set(EVAL_SPLITS) - set(gamma_profile or {})
    if training_gamma is None and missing:
        raise ValueError(f"training_gamma is required for splits without a profile entry: {sorted(missing)}")
    resolved = eval_gamma_profile(gamma_profile, training_gamma)

    report = MetricsReport()
    corpus_cache: dict[tuple[str, tuple[float, ...]], object] = {}
    for split in splits:
        q_bucket, d_bucket = ROUTES[split]
        routed = filter_triplets(dataset.triplets, assignment, split)
        qrels = qrels_from_triplets(routed.triplets)
        routed_queries = [q for q in assignment.queries_in(q_bucket) if q in dataset.query_index]
        eligible = [q for q in routed_queries if q in qrels]
        n_dropped = len(routed_queries) - len(eligible)
        if len(eligible) > config.max_queries:
            eligible = sorted(shuffled(eligible, derive_seed(config.seed, "eval-sample", split))[: config.max_queries])
        doc_ids = [d for d in assignment.docs_in(d_bucket) if d in dataset.doc_index]
        gamma = resolved[split]

        per_query: dict[str, dict[str, float]] = {}
        runs: list[RankedRun] = []
        if eligible and doc_ids:
            key = (d_bucket, gamma.gamma_r)
            if key not in corpus_cache:
                corpus_cache[key] = embedder.embed("rhs", [dataset.doc_index[d] for d in doc_ids], gamma.gamma_r)
            q_emb = embedder.embed("lhs", [dataset.query_index[q] for q in eligible], gamma.gamma_l)
            runs = search_many(q_emb, eligible, corpus_cache[key], doc_ids, config.k_hits)
            per_query = score_runs(runs, qrels, config)
        n_dropped += len(eligible) - len(per_query)
        report.per_query[split] = per_query
        if keep_runs:
            report.runs[split] = runs
        for name, k in metric_names(config):
            mk = _metric_key(name, k)
            vals = [per_query[q][mk] for q in sorted(per_query)]
            value = math.fsum(vals) / len(vals) if vals else None
            report.rows.append(MetricRow(split, name, k, value, len(vals), n_dropped))
    return report
