"""Seeded synthetic experiments comparing STW functions and field weights.

Each run synthesizes a dataset, splits it, trains a two-field document
model (``image_vec`` + ``title``) against query text, and evaluates the
trained model under several RHS field-weight settings.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .dataset import quadruple_split
from .encoder import FieldSchema
from .evaluate import EvalConfig, evaluate_splits
from .multifield import FieldWeights
from .stw import StwFunction
from .synth import SynthConfig, synth_dataset
from .training import TrainConfig, train

SCHEMA = FieldSchema([("text", "text")], [("image_vec", "dense"), ("title", "text")])


@dataclass(frozen=True)
class ExperimentConfig:
    n_queries: int = 1000
    docs_per_query: int = 100
    epochs: int = 5
    lr: float = 1e-2
    batch_size: int = 256
    tau: float = 0.07
    embed_dim: int = 32
    hash_buckets: int = 4096
    eval_gammas: tuple[tuple[float, ...], ...] = ((0.5, 0.5), (1.0, 0.0), (0.0, 1.0))
    hybrid: dict = field(default_factory=dict, hash=False)


@dataclass
class RunResult:
    kind: str
    seed: int
    # metrics[gamma_r][split][metric] with metric keys "ndcg@10", "err", "rbp"
    metrics: dict
    hybrid: dict
    seconds: float


def _flatten(report) -> dict:
    out: dict = {}
    for row in report.rows:
        key = row.metric if row.k is None else f"{row.metric}@{row.k}"
        out.setdefault(row.split, {})[key] = row.value
    return out


def run_one(kind: str, seed: int, config: ExperimentConfig = ExperimentConfig()) -> RunResult:
    """Train with STW ``kind`` on synthetic data seeded by ``seed`` and evaluate."""
    start = time.perf_counter()
    ds = synth_dataset(SynthConfig(n_queries=config.n_queries, docs_per_query=config.docs_per_query, seed=seed))
    assignment = quadruple_split([q.query_id for q in ds.queries], [d.doc_id for d in ds.corpus], seed)
    tc = TrainConfig(
        batch_size=config.batch_size,
        epochs=config.epochs,
        lr=config.lr,
        tau=config.tau,
        stw=StwFunction(kind, s_max=ds.s_max),
        seed=seed,
        eval_every=0,
        embed_dim=config.embed_dim,
        hash_buckets=config.hash_buckets,
    )
    state, _ = train(ds, assignment, tc, SCHEMA)
    metrics = {}
    for g in config.eval_gammas:
        rep = evaluate_splits(state.model, ds, assignment, None, training_gamma=FieldWeights((1.0,), g))
        metrics[g] = _flatten(rep)
    hybrid = {}
    if config.hybrid:
        profile = {split: FieldWeights((1.0,), g) for split, g in config.hybrid.items()}
        hybrid = _flatten(evaluate_splits(state.model, ds, assignment, profile, EvalConfig()))
    return RunResult(kind, seed, metrics, hybrid, time.perf_counter() - start)


def _run_args(args):
    return run_one(*args)


def run_grid(kinds, seeds, config: ExperimentConfig = ExperimentConfig(), workers: int | None = None) -> list[RunResult]:
    """All (kind, seed) runs; independent runs go to separate processes.

    ``workers`` defaults to ``GCL_THREADS`` or the CPU count.
    """
    jobs = [(k, s, config) for s in seeds for k in kinds]
    if workers is None:
        workers = int(os.environ.get("GCL_THREADS") or os.cpu_count() or 1)
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        return [run_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_args, jobs))

