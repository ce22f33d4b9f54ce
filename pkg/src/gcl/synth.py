"""Synthetic ranked-retrieval corpus with a known latent ground truth.

Generative model
----------------
* Every query and document belongs to one of ``n_clusters`` clusters and
  carries a unit latent vector ``[a * onehot(cluster), b * v]`` with
  ``a**2 = 0.75``, ``b**2 = 0.25`` and ``v`` a random unit "fine" vector.
  Same-cluster pairs therefore always out-score cross-cluster pairs.
* Each cluster owns ``docs_per_cluster`` documents. A query's candidates
  are the ``docs_per_query`` most similar documents of its cluster, ranked
  by latent dot product (ties by doc id) and scored with ``101 - rank``.
  Documents are shared by all queries of a cluster.
* Text fields are token bags drawn without replacement from a cluster
  vocabulary, token ``t`` chosen with probability proportional to
  ``exp(sharpness * u_t . v)`` where ``u_t`` is the token's fine direction.
* The dense ``image_vec`` field is a fixed random linear map of the latent
  vector plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import RANK_S_MAX, CorpusRecord, Dataset, QueryRecord, Triplet, score_from_rank
from .rng import derive_seed

CLUSTER_SHARE = 0.75


@dataclass
class SynthConfig:
    n_queries: int = 1000
    docs_per_query: int = 100
    vocab_size: int = 1000
    n_clusters: int = 10
    dense_dim: int = 32
    seed: int = 0
    docs_per_cluster: int | None = None
    fine_dim: int = 8
    query_len: int = 6
    title_len: int = 8
    sharpness: float = 4.0
    image_noise: float = 0.3

    def validate(self) -> None:
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if not 1 <= self.docs_per_query <= RANK_S_MAX:
            raise ValueError(f"docs_per_query must be in 1..{RANK_S_MAX}, got {self.docs_per_query}")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.docs_per_cluster is not None and self.docs_per_cluster < self.docs_per_query:
            raise ValueError(
                f"docs_per_query={self.docs_per_query} exceeds the {self.docs_per_cluster} documents per cluster"
            )
        per_cluster = self.vocab_size // self.n_clusters
        if per_cluster < max(self.query_len, self.title_len):
            raise ValueError(
                f"vocab_size {self.vocab_size} gives {per_cluster} tokens per cluster, "
                f"fewer than query_len/title_len ({self.query_len}/{self.title_len})"
            )
        if self.dense_dim < 1 or self.fine_dim < 1:
            raise ValueError("dense_dim and fine_dim must be >= 1")


@dataclass
class SynthDataset(Dataset):
    query_latent: dict[str, np.ndarray] = field(default_factory=dict)
    doc_latent: dict[str, np.ndarray] = field(default_factory=dict)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _sample_tokens(rng, dirs: np.ndarray, v: np.ndarray, length: int, sharpness: float) -> np.ndarray:
    logits = sharpness * (dirs @ v)
    p = np.exp(logits - logits.max())
    return rng.choice(len(dirs), size=length, replace=False, p=p / p.sum())


def synth_dataset(config: SynthConfig) -> SynthDataset:
    config.validate()
    c = config
    per_cluster_docs = c.docs_per_cluster or c.docs_per_query
    per_cluster_vocab = c.vocab_size // c.n_clusters
    rng = np.random.default_rng(derive_seed(c.seed, "synth"))
    a, b = np.sqrt(CLUSTER_SHARE), np.sqrt(1.0 - CLUSTER_SHARE)
    latent_dim = c.n_clusters + c.fine_dim

    token_dirs = _unit_rows(rng, c.n_clusters * per_cluster_vocab, c.fine_dim).reshape(
        c.n_clusters, per_cluster_vocab, c.fine_dim
    )
    mixing = rng.standard_normal((latent_dim, c.dense_dim)) / np.sqrt(latent_dim)

    def latent(cluster: int, fine: np.ndarray) -> np.ndarray:
        z = np.zeros(latent_dim)
        z[cluster] = a
        z[c.n_clusters :] = b * fine
        return z

    def text(cluster: int, fine: np.ndarray, length: int) -> str:
        idx = _sample_tokens(rng, token_dirs[cluster], fine, length, c.sharpness)
        return " ".join(f"c{cluster}w{i}" for i in idx)

    n_docs = c.n_clusters * per_cluster_docs
    width_d = len(str(n_docs - 1))
    corpus, doc_latent, cluster_docs = [], {}, [[] for _ in range(c.n_clusters)]
    doc_fine = _unit_rows(rng, n_docs, c.fine_dim)
    for i in range(n_docs):
        cluster = i % c.n_clusters
        did = f"d{i:0{width_d}d}"
        z = latent(cluster, doc_fine[i])
        image = z @ mixing + c.image_noise * rng.standard_normal(c.dense_dim) / np.sqrt(c.dense_dim)
        corpus.append(CorpusRecord(did, {"title": text(cluster, doc_fine[i], c.title_len), "image_vec": image}))
        doc_latent[did] = z
        cluster_docs[cluster].append(did)

    width_q = len(str(c.n_queries - 1))
    queries, query_latent, triplets = [], {}, []
    query_fine = _unit_rows(rng, c.n_queries, c.fine_dim)
    for i in range(c.n_queries):
        cluster = i % c.n_clusters
        qid = f"q{i:0{width_q}d}"
        z = latent(cluster, query_fine[i])
        queries.append(QueryRecord(qid, {"text": text(cluster, query_fine[i], c.query_len)}))
        query_latent[qid] = z
        docs = cluster_docs[cluster]
        sims = np.array([doc_latent[d] for d in docs]) @ z
        order = sorted(range(len(docs)), key=lambda j: (-sims[j], docs[j]))[: c.docs_per_query]
        for rank, j in enumerate(order, start=1):
            triplets.append(Triplet(qid, docs[j], score_from_rank(rank)))

    return SynthDataset(
        queries,
        corpus,
        triplets,
        s_max=RANK_S_MAX,
        dense_dims={"image_vec": c.dense_dim},
        query_latent=query_latent,
        doc_latent=doc_latent,
    )
