import math

import numpy as np
import pytest

from gcl.dataset import (
    ROUTES,
    SplitAssignment,
    Triplet,
    apply_stw,
    filter_triplets,
    qrels_from_triplets,
    quadruple_split,
    score_from_atc,
    score_from_rank,
    scores_from_atc,
)
from gcl.errors import DataValidationError
from gcl.io import (
    load_corpus,
    load_queries,
    load_split,
    load_triplets,
    read_ids,
    write_corpus,
    write_queries,
    write_split,
    write_triplets,
)
from gcl.dataset import CorpusRecord, QueryRecord
from gcl.stw import StwFunction
from gcl.synth import SynthConfig, synth_dataset


# ------------------------------------------------------------- scores


def test_score_from_rank():
    assert score_from_rank(1) == 100
    assert score_from_rank(100) == 1
    for bad in (0, 101, 2.5, True):
        with pytest.raises(ValueError):
            score_from_rank(bad)


def test_score_from_atc_fixture():
    assert round(score_from_atc(2600), 2) == 83.50
    assert score_from_atc(1) == 1.0
    assert score_from_atc(1.1**10) == pytest.approx(11.0)
    with pytest.raises(ValueError, match=">= 1"):
        score_from_atc(0.5)


def test_scores_from_atc_clamps_and_counts():
    big = 1.1**120
    scores, n = scores_from_atc([1, 2600, big])
    assert n == 1 and scores[2] == 100.0
    assert scores[1] == pytest.approx(math.log(2600, 1.1) + 1)


# ------------------------------------------------------------- split


def ids(prefix, n):
    return [f"{prefix}{i:05d}" for i in range(n)]


def test_small_split_sizes():
    a = quadruple_split(ids("q", 10), ids("d", 10), seed=1)
    assert len(a.queries_in("train")) == 8 and len(a.queries_in("eval")) == 2
    assert len(a.docs_in("corpus1")) == 5 and len(a.docs_in("corpus2")) == 5


@pytest.mark.parametrize("n", [1, 2, 3, 7, 11, 99])
def test_proportions_within_one(n):
    a = quadruple_split(ids("q", n), ids("d", n), seed=n)
    assert abs(len(a.queries_in("train")) - 0.8 * n) <= 1
    assert abs(len(a.docs_in("corpus1")) - 0.5 * n) <= 1


def test_partition_and_determinism():
    q, d = ids("q", 500), ids("d", 300)
    a = quadruple_split(q, d, seed=3)
    b = quadruple_split(list(reversed(q)), list(reversed(d)), seed=3)
    assert a == b
    assert set(a.query_split) == set(q) and set(a.doc_split) == set(d)
    assert set(a.queries_in("train")).isdisjoint(a.queries_in("eval"))
    assert quadruple_split(q, d, seed=4).query_split != a.query_split


def test_duplicate_ids_named():
    with pytest.raises(ValueError, match="'q1'"):
        quadruple_split(["q1", "q2", "q1"], ["d1"], seed=0)


def _toy_assignment():
    return SplitAssignment({"qa": "train", "qb": "eval"}, {"d1": "corpus1", "d2": "corpus2"}, seed=0)


def test_routing_table():
    a = _toy_assignment()
    trip = [Triplet(q, d, 50) for q in ("qa", "qb") for d in ("d1", "d2")]
    expected = {
        "train": ("qa", "d1"),
        "in_domain": ("qa", "d1"),
        "novel_query": ("qb", "d1"),
        "novel_corpus": ("qa", "d2"),
        "zero_shot": ("qb", "d2"),
    }
    for split, pair in expected.items():
        got = filter_triplets(trip, a, split).triplets
        assert [(t.query_id, t.doc_id) for t in got] == [pair], split
    assert set(ROUTES) == set(expected)


def test_filter_reports_dropped_queries():
    a = _toy_assignment()
    res = filter_triplets([Triplet("qa", "d2", 10)], a, "in_domain")
    assert res.triplets == [] and res.dropped_queries == ["qa"] and res.n_queries == 0
    with pytest.raises(ValueError, match="unknown split"):
        filter_triplets([], a, "dev")


def test_qrels_and_apply_stw():
    trip = [Triplet("q", "a", 100), Triplet("q", "b", 51)]
    assert qrels_from_triplets(trip) == {"q": {"a": 100.0, "b": 51.0}}
    w = apply_stw(trip, StwFunction("inverse"))
    np.testing.assert_allclose(w, [100.0, 2.0])
    assert trip[1].weight == 2.0
    with pytest.raises(ValueError, match=r"\(q, x\)"):
        apply_stw([Triplet("q", "x", 500)], StwFunction("inverse"))


# ------------------------------------------------------------- io


def test_jsonl_round_trip(tmp_path):
    trip = [Triplet("q1", "d1", 100), Triplet("q1", "d2", 83.5)]
    write_triplets(tmp_path / "t.jsonl", trip, 100)
    loaded, s_max = load_triplets(tmp_path / "t.jsonl")
    assert s_max == 100 and [(t.query_id, t.doc_id, t.score) for t in loaded] == [("q1", "d1", 100), ("q1", "d2", 83.5)]

    corpus = [CorpusRecord("d1", {"title": "red shoe", "image_vec": np.array([0.5, 1.0])})]
    write_corpus(tmp_path / "c.jsonl", corpus, {"image_vec": 2})
    c, dims = load_corpus(tmp_path / "c.jsonl")
    assert dims == {"image_vec": 2}
    np.testing.assert_array_equal(c[0].fields["image_vec"], [0.5, 1.0])

    write_queries(tmp_path / "q.jsonl", [QueryRecord("q1", {"text": "shoe"})])
    assert load_queries(tmp_path / "q.jsonl")[0].fields == {"text": "shoe"}

    a = _toy_assignment()
    write_split(tmp_path / "s.jsonl", a)
    assert load_split(tmp_path / "s.jsonl") == a


def test_crlf_and_blank_lines(tmp_path):
    p = tmp_path / "q.jsonl"
    p.write_bytes(b'{"format": "gcl-queries", "version": 1}\r\n\r\n{"query_id": "q1", "text": "a"}\r\n')
    assert [q.query_id for q in load_queries(p)] == ["q1"]


@pytest.mark.parametrize(
    "body,match,line",
    [
        ('{"query_id": "q1", "doc_id": "d1", "score": 0}', "outside", 2),
        ('{"query_id": "q1", "doc_id": "d1"}', "missing 'score'", 2),
        ('{"query_id": "q1", "doc_id": "d1", "score": "9"}', "wrong type", 2),
        ("not json", "malformed JSON", 2),
        ('{"query_id": "q1", "doc_id": "d1", "score": 5}\n{"query_id": "q1", "doc_id": "d1", "score": 6}', "duplicate", 3),
    ],
)
def test_triplet_validation_errors(tmp_path, body, match, line):
    p = tmp_path / "t.jsonl"
    p.write_text('{"format": "gcl-triplets", "version": 1, "s_max": 100}\n' + body + "\n")
    with pytest.raises(DataValidationError, match=match) as exc:
        load_triplets(p)
    assert exc.value.line == line


def test_header_errors(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"format": "gcl-corpus", "version": 1}\n')
    with pytest.raises(DataValidationError, match="header format"):
        load_triplets(p)
    p.write_text("")
    with pytest.raises(DataValidationError, match="missing header"):
        load_queries(p)
    with pytest.raises(DataValidationError, match="not found"):
        load_queries(tmp_path / "nope.jsonl")


def test_corpus_dense_dimension_mismatch(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"format": "gcl-corpus", "version": 1, "dense_dims": {"v": 3}}\n{"doc_id": "d1", "v": [1, 2]}\n')
    with pytest.raises(DataValidationError, match="declares 3"):
        load_corpus(p)


def test_read_ids_keeps_duplicates(tmp_path):
    p = tmp_path / "q.jsonl"
    write_queries(p, [QueryRecord("q1", {"text": "a"}), QueryRecord("q1", {"text": "b"})])
    assert read_ids(p, "gcl-queries", "query_id") == ["q1", "q1"]
    with pytest.raises(DataValidationError, match="duplicate query_id"):
        load_queries(p)


# ------------------------------------------------------------- synth


def test_synth_counts_and_scores():
    ds = synth_dataset(SynthConfig(n_queries=100, docs_per_query=100, seed=0))
    assert len(ds.triplets) == 10_000
    per_query = {}
    for t in ds.triplets:
        per_query.setdefault(t.query_id, []).append(t.score)
    assert all(sorted(v) == list(range(1, 101)) for v in per_query.values())


def test_synth_scores_follow_latent_similarity():
    ds = synth_dataset(SynthConfig(n_queries=20, docs_per_query=10, seed=1))
    q = ds.queries[0].query_id
    trip = sorted((t for t in ds.triplets if t.query_id == q), key=lambda t: -t.score)
    sims = [float(ds.query_latent[q] @ ds.doc_latent[t.doc_id]) for t in trip]
    assert sims == sorted(sims, reverse=True)


def test_synth_deterministic_and_seeded():
    a = synth_dataset(SynthConfig(n_queries=10, docs_per_query=5, seed=2))
    b = synth_dataset(SynthConfig(n_queries=10, docs_per_query=5, seed=2))
    c = synth_dataset(SynthConfig(n_queries=10, docs_per_query=5, seed=3))
    assert [q.fields for q in a.queries] == [q.fields for q in b.queries]
    np.testing.assert_array_equal(a.corpus[0].fields["image_vec"], b.corpus[0].fields["image_vec"])
    assert [q.fields for q in a.queries] != [q.fields for q in c.queries]


@pytest.mark.parametrize(
    "kw,match",
    [
        ({"docs_per_query": 0}, "docs_per_query"),
        ({"docs_per_query": 101}, "docs_per_query"),
        ({"docs_per_query": 50, "docs_per_cluster": 10}, "exceeds"),
        ({"vocab_size": 20}, "tokens per cluster"),
    ],
)
def test_synth_infeasible_config(kw, match):
    with pytest.raises(ValueError, match=match):
        synth_dataset(SynthConfig(n_queries=10, **kw))
