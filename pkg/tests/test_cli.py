import json

import pytest

from gcl.cli import FIELDS, build_config, build_parser, main
from gcl.errors import ConfigError

SMALL = ["--n-queries", "30", "--docs-per-query", "8", "--dense-dim", "6"]
TRAIN = ["--epochs", "2", "--batch-size", "16", "--embed-dim", "8", "--hash-buckets", "64", "--lr", "0.01"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["synth", "--out-dir", str(d), *SMALL]) == 0
    assert main(["split", "--out-dir", str(d)]) == 0
    assert main(["train", "--out-dir", str(d), *TRAIN]) == 0
    return d


def lines(path):
    return path.read_text(encoding="utf-8").splitlines()


def test_synth_default_config(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out-dir", tmp_path)
    assert code == 0 and "triplets=100000" in out
    for name, fmt in (("queries", "gcl-queries"), ("corpus", "gcl-corpus"), ("triplets", "gcl-triplets")):
        header = json.loads(lines(tmp_path / f"{name}.jsonl")[0])
        assert header["format"] == fmt and header["version"] == 1
    assert len(lines(tmp_path / "triplets.jsonl")) == 1 + 1000 * 100


def test_synth_byte_identical_rerun(tmp_path, capsys):
    for sub in ("a", "b"):
        assert run(capsys, "synth", "--out-dir", tmp_path / sub, "--seed", 5, *SMALL)[0] == 0
    for name in ("queries", "corpus", "triplets"):
        assert (tmp_path / "a" / f"{name}.jsonl").read_bytes() == (tmp_path / "b" / f"{name}.jsonl").read_bytes()


def test_synth_invalid_docs_per_query(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out-dir", tmp_path, "--docs-per-query", 0)
    assert code == 2 and "docs_per_query" in err


def test_split_proportions_and_determinism(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "split", "--out-dir", workdir, "--split", tmp_path / "s.jsonl")
    assert code == 0 and "train=24 eval=6" in out
    assert (tmp_path / "s.jsonl").read_bytes() == (workdir / "split.jsonl").read_bytes()


def test_split_duplicate_id(tmp_path, capsys):
    (tmp_path / "queries.jsonl").write_text(
        '{"format": "gcl-queries", "version": 1}\n{"query_id": "q7", "text": "a"}\n{"query_id": "q7", "text": "b"}\n'
    )
    (tmp_path / "corpus.jsonl").write_text('{"format": "gcl-corpus", "version": 1}\n{"doc_id": "d1", "title": "x"}\n')
    code, _, err = run(capsys, "split", "--out-dir", tmp_path)
    assert code == 2 and "'q7'" in err


def test_train_outputs(workdir):
    assert (workdir / "model.npz").exists()
    rows = lines(workdir / "history_eval.csv")
    assert rows[0] == "epoch,split,metric,value"
    assert len(rows) == 1 + 2 * 4 * 3
    assert lines(workdir / "history_steps.csv")[0] == "step,loss"


def test_train_constant_matches_unweighted_reference(workdir, tmp_path, capsys):
    common = ["--queries", workdir / "queries.jsonl", "--corpus", workdir / "corpus.jsonl"]
    common += ["--triplets", workdir / "triplets.jsonl", "--split", workdir / "split.jsonl", *TRAIN, "--eval-every", 0]
    assert run(capsys, "train", "--out-dir", tmp_path / "c", "--stw", "constant", "--stw-c", 1, *common)[0] == 0
    assert run(capsys, "train", "--out-dir", tmp_path / "r", "--unweighted-reference", *common)[0] == 0
    assert (tmp_path / "c" / "history_steps.csv").read_bytes() == (tmp_path / "r" / "history_steps.csv").read_bytes()


def test_train_byte_stable(workdir, tmp_path, capsys):
    data = ["--queries", workdir / "queries.jsonl", "--corpus", workdir / "corpus.jsonl"]
    data += ["--triplets", workdir / "triplets.jsonl", "--split", workdir / "split.jsonl"]
    assert run(capsys, "train", "--out-dir", tmp_path, *data, *TRAIN)[0] == 0
    for name in ("model.npz", "history_steps.csv", "history_eval.csv"):
        assert (tmp_path / name).read_bytes() == (workdir / name).read_bytes()


def test_eval_report_shape(workdir, capsys):
    code, out, _ = run(capsys, "eval", "--out-dir", workdir)
    assert code == 0
    rows = lines(workdir / "metrics.csv")
    assert len(rows) == 1 + 4 * 3
    assert {r.split(",")[0] for r in rows[1:]} == {"in_domain", "novel_query", "novel_corpus", "zero_shot"}
    assert len(json.loads((workdir / "metrics.json").read_text())) == 12
    assert run(capsys, "eval", "--out-dir", workdir, "--ndcg-k", "5,10")[0] == 0
    assert len(lines(workdir / "metrics.csv")) == 1 + 4 * 4


def test_eval_hybrid_profile_equals_fixed_runs(workdir, tmp_path, capsys):
    base = ["--checkpoint", workdir / "model.npz"] + [
        x for n in ("queries", "corpus", "triplets", "split") for x in (f"--{n}", workdir / f"{n}.jsonl")
    ]
    profiles = {"img": [1.0, 0.0], "mix": [0.5, 0.5]}
    for name, g in profiles.items():
        assert run(capsys, "eval", "--out-dir", tmp_path / name, "--gamma-r", json.dumps(g), *base)[0] == 0
    hybrid = json.dumps({"in_domain": [0.5, 0.5], "novel_query": [1.0, 0.0], "zero_shot": [1.0, 0.0]})
    assert run(capsys, "eval", "--out-dir", tmp_path / "hy", "--gamma-profile", hybrid, "--gamma-r", "[0.5, 0.5]", *base)[0] == 0

    def by_split(d):
        return {r.split(",")[0]: r for r in lines(d / "metrics.csv")[1:] if ",ndcg," in r}

    hy, img, mix = by_split(tmp_path / "hy"), by_split(tmp_path / "img"), by_split(tmp_path / "mix")
    assert hy["in_domain"] == mix["in_domain"]
    assert hy["novel_query"] == img["novel_query"]
    assert hy["zero_shot"] == img["zero_shot"]
    assert hy["novel_corpus"] == mix["novel_corpus"]


def test_eval_missing_checkpoint(workdir, capsys):
    code, _, err = run(capsys, "eval", "--out-dir", workdir, "--checkpoint", workdir / "nope.npz")
    assert code == 2 and "checkpoint" in err


def test_eval_bad_profile(workdir, capsys):
    code, _, err = run(capsys, "eval", "--out-dir", workdir, "--gamma-profile", '{"dev": [1, 0]}')
    assert code == 2 and "unknown split" in err


def parse_stw(out):
    rows = [r.split(",") for r in out.splitlines()]
    assert rows[0] == ["function", "s", "w"]
    return {(k, float(s)): float(w) for k, s, w in rows[1:]}


def test_stw_curves(capsys):
    code, out, _ = run(capsys, "stw")
    assert code == 0
    table = parse_stw(out)
    assert len(table) == 500
    assert table[("inverse", 100.0)] == 100.0
    assert {table[("piecewise", float(s))] for s in range(90, 101)} == {100.0}
    assert round(table[("piecewise", 50.0)], 4) == 2.4390


def test_stw_to_file_and_bad_kind(tmp_path, capsys):
    assert run(capsys, "stw", "--output", tmp_path / "c.csv", "--stw-kinds", "linear")[0] == 0
    assert len(lines(tmp_path / "c.csv")) == 101
    assert run(capsys, "stw", "--stw-kinds", "cubic")[0] == 2


def test_search_single_doc(tmp_path, capsys):
    assert run(capsys, "synth", "--out-dir", tmp_path, "--n-queries", 10, "--docs-per-query", 1, "--n-clusters", 1, "--dense-dim", 4)[0] == 0
    assert run(capsys, "split", "--out-dir", tmp_path)[0] == 0
    assert run(capsys, "train", "--out-dir", tmp_path, *TRAIN, "--batch-size", 4)[0] == 0
    code, out, _ = run(capsys, "search", "--out-dir", tmp_path, "--query", "c0w1", "--k", 1)
    assert code == 0 and out.split("\t")[:2] == ["1", "d0"]


def test_search_sorted(workdir, capsys):
    code, out, _ = run(capsys, "search", "--out-dir", workdir, "--query", "c1w2 c1w7", "--k", 20)
    assert code == 0
    hits = [line.split("\t") for line in out.splitlines()]
    assert len(hits) == 20
    keys = [(-float(s), d) for _, d, s in hits]
    assert keys == sorted(keys)


def test_search_unknown_field_schema(workdir, capsys):
    code, _, err = run(capsys, "search", "--out-dir", workdir, "--query", "x", "--corpus", workdir / "queries.jsonl")
    assert code == 3  # wrong file format is a data error
    bad = workdir / "titles_only.jsonl"
    bad.write_text('{"format": "gcl-corpus", "version": 1}\n{"doc_id": "d1", "title": "red"}\n')
    code, _, err = run(capsys, "search", "--out-dir", workdir, "--query", "x", "--corpus", bad)
    assert code == 2 and "image_vec" in err


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("stw_kinds: [inverse]\ns_min: 50\n")
    code, out, _ = run(capsys, "stw", "--config", cfg, "--s-max", 60)
    assert code == 0 and len(out.splitlines()) == 1 + 11
    (tmp_path / "c.json").write_text('{"stw_kinds": ["linear"], "bogus": 1}')
    code, _, err = run(capsys, "stw", "--config", tmp_path / "c.json")
    assert code == 2 and "bogus" in err
    assert run(capsys, "stw", "--config", tmp_path / "missing.yaml")[0] == 2


def test_build_config_types():
    cfg = build_config({"epochs": 3, "gamma_r": [0.5, 0.5]}, {"lr": "0.5", "tie_text": "true", "ndcg_k": "5,10"})
    assert cfg.epochs == 3 and cfg.lr == 0.5 and cfg.tie_text is True and cfg.ndcg_k == [5, 10]
    with pytest.raises(ConfigError, match="epochs"):
        build_config({}, {"epochs": "two"})
    with pytest.raises(ConfigError, match="unknown"):
        build_config({"nope": 1}, {})


def test_data_validation_exit_code(workdir, tmp_path, capsys):
    bad = tmp_path / "t.jsonl"
    bad.write_text('{"format": "gcl-triplets", "version": 1, "s_max": 100}\n{"query_id": "q00", "doc_id": "d00", "score": 0}\n')
    code, _, err = run(capsys, "train", "--out-dir", workdir, "--triplets", bad, "--checkpoint", tmp_path / "m.npz")
    assert code == 3 and ":2:" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(workdir, tmp_path, capsys):
    code, _, err = run(
        capsys, "train", "--out-dir", tmp_path, "--optimizer", "sgd", "--lr", "1e300", *TRAIN[:-2],
        *[x for n in ("queries", "corpus", "triplets", "split") for x in (f"--{n}", workdir / f"{n}.jsonl")],
    )
    assert code == 4 and "batch" in err


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("GCL_THREADS", "zero")
    assert run(capsys, "stw")[0] == 2
    monkeypatch.setenv("GCL_THREADS", "1")
    assert run(capsys, "stw")[0] == 0


def test_help_documents_every_flag(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    text = sub.format_help()
    for name in FIELDS:
        assert "--" + name.replace("_", "-") in text
    assert main(["--help"]) == 0
    assert main(["frobnicate"]) == 2
