"""Command-line front end: ``gcl {synth,split,train,eval,stw,search}``.

Every command reads one flat :class:`RunConfig`. Values come from the
dataclass defaults, then an optional JSON/YAML file (``--config``), then
``--key value`` flags. Unknown keys are rejected.

Exit codes: 0 success, 2 usage or config error, 3 data validation error,
4 numerical failure. ``GCL_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from .dataset import Dataset, QueryRecord, quadruple_split
from .encoder import FieldSchema, Model
from .errors import ConfigError, DataValidationError, GCLError
from .evaluate import EvalConfig, evaluate_splits
from .io import (
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
from .metrics import search_many
from .multifield import FieldWeights, eval_gamma_profile
from .stw import KINDS, StwFunction, stw_curves
from .synth import SynthConfig, synth_dataset
from .training import TrainConfig, save_checkpoint, train

log = logging.getLogger("gcl")

COMMANDS = ("synth", "split", "train", "eval", "stw", "search")


def _opt(default, help: str, kind=None):
    factory = None
    if isinstance(default, (list, dict)):
        factory, default = (lambda d=default: type(d)(d)), MISSING
    meta = {"help": help, "kind": kind}
    if factory is not None:
        return field(default_factory=factory, metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class RunConfig:
    # shared
    seed: int = _opt(0, "master seed; every random stream is derived from it")
    out_dir: str = _opt("run", "directory for outputs and default data paths")
    queries: str | None = _opt(None, "queries JSONL (default OUT_DIR/queries.jsonl)", str)
    corpus: str | None = _opt(None, "corpus JSONL (default OUT_DIR/corpus.jsonl)", str)
    triplets: str | None = _opt(None, "triplets JSONL (default OUT_DIR/triplets.jsonl)", str)
    split: str | None = _opt(None, "split JSONL (default OUT_DIR/split.jsonl)", str)
    checkpoint: str | None = _opt(None, "model checkpoint (default OUT_DIR/model.npz)", str)
    verbose: bool = _opt(False, "log progress to stderr")
    # synth
    n_queries: int = _opt(1000, "synth: number of queries")
    docs_per_query: int = _opt(100, "synth: judged documents per query (1..100)")
    docs_per_cluster: int | None = _opt(None, "synth: documents per cluster (default docs_per_query)", int)
    vocab_size: int = _opt(1000, "synth: vocabulary size")
    n_clusters: int = _opt(10, "synth: number of latent clusters")
    dense_dim: int = _opt(32, "synth: image_vec feature dimension")
    fine_dim: int = _opt(8, "synth: within-cluster latent dimension")
    image_noise: float = _opt(0.3, "synth: noise scale of image_vec")
    # schema
    lhs_fields: list = _opt(["text"], "query fields, NAME or NAME:KIND (kind text|dense)", str)
    rhs_fields: list = _opt(["image_vec", "title"], "document fields, NAME or NAME:KIND", str)
    # training
    batch_size: int = _opt(256, "triplets per batch")
    epochs: int = _opt(20, "training epochs")
    lr: float = _opt(1e-3, "learning rate")
    optimizer: str = _opt("adam", "adam or sgd")
    tau: float = _opt(0.07, "temperature dividing similarities")
    stw: str = _opt("inverse", f"score-to-weight function: {', '.join(KINDS)}")
    stw_c: float = _opt(1.0, "constant for --stw constant")
    unweighted_reference: bool = _opt(False, "train with the unweighted symmetric loss")
    gamma_l: list | None = _opt(None, "training query field weights (default uniform)", float)
    gamma_r: list | None = _opt(None, "training document field weights (default uniform)", float)
    pairwise_scale: float = _opt(1.0, "scale of the per-field-pair loss terms")
    embed_dim: int = _opt(64, "embedding dimension")
    hash_buckets: int = _opt(65536, "hashed token buckets per text encoder")
    tie_text: bool = _opt(False, "share the query text encoder with the first document text field")
    eval_every: int = _opt(1, "evaluate every N epochs (0 disables)")
    # evaluation
    ndcg_k: list = _opt([10], "NDCG cutoffs", int)
    rbp_p: float = _opt(0.9, "RBP persistence")
    k_hits: int = _opt(100, "retrieved documents per query")
    max_eval_queries: int = _opt(5000, "query sample cap per split")
    metric_depth: str = _opt("run", "ERR/RBP depth: run or judged")
    gamma_profile: dict = _opt({}, "per-split field weights, JSON: {split: [gamma_r...] | {lhs, rhs}}")
    trec_run: bool = _opt(False, "eval: also write OUT_DIR/run.trec")
    # stw
    stw_kinds: list = _opt(list(KINDS), "stw: functions to tabulate", str)
    s_min: float = _opt(1.0, "stw: first score")
    s_max: float = _opt(100.0, "stw: last score and dataset maximum")
    s_step: float = _opt(1.0, "stw: score increment")
    output: str | None = _opt(None, "stw: CSV path (default stdout)", str)
    # search
    query: str | None = _opt(None, "search: query text", str)
    k: int = _opt(10, "search: hits to print")

    def path(self, name: str) -> Path:
        explicit = getattr(self, name)
        default = {"checkpoint": "model.npz"}.get(name, f"{name}.jsonl")
        return Path(explicit) if explicit else Path(self.out_dir) / default


FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _default_of(f):
    return f.default_factory() if f.default is MISSING else f.default


def _coerce(name: str, value):
    """Convert a config-file or flag value to the field's type."""
    f = FIELDS[name]
    default = _default_of(f)
    kind = f.metadata.get("kind")
    try:
        if value is None:
            if default is None:
                return None
            raise ValueError("null is not allowed")
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, dict):
            value = json.loads(value) if isinstance(value, str) else value
            if not isinstance(value, dict):
                raise ValueError("expected a mapping")
            return value
        if isinstance(default, list) or (default is None and name.startswith("gamma_")):
            if isinstance(value, str):
                text = value.strip()
                value = json.loads(text) if text.startswith("[") else [v for v in text.split(",") if v.strip()]
            if not isinstance(value, list):
                raise ValueError("expected a list")
            return [kind(v.strip() if isinstance(v, str) else v) for v in value]
        if isinstance(default, int) or kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return data


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    values = {}
    for source in (file_values, overrides):
        unknown = sorted(set(source) - set(FIELDS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key, val in source.items():
            values[key] = _coerce(key, val)
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcl", description="Rank-weighted multi-field contrastive retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "write a synthetic queries/corpus/triplets dataset",
        "split": "assign queries (80/20) and documents (50/50) to buckets",
        "train": "train encoders and write a checkpoint plus history CSVs",
        "eval": "evaluate a checkpoint on the four splits",
        "stw": "tabulate score-to-weight curves as CSV",
        "search": "print the top hits of one query",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="JSON or YAML file with RunConfig keys")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            default = _default_of(f)
            text = f"{f.metadata['help']} (default: {default!r})"
            if isinstance(default, bool):
                p.add_argument(flag, dest=f.name, nargs="?", const="true", default=argparse.SUPPRESS, metavar="BOOL", help=text)
            else:
                p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar=f.name.upper(), help=text)
    return parser


# ----------------------------------------------------------------- helpers


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _schema(cfg: RunConfig, dense_dims: dict[str, int]) -> FieldSchema:
    def parse(items, side):
        out = []
        for item in items:
            name, _, kind = item.partition(":")
            if not kind:
                kind = "dense" if side == "rhs" and name in dense_dims else "text"
            out.append((name, kind))
        return out

    try:
        return FieldSchema(parse(cfg.lhs_fields, "lhs"), parse(cfg.rhs_fields, "rhs"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_schema(schema: FieldSchema, queries, corpus, dense_dims: dict[str, int]) -> None:
    """Every schema field must exist in the data with a matching kind."""
    q_fields = set(queries[0].fields) if queries else set()
    d_fields = set(corpus[0].fields) if corpus else set()
    for name, kind in schema.lhs_fields:
        if kind != "text":
            raise ConfigError(f"query field {name!r}: only text query fields are supported")
        if queries and name not in q_fields:
            raise ConfigError(f"query field {name!r} not in queries (have {sorted(q_fields)})")
    for name, kind in schema.rhs_fields:
        if corpus and name not in d_fields:
            raise ConfigError(f"document field {name!r} not in corpus (have {sorted(d_fields)})")
        if (kind == "dense") != (name in dense_dims):
            raise ConfigError(f"document field {name!r} is declared {kind} but the corpus disagrees")


def _stw(cfg: RunConfig, s_max: float) -> StwFunction:
    try:
        return StwFunction(cfg.stw, s_max=s_max, c=cfg.stw_c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _gamma(cfg: RunConfig, schema: FieldSchema) -> FieldWeights:
    try:
        gl = cfg.gamma_l if cfg.gamma_l is not None else [1.0 / schema.m] * schema.m
        gr = cfg.gamma_r if cfg.gamma_r is not None else [1.0 / schema.n] * schema.n
        if len(gl) != schema.m or len(gr) != schema.n:
            raise ValueError(f"gamma lengths ({len(gl)}, {len(gr)}) do not match fields ({schema.m}, {schema.n})")
        return FieldWeights(tuple(gl), tuple(gr))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _profile(cfg: RunConfig, training: FieldWeights, schema: FieldSchema) -> dict[str, FieldWeights]:
    try:
        resolved = eval_gamma_profile(cfg.gamma_profile, training)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"gamma_profile: {exc}") from None
    for split, g in resolved.items():
        if len(g.gamma_l) != schema.m or len(g.gamma_r) != schema.n:
            raise ConfigError(f"gamma_profile[{split}] does not match the field schema")
    return resolved


def _eval_config(cfg: RunConfig) -> EvalConfig:
    if cfg.metric_depth not in ("run", "judged"):
        raise ConfigError(f"metric_depth must be 'run' or 'judged', got {cfg.metric_depth!r}")
    if cfg.k_hits < 1 or cfg.max_eval_queries < 1 or any(k < 1 for k in cfg.ndcg_k):
        raise ConfigError("k_hits, max_eval_queries and ndcg_k must be >= 1")
    if not 0 < cfg.rbp_p < 1:
        raise ConfigError("rbp_p must be in (0, 1)")
    return EvalConfig(tuple(cfg.ndcg_k), cfg.rbp_p, cfg.k_hits, cfg.max_eval_queries, cfg.seed, cfg.metric_depth)


def _load_dataset(cfg: RunConfig) -> Dataset:
    paths = {n: _require_file(cfg.path(n), f"{n} file") for n in ("queries", "corpus", "triplets")}
    queries = load_queries(paths["queries"])
    corpus, dense_dims = load_corpus(paths["corpus"])
    triplets, s_max = load_triplets(paths["triplets"])
    ds = Dataset(queries, corpus, triplets, s_max=s_max, dense_dims=dense_dims)
    for t in triplets:
        if t.query_id not in ds.query_index:
            raise DataValidationError(f"triplet references unknown query_id {t.query_id!r}", path=str(paths["triplets"]))
        if t.doc_id not in ds.doc_index:
            raise DataValidationError(f"triplet references unknown doc_id {t.doc_id!r}", path=str(paths["triplets"]))
    return ds


def _check_split(assignment, ds: Dataset, path: Path) -> None:
    for qid in ds.query_index:
        if qid not in assignment.query_split:
            raise DataValidationError(f"query {qid!r} has no split assignment", path=str(path))
    for did in ds.doc_index:
        if did not in assignment.doc_split:
            raise DataValidationError(f"document {did!r} has no split assignment", path=str(path))


def _load_model(cfg: RunConfig) -> Model:
    path = _require_file(cfg.path("checkpoint"), "checkpoint")
    try:
        return Model.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None


def _check_model(model: Model, ds_dense: dict[str, int]) -> None:
    for (side, name), key in model.field_encoder.items():
        enc = model.encoders[key]
        if enc.kind == "dense" and ds_dense.get(name) != enc.in_dim:
            raise ConfigError(f"checkpoint field {name!r} expects {enc.in_dim} features, corpus has {ds_dense.get(name)}")


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    sc = SynthConfig(
        n_queries=cfg.n_queries,
        docs_per_query=cfg.docs_per_query,
        vocab_size=cfg.vocab_size,
        n_clusters=cfg.n_clusters,
        dense_dim=cfg.dense_dim,
        seed=cfg.seed,
        docs_per_cluster=cfg.docs_per_cluster,
        fine_dim=cfg.fine_dim,
        image_noise=cfg.image_noise,
    )
    try:
        sc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = synth_dataset(sc)
    write_queries(cfg.path("queries"), ds.queries)
    write_corpus(cfg.path("corpus"), ds.corpus, ds.dense_dims)
    write_triplets(cfg.path("triplets"), ds.triplets, ds.s_max)
    print(f"queries={len(ds.queries)} documents={len(ds.corpus)} triplets={len(ds.triplets)}")
    return 0


def cmd_split(cfg: RunConfig) -> int:
    qpath = _require_file(cfg.path("queries"), "queries file")
    dpath = _require_file(cfg.path("corpus"), "corpus file")
    try:
        assignment = quadruple_split(read_ids(qpath, "gcl-queries", "query_id"), read_ids(dpath, "gcl-corpus", "doc_id"), cfg.seed)
    except DataValidationError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_split(cfg.path("split"), assignment)
    counts = {b: len(assignment.queries_in(b)) for b in ("train", "eval")}
    counts.update({b: len(assignment.docs_in(b)) for b in ("corpus1", "corpus2")})
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _prepare(cfg: RunConfig):
    ds = _load_dataset(cfg)
    split_path = _require_file(cfg.path("split"), "split file")
    assignment = load_split(split_path)
    _check_split(assignment, ds, split_path)
    return ds, assignment


def cmd_train(cfg: RunConfig) -> int:
    ds, assignment = _prepare(cfg)
    schema = _schema(cfg, ds.dense_dims)
    _check_schema(schema, ds.queries, ds.corpus, ds.dense_dims)
    gamma = _gamma(cfg, schema)
    profile = _profile(cfg, gamma, schema)
    eval_cfg = _eval_config(cfg)
    tc = TrainConfig(
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        lr=cfg.lr,
        optimizer=cfg.optimizer,
        tau=cfg.tau,
        stw=_stw(cfg, ds.s_max),
        gamma=gamma,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        embed_dim=cfg.embed_dim,
        hash_buckets=cfg.hash_buckets,
        tie_text=cfg.tie_text,
        pairwise_scale=cfg.pairwise_scale,
        unweighted_reference=cfg.unweighted_reference,
    )
    try:
        tc.validate()
        if cfg.embed_dim < 1 or cfg.hash_buckets < 1:
            raise ValueError("embed_dim and hash_buckets must be >= 1")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def report(state, rep):
        log.info("epoch %d: mean loss %.6f", state.epoch + 1, state.mean_loss)

    state, history = train(ds, assignment, tc, schema, eval_cfg, profile, on_epoch=report)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, cfg.path("checkpoint"))
    history.write_steps_csv(out / "history_steps.csv")
    history.write_evals_csv(out / "history_eval.csv")
    print(f"steps={state.step} final_loss={history.steps[-1][1]!r} checkpoint={cfg.path('checkpoint')}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    ds, assignment = _prepare(cfg)
    _check_schema(model.schema, ds.queries, ds.corpus, ds.dense_dims)
    _check_model(model, ds.dense_dims)
    schema = model.schema
    profile = _profile(cfg, _gamma(cfg, schema), schema)
    rep = evaluate_splits(model, ds, assignment, profile, _eval_config(cfg), keep_runs=cfg.trec_run)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "metrics.csv")
    rep.to_json(out / "metrics.json")
    if cfg.trec_run:
        rep.write_trec(out / "run.trec")
    sys.stdout.write(rep.to_csv())
    return 0


def cmd_stw(cfg: RunConfig) -> int:
    if cfg.s_step <= 0 or cfg.s_min > cfg.s_max:
        raise ConfigError("need s_step > 0 and s_min <= s_max")
    n = int((cfg.s_max - cfg.s_min) / cfg.s_step + 1e-9) + 1
    s_values = [cfg.s_min + i * cfg.s_step for i in range(n)]
    try:
        rows = stw_curves(cfg.stw_kinds, s_values, s_max=cfg.s_max, c=cfg.stw_c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    lines = ["function,s,w"] + [f"{kind},{s!r},{w!r}" for kind, s, w in rows]
    text = "\n".join(lines) + "\n"
    if cfg.output:
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_search(cfg: RunConfig) -> int:
    if cfg.query is None:
        raise ConfigError("search needs --query")
    if cfg.k < 1:
        raise ConfigError("k must be >= 1")
    model = _load_model(cfg)
    corpus, dense_dims = load_corpus(_require_file(cfg.path("corpus"), "corpus file"))
    if not corpus:
        raise DataValidationError("corpus is empty", path=str(cfg.path("corpus")))
    schema = model.schema
    query = QueryRecord("query", {name: cfg.query for name, _ in schema.lhs_fields})
    _check_schema(schema, [query], corpus, dense_dims)
    _check_model(model, dense_dims)
    gamma = _gamma(cfg, schema)
    q_emb = model.embed("lhs", [query], gamma.gamma_l)
    d_emb = model.embed("rhs", corpus, gamma.gamma_r)
    (run,) = search_many(q_emb, ["query"], d_emb, [d.doc_id for d in corpus], cfg.k)
    for rank, (doc_id, score) in enumerate(run.hits, start=1):
        print(f"{rank}\t{doc_id}\t{score:.6f}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "stw": cmd_stw,
    "search": cmd_search,
}


def _threads() -> int | None:
    raw = os.environ.get("GCL_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"GCL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        file_values = load_config_file(config_path) if config_path else {}
        cfg = build_config(file_values, args)
        logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING, format="%(name)s: %(message)s")
        with threadpool_limits(limits=_threads()):
            return HANDLERS[command](cfg)
    except GCLError as exc:
        print(f"gcl {command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"gcl {command}: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
