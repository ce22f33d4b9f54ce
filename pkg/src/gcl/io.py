"""JSONL readers and writers for triplets, corpus, queries and splits.

Every file starts with a header object naming its format and version::

    {"format": "gcl-triplets", "version": 1, "s_max": 100}
    {"format": "gcl-corpus", "version": 1, "dense_dims": {"image_vec": 32}}
    {"format": "gcl-queries", "version": 1}
    {"format": "gcl-split", "version": 1, "seed": 7}

followed by one record per line. Errors raise DataValidationError with the
1-based line number.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .dataset import CorpusRecord, QueryRecord, SplitAssignment, Triplet
from .errors import DataValidationError

VERSION = 1
QUERY_TEXT_FIELD = "text"


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def _write(path, header: dict, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump(header) + "\n")
        for row in rows:
            fh.write(_dump(row) + "\n")


def _read(path, fmt: str) -> tuple[dict, list[tuple[int, dict]]]:
    path = Path(path)
    if not path.exists():
        raise DataValidationError("file not found", path=str(path))
    raw = path.read_bytes().decode("utf-8")
    lines = raw.split("\n")
    records = []
    header = None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"malformed JSON: {exc.msg}", line=lineno, path=str(path)) from None
        if not isinstance(obj, dict):
            raise DataValidationError("expected a JSON object", line=lineno, path=str(path))
        if header is None:
            if obj.get("format") != fmt:
                raise DataValidationError(f"header format must be {fmt!r}, got {obj.get('format')!r}", line=lineno, path=str(path))
            if obj.get("version") != VERSION:
                raise DataValidationError(f"unsupported version {obj.get('version')!r}", line=lineno, path=str(path))
            header = obj
            continue
        records.append((lineno, obj))
    if header is None:
        raise DataValidationError("missing header line", path=str(path))
    return header, records


def _need(obj: dict, key: str, types, lineno: int, path) -> object:
    if key not in obj:
        raise DataValidationError(f"missing {key!r}", line=lineno, path=str(path))
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, types):
        raise DataValidationError(f"{key!r} has wrong type {type(val).__name__}", line=lineno, path=str(path))
    return val


def write_triplets(path, triplets, s_max: float) -> None:
    header = {"format": "gcl-triplets", "version": VERSION, "s_max": s_max}
    _write(path, header, ({"query_id": t.query_id, "doc_id": t.doc_id, "score": t.score} for t in triplets))


def load_triplets(path) -> tuple[list[Triplet], float]:
    header, records = _read(path, "gcl-triplets")
    s_max = header.get("s_max")
    if isinstance(s_max, bool) or not isinstance(s_max, (int, float)) or not s_max > 0:
        raise DataValidationError(f"header s_max must be a positive number, got {s_max!r}", line=1, path=str(path))
    seen: dict[tuple[str, str], int] = {}
    out = []
    for lineno, obj in records:
        qid = _need(obj, "query_id", str, lineno, path)
        did = _need(obj, "doc_id", str, lineno, path)
        score = _need(obj, "score", (int, float), lineno, path)
        if not math.isfinite(score) or not 1 <= score <= s_max:
            raise DataValidationError(f"score {score} outside [1, {s_max}]", line=lineno, path=str(path))
        key = (qid, did)
        if key in seen:
            raise DataValidationError(f"duplicate pair {key} (first seen on line {seen[key]})", line=lineno, path=str(path))
        seen[key] = lineno
        out.append(Triplet(qid, did, score))
    return out, s_max


def write_corpus(path, corpus, dense_dims: dict[str, int]) -> None:
    header = {"format": "gcl-corpus", "version": VERSION, "dense_dims": dict(dense_dims)}

    def rows():
        for rec in corpus:
            row = {"doc_id": rec.doc_id}
            for name, val in rec.fields.items():
                row[name] = [float(x) for x in val] if name in dense_dims else val
            yield row

    _write(path, header, rows())


def load_corpus(path) -> tuple[list[CorpusRecord], dict[str, int]]:
    header, records = _read(path, "gcl-corpus")
    dense_dims = header.get("dense_dims", {})
    if not isinstance(dense_dims, dict) or not all(isinstance(v, int) and v > 0 for v in dense_dims.values()):
        raise DataValidationError("header dense_dims must map field names to positive ints", line=1, path=str(path))
    out, seen = [], {}
    field_names = None
    for lineno, obj in records:
        did = _need(obj, "doc_id", str, lineno, path)
        if did in seen:
            raise DataValidationError(f"duplicate doc_id {did!r} (first on line {seen[did]})", line=lineno, path=str(path))
        seen[did] = lineno
        fields = {}
        for name, val in obj.items():
            if name == "doc_id":
                continue
            if name in dense_dims:
                if not isinstance(val, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
                    raise DataValidationError(f"{name!r} must be a list of numbers", line=lineno, path=str(path))
                if len(val) != dense_dims[name]:
                    raise DataValidationError(
                        f"{name!r} has {len(val)} values, header declares {dense_dims[name]}", line=lineno, path=str(path)
                    )
                fields[name] = np.array(val, dtype=np.float64)
            elif isinstance(val, str):
                fields[name] = val
            else:
                raise DataValidationError(f"field {name!r} must be a string or a declared dense vector", line=lineno, path=str(path))
        names = sorted(fields)
        if field_names is None:
            field_names = names
        elif names != field_names:
            raise DataValidationError(f"fields {names} differ from earlier records {field_names}", line=lineno, path=str(path))
        out.append(CorpusRecord(did, fields))
    return out, dict(dense_dims)


def write_queries(path, queries) -> None:
    header = {"format": "gcl-queries", "version": VERSION}
    _write(path, header, ({"query_id": q.query_id, **q.fields} for q in queries))


def load_queries(path) -> list[QueryRecord]:
    _, records = _read(path, "gcl-queries")
    out, seen = [], {}
    for lineno, obj in records:
        qid = _need(obj, "query_id", str, lineno, path)
        _need(obj, QUERY_TEXT_FIELD, str, lineno, path)
        if qid in seen:
            raise DataValidationError(f"duplicate query_id {qid!r} (first on line {seen[qid]})", line=lineno, path=str(path))
        seen[qid] = lineno
        fields = {k: v for k, v in obj.items() if k != "query_id"}
        for k, v in fields.items():
            if not isinstance(v, str):
                raise DataValidationError(f"query field {k!r} must be a string", line=lineno, path=str(path))
        out.append(QueryRecord(qid, fields))
    return out


def write_split(path, assignment: SplitAssignment) -> None:
    header = {"format": "gcl-split", "version": VERSION, "seed": assignment.seed}
    rows = [{"id": q, "kind": "query", "bucket": b} for q, b in sorted(assignment.query_split.items())]
    rows += [{"id": d, "kind": "doc", "bucket": b} for d, b in sorted(assignment.doc_split.items())]
    _write(path, header, rows)


def load_split(path) -> SplitAssignment:
    header, records = _read(path, "gcl-split")
    seed = header.get("seed")
    if not isinstance(seed, int):
        raise DataValidationError("header seed must be an integer", line=1, path=str(path))
    allowed = {"query": ("train", "eval"), "doc": ("corpus1", "corpus2")}
    maps: dict[str, dict[str, str]] = {"query": {}, "doc": {}}
    for lineno, obj in records:
        rid = _need(obj, "id", str, lineno, path)
        kind = _need(obj, "kind", str, lineno, path)
        bucket = _need(obj, "bucket", str, lineno, path)
        if kind not in allowed:
            raise DataValidationError(f"kind must be 'query' or 'doc', got {kind!r}", line=lineno, path=str(path))
        if bucket not in allowed[kind]:
            raise DataValidationError(f"bucket {bucket!r} invalid for {kind}", line=lineno, path=str(path))
        if rid in maps[kind]:
            raise DataValidationError(f"duplicate {kind} id {rid!r}", line=lineno, path=str(path))
        maps[kind][rid] = bucket
    return SplitAssignment(maps["query"], maps["doc"], seed)


def read_ids(path, fmt: str, key: str) -> list[str]:
    """Record ids of a queries/corpus file in file order, duplicates kept."""
    _, records = _read(path, fmt)
    return [_need(obj, key, str, lineno, path) for lineno, obj in records]
