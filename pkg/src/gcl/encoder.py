"""Small trainable encoders with exact gradients.

Text fields use a hashed bag-of-tokens: every token is hashed into one of
``B`` buckets, the bucket embeddings are averaged, and an affine map is
applied. Dense fields (precomputed image feature vectors) go through a
single affine map. Both return raw, unnormalized ``N x k`` embeddings.

Token hashing
-------------
``bucket(token) = u64_le(blake2b(seed_le8 + utf8(token), digest=8)) % B``
where ``seed_le8`` is the hash seed as 8 little-endian bytes. This depends
only on the token bytes and the seed.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
import zipfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .loss import normalize_rows
from .rng import derive_seed

EMPTY_TOKEN = "<empty>"
DEFAULT_BUCKETS = 65_536
DEFAULT_DIM = 64
CHECKPOINT_FORMAT = "gcl-checkpoint"
CHECKPOINT_VERSION = 1


def _strip_punct(tok: str) -> str:
    start, end = 0, len(tok)
    while start < end and unicodedata.category(tok[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(tok[end - 1]).startswith("P"):
        end -= 1
    return tok[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, strip edge punctuation."""
    tokens = [_strip_punct(t) for t in text.lower().split()]
    tokens = [t for t in tokens if t]
    return tokens or [EMPTY_TOKEN]


def token_bucket(token: str, hash_seed: int, buckets: int) -> int:
    key = (hash_seed & ((1 << 64) - 1)).to_bytes(8, "little") + token.encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


@dataclass
class TextBatch:
    """Pre-hashed token buckets for ``n`` samples in CSR-like layout."""

    buckets: np.ndarray  # flat bucket ids
    rows: np.ndarray  # sample index of each flat entry
    counts: np.ndarray  # tokens per sample

    @property
    def n(self) -> int:
        return len(self.counts)

    @classmethod
    def from_bucket_lists(cls, lists: Sequence[np.ndarray]) -> "TextBatch":
        counts = np.array([len(b) for b in lists], dtype=np.int64)
        if np.any(counts == 0):
            raise ValueError("every text sample needs at least one token")
        flat = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, dtype=np.int64)
        rows = np.repeat(np.arange(len(lists)), counts)
        return cls(flat, rows, counts)

    @classmethod
    def from_texts(cls, texts: Sequence[str | Sequence[str]], hash_seed: int, buckets: int) -> "TextBatch":
        lists = []
        for t in texts:
            if isinstance(t, str):
                lists.append(_text_buckets(t, hash_seed, buckets))
            else:
                toks = list(t) or [EMPTY_TOKEN]
                lists.append(np.array([token_bucket(tok, hash_seed, buckets) for tok in toks], dtype=np.int64))
        return cls.from_bucket_lists(lists)


@lru_cache(maxsize=1 << 20)
def _text_buckets(text: str, hash_seed: int, buckets: int) -> np.ndarray:
    arr = np.array([token_bucket(tok, hash_seed, buckets) for tok in tokenize(text)], dtype=np.int64)
    arr.flags.writeable = False
    return arr


@dataclass
class TextEncoderParams:
    table: np.ndarray  # B x k
    projection: np.ndarray  # k x k
    bias: np.ndarray  # k
    hash_seed: int = 0
    kind: str = field(default="text", init=False)

    @property
    def buckets(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"table": self.table, "projection": self.projection, "bias": self.bias}

    def batch(self, texts) -> TextBatch:
        return TextBatch.from_texts(texts, self.hash_seed, self.buckets)


@dataclass
class DenseEncoderParams:
    projection: np.ndarray  # F x k
    bias: np.ndarray  # k
    kind: str = field(default="dense", init=False)

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"projection": self.projection, "bias": self.bias}


def _offsets(counts: np.ndarray) -> np.ndarray:
    return np.concatenate(([0], np.cumsum(counts)[:-1]))


def _mean_tokens(table: np.ndarray, batch: TextBatch) -> np.ndarray:
    # rows are contiguous and non-empty, so a segmented sum suffices
    sums = np.add.reduceat(table[batch.buckets], _offsets(batch.counts), axis=0)
    return sums / batch.counts[:, None]


def _scatter_rows(shape, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``out[index[i]] += values[i]`` via a sort and segmented sum."""
    out = np.zeros(shape)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def encode_text(params: TextEncoderParams, batch) -> np.ndarray:
    if not isinstance(batch, TextBatch):
        batch = params.batch(batch)
    return _mean_tokens(params.table, batch) @ params.projection + params.bias


def _dense_matrix(params: DenseEncoderParams, batch, ids=None) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        if ids is not None and x.ndim == 2:
            raise ValueError(f"record {ids[0]!r}: expected {params.in_dim} features, got {x.shape[1]}")
        if x.ndim == 2:
            raise ValueError(f"expected {params.in_dim} features per row, got {x.shape[1]}")
        raise ValueError("dense batch must be a list of equal-length vectors")
    return x


def encode_dense(params: DenseEncoderParams, batch, ids: Sequence[str] | None = None) -> np.ndarray:
    if ids is not None:
        for rid, vec in zip(ids, batch):
            if len(vec) != params.in_dim:
                raise ValueError(f"record {rid!r}: expected {params.in_dim} features, got {len(vec)}")
    x = _dense_matrix(params, batch, ids)
    return x @ params.projection + params.bias


def encode(params, batch) -> np.ndarray:
    if params.kind == "text":
        return encode_text(params, batch)
    return encode_dense(params, batch)


def encoder_backward(params, batch, grad_out) -> dict[str, np.ndarray]:
    """Exact parameter gradients of the encoder map given d(loss)/d(output)."""
    g = np.asarray(grad_out, dtype=np.float64)
    if params.kind == "text":
        if not isinstance(batch, TextBatch):
            batch = params.batch(batch)
        if g.shape != (batch.n, params.dim):
            raise ValueError(f"grad_out shape {g.shape} != ({batch.n}, {params.dim})")
        hidden = _mean_tokens(params.table, batch)
        grad_hidden = g @ params.projection.T
        grad_table = _scatter_rows(params.table.shape, batch.buckets, grad_hidden[batch.rows] / batch.counts[batch.rows, None])
        return {"table": grad_table, "projection": hidden.T @ g, "bias": g.sum(axis=0)}
    x = _dense_matrix(params, batch)
    if g.shape != (x.shape[0], params.dim):
        raise ValueError(f"grad_out shape {g.shape} != ({x.shape[0]}, {params.dim})")
    return {"projection": x.T @ g, "bias": g.sum(axis=0)}


def init_text_params(seed: int, buckets: int = DEFAULT_BUCKETS, dim: int = DEFAULT_DIM, hash_seed: int | None = None):
    if buckets < 2:
        raise ValueError("need at least 2 hash buckets")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    table = rng.uniform(-bound, bound, size=(buckets, dim))
    projection = rng.uniform(-bound, bound, size=(dim, dim))
    return TextEncoderParams(table, projection, np.zeros(dim), hash_seed=seed if hash_seed is None else hash_seed)


def init_dense_params(seed: int, in_dim: int, dim: int = DEFAULT_DIM):
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    return DenseEncoderParams(rng.uniform(-bound, bound, size=(in_dim, dim)), np.zeros(dim))


@dataclass
class FieldSchema:
    """Ordered ``(name, kind)`` field lists for each side, kind in {text, dense}."""

    lhs_fields: list[tuple[str, str]]
    rhs_fields: list[tuple[str, str]]

    def __post_init__(self):
        self.lhs_fields = [tuple(f) for f in self.lhs_fields]
        self.rhs_fields = [tuple(f) for f in self.rhs_fields]
        for side, fields in (("lhs", self.lhs_fields), ("rhs", self.rhs_fields)):
            if not fields:
                raise ValueError(f"{side} needs at least one field")
            names = [n for n, _ in fields]
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate field names on {side}: {names}")
            for name, kind in fields:
                if kind not in ("text", "dense"):
                    raise ValueError(f"field {name!r} has unknown kind {kind!r}")

    @property
    def m(self) -> int:
        return len(self.lhs_fields)

    @property
    def n(self) -> int:
        return len(self.rhs_fields)

    def to_dict(self):
        return {"lhs": [list(f) for f in self.lhs_fields], "rhs": [list(f) for f in self.rhs_fields]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lhs"], d["rhs"])


class Model:
    """One encoder per field (``E_j``), optionally tying text encoders.

    ``field_encoder[(side, name)]`` names the encoder used for a field;
    with ``tie_text`` the first LHS text field and the first RHS text field
    share one parameter set.
    """

    def __init__(self, schema: FieldSchema, encoders: dict, field_encoder: dict):
        self.schema = schema
        self.encoders = encoders
        self.field_encoder = field_encoder

    @classmethod
    def init(
        cls,
        schema: FieldSchema,
        seed: int,
        dense_dims: dict[str, int] | None = None,
        dim: int = DEFAULT_DIM,
        buckets: int = DEFAULT_BUCKETS,
        tie_text: bool = False,
    ) -> "Model":
        dense_dims = dense_dims or {}
        encoders: dict = {}
        field_encoder: dict = {}
        lhs_text = next((f"lhs.{n}" for n, k in schema.lhs_fields if k == "text"), None)
        tied = False
        for side, fields in (("lhs", schema.lhs_fields), ("rhs", schema.rhs_fields)):
            for name, kind in fields:
                key = f"{side}.{name}"
                sub = derive_seed(seed, "encoder", key)
                if kind == "text":
                    if tie_text and side == "rhs" and lhs_text is not None and not tied:
                        field_encoder[(side, name)] = lhs_text
                        tied = True
                        continue
                    encoders[key] = init_text_params(sub, buckets, dim, hash_seed=derive_seed(seed, "hash"))
                else:
                    if name not in dense_dims:
                        raise ValueError(f"dense field {name!r} needs a declared feature dimension")
                    encoders[key] = init_dense_params(sub, dense_dims[name], dim)
                field_encoder[(side, name)] = key
        return cls(schema, encoders, field_encoder)

    @property
    def dim(self) -> int:
        return next(iter(self.encoders.values())).dim

    def encoder_for(self, side: str, name: str):
        return self.encoders[self.field_encoder[(side, name)]]

    def field_input(self, side: str, name: str, records):
        """Encoder input for one field of ``records`` (TextBatch or feature matrix)."""
        enc = self.encoder_for(side, name)
        try:
            values = [r.fields[name] for r in records]
        except KeyError:
            raise KeyError(f"record is missing field {name!r}") from None
        if enc.kind == "text":
            return enc.batch(values)
        ids = [getattr(r, "doc_id", None) or getattr(r, "query_id", "?") for r in records]
        for rid, v in zip(ids, values):
            if len(v) != enc.in_dim:
                raise ValueError(f"record {rid!r}: field {name!r} has {len(v)} features, expected {enc.in_dim}")
        return np.asarray(values, dtype=np.float64).reshape(len(values), enc.in_dim)

    def fields(self, side: str) -> list[tuple[str, str]]:
        return self.schema.lhs_fields if side == "lhs" else self.schema.rhs_fields

    def embed(self, side: str, records, gamma: Sequence[float], batch_size: int = 4096) -> np.ndarray:
        """Fused retrieval embeddings: gamma-weighted sum of normalized field embeddings."""
        fields = self.fields(side)
        if len(gamma) != len(fields):
            raise ValueError(f"{len(gamma)} gamma weights for {len(fields)} {side} fields")
        out = np.zeros((len(records), self.dim))
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            fused = np.zeros((len(chunk), self.dim))
            for g, (name, _) in zip(gamma, fields):
                if g == 0:
                    continue
                raw = encode(self.encoder_for(side, name), self.field_input(side, name, chunk))
                fused += g * normalize_rows(raw)
            out[start : start + len(chunk)] = fused
        return out

    def flat_params(self) -> dict[str, np.ndarray]:
        return {f"{enc}/{k}": v for enc, p in self.encoders.items() for k, v in p.arrays().items()}

    def copy(self) -> "Model":
        encoders = {}
        for key, p in self.encoders.items():
            if p.kind == "text":
                encoders[key] = TextEncoderParams(p.table.copy(), p.projection.copy(), p.bias.copy(), p.hash_seed)
            else:
                encoders[key] = DenseEncoderParams(p.projection.copy(), p.bias.copy())
        return Model(self.schema, encoders, dict(self.field_encoder))

    def save(self, path: str | Path) -> None:
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "schema": self.schema.to_dict(),
            "field_encoder": [[s, n, e] for (s, n), e in sorted(self.field_encoder.items())],
            "encoders": {
                key: {
                    "kind": p.kind,
                    "hash_seed": getattr(p, "hash_seed", None),
                    "shapes": {k: list(v.shape) for k, v in p.arrays().items()},
                }
                for key, p in self.encoders.items()
            },
        }
        arrays = {f"{key}/{k}": v for key, p in self.encoders.items() for k, v in p.arrays().items()}
        arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
        # np.savez stamps zip entries with the wall clock; fixed timestamps keep files byte-stable
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
                with zf.open(info, "w", force_zip64=True) as fh:
                    np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        with np.load(path, allow_pickle=False) as data:
            if "__header__" not in data.files:
                raise ValueError(f"{path}: not a checkpoint (missing header)")
            header = json.loads(str(data["__header__"]))
            if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(
                    f"{path}: unsupported checkpoint format {header.get('format')!r} version {header.get('version')!r}"
                )
            encoders = {}
            for key, meta in header["encoders"].items():
                arrs = {}
                for name, shape in meta["shapes"].items():
                    arr = data[f"{key}/{name}"]
                    if list(arr.shape) != shape:
                        raise ValueError(f"{path}: {key}/{name} has shape {arr.shape}, header says {shape}")
                    arrs[name] = arr.astype(np.float64)
                if meta["kind"] == "text":
                    encoders[key] = TextEncoderParams(arrs["table"], arrs["projection"], arrs["bias"], meta["hash_seed"])
                else:
                    encoders[key] = DenseEncoderParams(arrs["projection"], arrs["bias"])
        schema = FieldSchema.from_dict(header["schema"])
        field_encoder = {(s, n): e for s, n, e in header["field_encoder"]}
        return cls(schema, encoders, field_encoder)
