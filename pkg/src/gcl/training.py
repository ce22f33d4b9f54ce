"""End-to-end GCL training on triplet data.

One step: sample ``N`` triplets, encode every field with its own encoder,
normalize, compute the multi-field weighted loss (or the single-field loss
when each side has one field), back-propagate into the encoders and apply
an optimizer update.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, SplitAssignment, Triplet, apply_stw, filter_triplets
from .encoder import DEFAULT_BUCKETS, DEFAULT_DIM, FieldSchema, Model, encode, encoder_backward
from .errors import NumericalError
from .evaluate import EvalConfig, MetricsReport, evaluate_splits
from .loss import single_field_step
from .multifield import FieldWeights, multifield_step
from .rng import derive_seed, shuffle
from .stw import StwFunction

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    tau: float = 0.07
    stw: StwFunction = field(default_factory=lambda: StwFunction("inverse"))
    gamma: FieldWeights | None = None
    seed: int = 0
    eval_every: int = 1
    embed_dim: int = DEFAULT_DIM
    hash_buckets: int = DEFAULT_BUCKETS
    tie_text: bool = False
    pairwise_scale: float = 1.0
    unweighted_reference: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for key, g in grads.items():
            params[key] -= self.lr * g

    def state(self) -> dict:
        return {}


class Adam:
    """Adam with bias correction; moments allocated lazily per parameter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(config.lr, config.beta1, config.beta2, config.adam_eps)


@dataclass
class TrainState:
    model: Model
    optimizer: object
    step: int = 0
    epoch: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_count if self.loss_count else float("nan")


@dataclass
class History:
    steps: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, str, str, float | None]] = field(default_factory=list)
    reports: dict[int, MetricsReport] = field(default_factory=dict, repr=False)

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for step, loss in self.steps:
                w.writerow([step, repr(loss)])

    def write_evals_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "metric", "value"])
            for epoch, split, metric, value in self.evals:
                w.writerow([epoch, split, metric, "" if value is None else repr(value)])


def sample_batches(triplets: Sequence, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffle indices with ``SplitMix64(seed ^ epoch)`` and cut consecutive batches.

    A trailing batch with fewer than two rows is dropped.
    """
    n = len(triplets)
    if n == 0:
        raise ValueError("empty training set")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    order = shuffle(list(range(n)), seed ^ epoch)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches[-1]) < 2:
        batches.pop()
    return batches


def init_state(dataset: Dataset, schema: FieldSchema, config: TrainConfig) -> TrainState:
    config.validate()
    model = Model.init(
        schema,
        derive_seed(config.seed, "init"),
        dense_dims=dataset.dense_dims,
        dim=config.embed_dim,
        buckets=config.hash_buckets,
        tie_text=config.tie_text,
    )
    return TrainState(model, make_optimizer(config))


def _batch_ids(batch: Sequence[Triplet]) -> str:
    ids = ", ".join(f"({t.query_id},{t.doc_id})" for t in batch[:8])
    return ids + ("" if len(batch) <= 8 else f" ... (+{len(batch) - 8})")


def _check_finite(name: str, arr: np.ndarray, batch: Sequence[Triplet]) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {name} on batch [{_batch_ids(batch)}]")


def batch_loss_and_grads(model: Model, batch: Sequence[Triplet], dataset: Dataset, config: TrainConfig, weights=None):
    """Loss, per-term breakdown and parameter gradients for one batch."""
    schema = model.schema
    gamma = config.gamma or FieldWeights.uniform(schema.m, schema.n)
    if weights is None:
        weights = np.array([t.weight if t.weight is not None else config.stw(t.score) for t in batch])
    queries = [dataset.query_index[t.query_id] for t in batch]
    docs = [dataset.doc_index[t.doc_id] for t in batch]
    lhs_in = [model.field_input("lhs", name, queries) for name, _ in schema.lhs_fields]
    rhs_in = [model.field_input("rhs", name, docs) for name, _ in schema.rhs_fields]
    lhs_raw = [encode(model.encoder_for("lhs", name), x) for (name, _), x in zip(schema.lhs_fields, lhs_in)]
    rhs_raw = [encode(model.encoder_for("rhs", name), x) for (name, _), x in zip(schema.rhs_fields, rhs_in)]

    if schema.m == 1 and schema.n == 1:
        loss, gq, gd = single_field_step(lhs_raw[0], rhs_raw[0], weights, config.tau, reference=config.unweighted_reference)
        terms = {"single": loss}
        grad_lhs, grad_rhs = [gq], [gd]
    else:
        res = multifield_step(
            lhs_raw,
            rhs_raw,
            gamma,
            weights,
            config.tau,
            pairwise_scale=config.pairwise_scale,
            lhs_names=[n for n, _ in schema.lhs_fields],
            rhs_names=[n for n, _ in schema.rhs_fields],
            reference=config.unweighted_reference,
        )
        loss, terms, grad_lhs, grad_rhs = res.loss, res.terms, res.grad_lhs, res.grad_rhs

    grads: dict[str, np.ndarray] = {}
    for side, fields, inputs, field_grads in (
        ("lhs", schema.lhs_fields, lhs_in, grad_lhs),
        ("rhs", schema.rhs_fields, rhs_in, grad_rhs),
    ):
        for (name, _), x, g in zip(fields, inputs, field_grads):
            key = model.field_encoder[(side, name)]
            for pname, pg in encoder_backward(model.encoders[key], x, g).items():
                full = f"{key}/{pname}"
                grads[full] = grads[full] + pg if full in grads else pg
    return loss, terms, grads


def train_step(
    state: TrainState, batch: Sequence[Triplet], dataset: Dataset, config: TrainConfig, weights=None
) -> tuple[TrainState, float]:
    """One optimizer update; aborts with NumericalError on NaN/Inf."""
    try:
        loss, _, grads = batch_loss_and_grads(state.model, batch, dataset, config, weights=weights)
    except NumericalError as exc:
        raise NumericalError(f"{exc} on batch [{_batch_ids(batch)}]") from None
    if not math.isfinite(loss):
        _check_finite("loss", np.array([loss]), batch)
    for key, g in grads.items():
        _check_finite(f"gradient {key}", g, batch)
    params = state.model.flat_params()
    state.optimizer.step(params, grads)
    for key in grads:
        _check_finite(f"parameter {key}", params[key], batch)
    state.step += 1
    state.loss_sum += loss
    state.loss_count += 1
    return state, loss


def train(
    dataset: Dataset,
    assignment: SplitAssignment,
    config: TrainConfig,
    schema: FieldSchema,
    eval_config: EvalConfig | None = None,
    gamma_profile=None,
    on_epoch: Callable[[TrainState, MetricsReport | None], None] | None = None,
) -> tuple[TrainState, History]:
    """Run ``config.epochs`` epochs over the training split.

    Evaluates every ``eval_every`` epochs (and after the last one when
    ``eval_every > 0``).
    """
    config.validate()
    training = filter_triplets(dataset.triplets, assignment, "train").triplets
    if not training:
        raise ValueError("training split has no triplets")
    if config.unweighted_reference:
        weights = np.ones(len(training))
    else:
        weights = apply_stw(training, config.stw)

    state = init_state(dataset, schema, config)
    gamma = config.gamma or FieldWeights.uniform(schema.m, schema.n)
    history = History()
    batch_seed = derive_seed(config.seed, "batches")
    for epoch in range(config.epochs):
        state.epoch = epoch
        state.loss_sum, state.loss_count = 0.0, 0
        for idx in sample_batches(training, config.batch_size, batch_seed, epoch):
            batch = [training[i] for i in idx]
            state, loss = train_step(state, batch, dataset, config, weights=weights[idx])
            history.steps.append((state.step, loss))
        report = None
        last = epoch == config.epochs - 1
        if config.eval_every > 0 and ((epoch + 1) % config.eval_every == 0 or last):
            report = evaluate_splits(state.model, dataset, assignment, gamma_profile, eval_config, training_gamma=gamma)
            history.reports[epoch + 1] = report
            for row in report.rows:
                metric = row.metric if row.k is None else f"{row.metric}@{row.k}"
                history.evals.append((epoch + 1, row.split, metric, row.value))
        log.info("epoch %d: mean loss %.6f", epoch + 1, state.mean_loss)
        if on_epoch is not None:
            on_epoch(state, report)
    state.epoch = config.epochs
    return state, history


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    state.model.save(path)
