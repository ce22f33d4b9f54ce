"""Multi-field fusion and loss.

Each side (LHS queries, RHS documents) may have several fields. Per-field
embeddings are normalized, combined into a gamma-weighted average (not
re-normalized), and the training objective is::

    L = WCE(Z_avg, w) + pairwise_scale * sum_{j,k} WCE(L_j @ R_k.T, w)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .loss import normalize_backward, normalize_with_norms, symmetric_ce_loss_and_grad, weighted_ce_loss_and_grad

SPLITS = ("in_domain", "novel_query", "novel_corpus", "zero_shot")
SUM_TOL = 1e-9


def _check_side(gamma: Sequence[float], side: str) -> tuple[float, ...]:
    g = tuple(float(x) for x in gamma)
    if not g:
        raise ValueError(f"gamma_{side} is empty")
    if any(not math.isfinite(x) or x < 0 for x in g):
        raise ValueError(f"gamma_{side} entries must be finite and >= 0, got {g}")
    if abs(math.fsum(g) - 1.0) > SUM_TOL:
        raise ValueError(f"gamma_{side} must sum to 1, got {math.fsum(g)!r}")
    return g


@dataclass(frozen=True)
class FieldWeights:
    gamma_l: tuple[float, ...] = (1.0,)
    gamma_r: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "gamma_l", _check_side(self.gamma_l, "l"))
        object.__setattr__(self, "gamma_r", _check_side(self.gamma_r, "r"))

    @classmethod
    def uniform(cls, m: int, n: int) -> "FieldWeights":
        return cls(tuple([1.0 / m] * m), tuple([1.0 / n] * n))


def fuse(embeddings: Sequence[np.ndarray], gamma: Sequence[float]) -> np.ndarray:
    """Row-wise ``sum_j gamma_j * e_j`` over per-field normalized batches."""
    if len(embeddings) != len(gamma):
        raise ValueError(f"{len(embeddings)} field batches but {len(gamma)} gamma weights")
    shapes = {np.shape(e) for e in embeddings}
    if len(shapes) != 1:
        raise ValueError(f"field batches differ in shape: {sorted(shapes)}")
    out = np.zeros(np.shape(embeddings[0]))
    for g, e in zip(gamma, embeddings):
        out += g * np.asarray(e, dtype=np.float64)
    return out


def field_grid(lhs: Sequence[np.ndarray], rhs: Sequence[np.ndarray]) -> list[list[np.ndarray]]:
    """``grid[j][k] = lhs[j] @ rhs[k].T``."""
    shapes = {np.shape(e) for e in list(lhs) + list(rhs)}
    if len(shapes) != 1:
        raise ValueError(f"field batches differ in shape: {sorted(shapes)}")
    return [[np.asarray(l, dtype=np.float64) @ np.asarray(r, dtype=np.float64).T for r in rhs] for l in lhs]


@dataclass
class MultiFieldResult:
    loss: float
    terms: dict[str, float]
    grad_lhs: list[np.ndarray] = field(repr=False)
    grad_rhs: list[np.ndarray] = field(repr=False)


def _loss_fn(reference: bool) -> Callable:
    if reference:
        return lambda z, w, tau: symmetric_ce_loss_and_grad(z, tau)
    return weighted_ce_loss_and_grad


def multifield_loss(
    lhs: Sequence[np.ndarray],
    rhs: Sequence[np.ndarray],
    gamma: FieldWeights,
    w,
    tau: float = 1.0,
    pairwise_scale: float = 1.0,
    lhs_names: Sequence[str] | None = None,
    rhs_names: Sequence[str] | None = None,
    reference: bool = False,
) -> MultiFieldResult:
    """Combined loss on normalized per-field embeddings, with gradients.

    ``terms`` holds the averaged term under ``"avg"`` and each pairwise term
    (already multiplied by ``pairwise_scale``) under ``"lhs_name|rhs_name"``;
    they sum to ``loss``. ``reference=True`` swaps in the unweighted CLIP
    loss for every term (baseline runs).
    """
    lhs = [np.asarray(x, dtype=np.float64) for x in lhs]
    rhs = [np.asarray(x, dtype=np.float64) for x in rhs]
    lhs_names = list(lhs_names) if lhs_names is not None else [f"L{j}" for j in range(len(lhs))]
    rhs_names = list(rhs_names) if rhs_names is not None else [f"R{k}" for k in range(len(rhs))]
    if len(lhs) != len(gamma.gamma_l) or len(rhs) != len(gamma.gamma_r):
        raise ValueError(
            f"field counts ({len(lhs)}, {len(rhs)}) do not match gamma lengths "
            f"({len(gamma.gamma_l)}, {len(gamma.gamma_r)})"
        )
    loss_fn = _loss_fn(reference)

    l_avg = fuse(lhs, gamma.gamma_l)
    r_avg = fuse(rhs, gamma.gamma_r)
    avg_loss, g_avg = loss_fn(l_avg @ r_avg.T, w, tau)
    terms = {"avg": avg_loss}
    d_lavg = g_avg @ r_avg
    d_ravg = g_avg.T @ l_avg
    grad_lhs = [gl * d_lavg for gl in gamma.gamma_l]
    grad_rhs = [gr * d_ravg for gr in gamma.gamma_r]

    grid = field_grid(lhs, rhs)
    for j, lj in enumerate(lhs):
        for k, rk in enumerate(rhs):
            pl, pg = loss_fn(grid[j][k], w, tau)
            terms[f"{lhs_names[j]}|{rhs_names[k]}"] = pairwise_scale * pl
            pg = pairwise_scale * pg
            grad_lhs[j] = grad_lhs[j] + pg @ rk
            grad_rhs[k] = grad_rhs[k] + pg.T @ lj

    total = math.fsum(terms.values())
    return MultiFieldResult(total, terms, grad_lhs, grad_rhs)


def multifield_step(lhs_raw, rhs_raw, gamma: FieldWeights, w, tau: float = 1.0, **kwargs) -> MultiFieldResult:
    """As :func:`multifield_loss`, starting from raw field embeddings.

    Returned gradients are with respect to the raw (pre-normalization) inputs.
    """
    lhs = [normalize_with_norms(x) for x in lhs_raw]
    rhs = [normalize_with_norms(x) for x in rhs_raw]
    res = multifield_loss([u for u, _ in lhs], [u for u, _ in rhs], gamma, w, tau, **kwargs)
    res.grad_lhs = [normalize_backward(g, u, n) for g, (u, n) in zip(res.grad_lhs, lhs)]
    res.grad_rhs = [normalize_backward(g, u, n) for g, (u, n) in zip(res.grad_rhs, rhs)]
    return res


def _coerce(value, training: FieldWeights | None) -> FieldWeights:
    if isinstance(value, FieldWeights):
        return value
    if training is None:
        training = FieldWeights()
    if isinstance(value, Mapping):
        return FieldWeights(tuple(value.get("lhs", training.gamma_l)), tuple(value.get("rhs", training.gamma_r)))
    return FieldWeights(training.gamma_l, tuple(value))


def eval_gamma_profile(profile: Mapping | None, training: FieldWeights | None) -> dict[str, FieldWeights]:
    """Resolve a per-split gamma profile; splits not named use ``training``.

    Profile values may be a :class:`FieldWeights`, a list of RHS weights, or
    a mapping with optional ``lhs``/``rhs`` lists.
    """
    profile = dict(profile or {})
    unknown = sorted(set(profile) - set(SPLITS))
    if unknown:
        raise ValueError(f"unknown split name(s) in gamma profile: {unknown}; expected {SPLITS}")
    return {split: _coerce(profile[split], training) if split in profile else training for split in SPLITS}
