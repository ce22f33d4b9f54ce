"""Weighted symmetric contrastive loss over an in-batch similarity matrix.

For a square similarity matrix ``z`` (queries on rows, documents on
columns) and per-pair weights ``w``::

    L = -1/(2N) * ( sum_i w_i * log softmax(z[i, :] / tau)[i]
                  + sum_i w_i * log softmax(z[:, i] / tau)[i] )

With ``tau = 1`` this is the weighted cross-entropy used for GCL training;
with ``w = 1`` it is the ordinary symmetric CLIP/InfoNCE objective.
All math is float64.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

NORM_EPS = 1e-12


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def normalize_rows(x) -> np.ndarray:
    """Divide each row by its L2 norm.

    Raises ValueError naming the first row whose norm is below 1e-12.
    """
    return normalize_with_norms(x)[0]


def normalize_with_norms(x) -> tuple[np.ndarray, np.ndarray]:
    x = _as_matrix(x, "embeddings")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    nonfinite = np.flatnonzero(~np.isfinite(norms))
    if nonfinite.size:
        raise NumericalError(f"row {int(nonfinite[0])} contains NaN or Inf")
    bad = np.flatnonzero(~(norms >= NORM_EPS))
    if bad.size:
        raise ValueError(f"row {int(bad[0])} has degenerate norm {norms[bad[0]]!r}")
    return x / norms[:, None], norms


def normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``x/||x||`` back to ``x``."""
    radial = np.einsum("ij,ij->i", grad_unit, unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def similarity(q, d) -> np.ndarray:
    q = _as_matrix(q, "q")
    d = _as_matrix(d, "d")
    if q.shape != d.shape:
        raise ValueError(f"shape mismatch: q {q.shape} vs d {d.shape}")
    return q @ d.T


def _check_inputs(z, w, tau):
    z = _as_matrix(z, "z")
    n = z.shape[0]
    if z.shape != (n, n):
        raise ValueError(f"z must be square, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericalError("similarity matrix contains NaN or Inf")
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"weights must have shape ({n},), got {w.shape}")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and strictly positive")
    if not (tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    return z, w


def _log_softmax_diag(logits: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal of log-softmax along ``axis`` and the full softmax."""
    peak = logits.max(axis=axis, keepdims=True)
    shifted = logits - peak
    e = np.exp(shifted)
    total = e.sum(axis=axis, keepdims=True)
    log_probs = shifted - np.log(total)
    return np.diagonal(log_probs).copy(), e / total


def weighted_ce_loss(z, w, tau: float = 1.0) -> float:
    z, w = _check_inputs(z, w, tau)
    n = z.shape[0]
    logits = z / tau
    row_diag, _ = _log_softmax_diag(logits, axis=1)
    col_diag, _ = _log_softmax_diag(logits, axis=0)
    return float(-((w * row_diag).sum() + (w * col_diag).sum()) / (2 * n))


def weighted_ce_grad(z, w, tau: float = 1.0) -> np.ndarray:
    """Closed-form d(loss)/dz for :func:`weighted_ce_loss`."""
    return weighted_ce_loss_and_grad(z, w, tau)[1]


def weighted_ce_loss_and_grad(z, w, tau: float = 1.0) -> tuple[float, np.ndarray]:
    z, w = _check_inputs(z, w, tau)
    n = z.shape[0]
    logits = z / tau
    row_diag, p_row = _log_softmax_diag(logits, axis=1)
    col_diag, p_col = _log_softmax_diag(logits, axis=0)
    loss = float(-((w * row_diag).sum() + (w * col_diag).sum()) / (2 * n))
    coef = w / (2 * n * tau)
    eye = np.eye(n)
    grad = coef[:, None] * (p_row - eye) + (p_col - eye) * coef[None, :]
    return loss, grad


def symmetric_ce_loss_and_grad(z, tau: float = 1.0) -> tuple[float, np.ndarray]:
    """Plain (unweighted) symmetric CLIP loss and gradient.

    Kept as a separate code path for baseline runs; for ``w = 1`` it agrees
    bit-for-bit with :func:`weighted_ce_loss_and_grad`.
    """
    z, _ = _check_inputs(z, None, tau)
    n = z.shape[0]
    logits = z / tau
    row_diag, p_row = _log_softmax_diag(logits, axis=1)
    col_diag, p_col = _log_softmax_diag(logits, axis=0)
    loss = float(-(row_diag.sum() + col_diag.sum()) / (2 * n))
    coef = np.full(n, 1.0 / (2 * n * tau))
    eye = np.eye(n)
    grad = coef[:, None] * (p_row - eye) + (p_col - eye) * coef[None, :]
    return loss, grad


def single_field_step(q_raw, d_raw, w, tau: float = 1.0, reference: bool = False):
    """Loss and gradients w.r.t. raw (unnormalized) query/document embeddings.

    Normalizes both batches, forms ``z = q_hat @ d_hat.T``, evaluates the
    weighted loss and back-propagates through the dot product and the
    normalization. Returns ``(loss, grad_q, grad_d)``. ``reference=True``
    ignores ``w`` and uses the unweighted CLIP loss.
    """
    q_hat, q_norm = normalize_with_norms(q_raw)
    d_hat, d_norm = normalize_with_norms(d_raw)
    z = similarity(q_hat, d_hat)
    if reference:
        loss, g = symmetric_ce_loss_and_grad(z, tau)
    else:
        loss, g = weighted_ce_loss_and_grad(z, w, tau)
    grad_q = normalize_backward(g @ d_hat, q_hat, q_norm)
    grad_d = normalize_backward(g.T @ q_hat, d_hat, d_norm)
    return loss, grad_q, grad_d
