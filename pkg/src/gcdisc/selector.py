"""Sparse input selector: per-variate projection with learned compression.

Each target variate owns a projection ``weights`` (hidden x V, or per-lag
L x hidden x V) applied to every context column, plus a shared bias.  Column
w of the projection is the only path variate w's history takes into the
forecaster, so a column of exact zeros certifies that w cannot influence the
prediction.

Sparsity is produced by a per-step soft-threshold of the columns (see
:func:`proximal_step`), whose per-column strength is allocated by a learned
softmax over ``logits``.  The allocation itself trains on
:func:`reduction_loss`, the log of the allocation-weighted sum of column
norms; its gradient w.r.t. the logits has a closed form and never touches the
projection weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

LOG_GUARD = 1e-12


@dataclass
class SelectorParams:
    weights: np.ndarray  # (D, V) shared or (L, D, V) per-lag
    bias: np.ndarray  # (D,)
    logits: np.ndarray  # (V,) shared or (L, V) per-lag
    per_lag: bool = False

    def __post_init__(self):
        want = 3 if self.per_lag else 2
        if self.weights.ndim != want:
            raise ValueError(
                f"weights must have {want} dims for per_lag={self.per_lag}, "
                f"got shape {self.weights.shape}"
            )
        if self.logits.shape != self.column_shape:
            raise ValueError(f"logits shape {self.logits.shape} != {self.column_shape}")

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[-1]

    @property
    def width(self) -> int:
        return self.weights.shape[-2]

    @property
    def column_shape(self) -> tuple[int, ...]:
        """(V,) in shared mode, (L, V) in per-lag mode: one compression group each."""
        return self.weights.shape[:-2] + (self.weights.shape[-1],)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"sel_weights": self.weights, "sel_bias": self.bias, "sel_logits": self.logits}


def init_selector(n_inputs: int, width: int, per_lag: bool = False, n_lags: int = 1,
                  seed: int = 0, rng: np.random.Generator | None = None) -> SelectorParams:
    """Uniform(-sqrt(1/V), sqrt(1/V)) weights and bias; zero logits so the
    compression allocation starts uniform."""
    if n_inputs < 2:
        raise ValueError(f"need at least 2 input variates, got {n_inputs}")
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    if per_lag and n_lags < 1:
        raise ValueError(f"per-lag mode needs n_lags >= 1, got {n_lags}")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=seed))
    bound = np.sqrt(1.0 / n_inputs)
    shape = (n_lags, width, n_inputs) if per_lag else (width, n_inputs)
    weights = rng.uniform(-bound, bound, size=shape)
    bias = rng.uniform(-bound, bound, size=width)
    logits = np.zeros(shape[:-2] + (n_inputs,))
    return SelectorParams(weights=weights, bias=bias, logits=logits, per_lag=per_lag)


def alpha(sel: SelectorParams) -> np.ndarray:
    """Compression allocation: softmax of the logits over all columns.

    In per-lag mode the simplex spans all L*V (lag, variate) columns jointly.
    """
    flat = sel.logits.reshape(-1)
    shifted = flat - flat.max()
    e = np.exp(shifted)
    return (e / e.sum()).reshape(sel.logits.shape)


def column_norms(sel: SelectorParams) -> np.ndarray:
    """Euclidean norm of each input column; shape (V,) or (L, V)."""
    return np.sqrt(np.square(sel.weights).sum(axis=-2))


def embed(sel: SelectorParams, window: np.ndarray) -> np.ndarray:
    """Project a window (V, C) -> (C, D), or a batch (B, V, C) -> (B, C, D).

    Shared mode applies the same projection at every lag.  Per-lag mode
    requires L == C and applies weights[l] to the column with lag l+1, i.e.
    the newest context column uses weights[0].
    """
    single = window.ndim == 2
    w = window[None] if single else window
    if w.ndim != 3 or w.shape[1] != sel.n_inputs:
        raise ValueError(f"window must be (B, {sel.n_inputs}, C), got {window.shape}")
    b, _, c_len = w.shape
    w_lag = np.ascontiguousarray(w.transpose(2, 0, 1))  # (C, B, V), lag-major
    if sel.per_lag:
        if sel.weights.shape[0] != c_len:
            raise ValueError(
                f"per-lag selector has {sel.weights.shape[0]} lags, window has {c_len}"
            )
        # columns are oldest -> newest, lag l+1 -> weights[l], so reverse.
        by_col = sel.weights[::-1]  # (C, D, V)
        out = np.matmul(w_lag, by_col.transpose(0, 2, 1))  # (C, B, D)
        out += sel.bias
    else:
        out = w_lag.reshape(c_len * b, -1) @ np.ascontiguousarray(sel.weights.T)
        out += sel.bias
        out = out.reshape(c_len, b, -1)
    # expose (B, C, D) as a view over the lag-major buffer; the forecaster
    # flattens lag-major again, so no further copies happen downstream
    out = out.transpose(1, 0, 2)
    return out[0] if single else out


def embed_backward(sel: SelectorParams, window: np.ndarray,
                   d_embedded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the projection parameters given d(loss)/d(embedded)."""
    single = window.ndim == 2
    w = window[None] if single else window
    g = d_embedded[None] if single else d_embedded
    b, c_len, d = g.shape
    g_lag = np.ascontiguousarray(g.transpose(1, 0, 2))  # (C, B, D); free if lag-major already
    w_lag = np.ascontiguousarray(w.transpose(2, 0, 1))  # (C, B, V)
    d_bias = g_lag.sum(axis=(0, 1))
    if sel.per_lag:
        # d_weights[l] accumulates from the column with lag l+1.
        dw_by_col = np.matmul(g_lag.transpose(0, 2, 1), w_lag)  # (C, D, V)
        d_weights = dw_by_col[::-1].copy()
    else:
        d_weights = g_lag.reshape(c_len * b, d).T @ w_lag.reshape(c_len * b, -1)
    return d_weights, d_bias


def reduction_loss(sel: SelectorParams, sparsity: float) -> tuple[float, np.ndarray]:
    """Value and closed-form logits gradient of the compression objective.

    value = sparsity * log(sum_w alpha_w * ||column_w||)
    d/d logit_w = sparsity * alpha_w * (||column_w|| / weighted_sum - 1)

    The column norms are constants here: this loss trains only the logits,
    never the projection.  If every column is zero the log is undefined; the
    guarded value sparsity*log(1e-12) with a zero gradient is returned and a
    warning emitted.
    """
    a = alpha(sel)
    norms = column_norms(sel)
    weighted = float((a * norms).sum())
    if weighted <= LOG_GUARD:
        warnings.warn("all selector columns are zero: reduction loss is a guard value",
                      stacklevel=2)
        return sparsity * float(np.log(LOG_GUARD)), np.zeros_like(sel.logits)
    grad = sparsity * a * (norms / weighted - 1.0)
    return sparsity * float(np.log(weighted)), grad


def shrink_columns(weights: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Column-wise soft threshold: each column's norm drops by its threshold,
    direction unchanged; columns at or below threshold become exact zeros."""
    norms = np.sqrt(np.square(weights).sum(axis=-2))
    keep = norms > thresholds
    scale = 1.0 - thresholds / np.where(norms > 0.0, norms, 1.0)
    scaled = weights * np.expand_dims(scale, axis=-2)
    # dropped columns are written as literal +0.0, not scaled, so they are
    # bitwise zero and the norm > 0 edge rule needs no tolerance
    return np.where(np.expand_dims(keep, axis=-2), scaled, 0.0)


def proximal_step(sel: SelectorParams, sparsity: float, lr: float) -> SelectorParams:
    """Compression step: soft-threshold each column by sparsity*lr*alpha_w.

    Bias and logits pass through untouched; in per-lag mode every (lag,
    variate) column is thresholded with its own allocation weight.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    thresholds = sparsity * lr * alpha(sel)
    return replace(sel, weights=shrink_columns(sel.weights, thresholds))


def group_lasso_proximal(sel: SelectorParams, sparsity: float, lr: float) -> SelectorParams:
    """Ablation variant: uniform allocation 1/(number of columns), never learned."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    n_cols = int(np.prod(sel.column_shape))
    thresholds = np.full(sel.column_shape, sparsity * lr / n_cols)
    return replace(sel, weights=shrink_columns(sel.weights, thresholds))
