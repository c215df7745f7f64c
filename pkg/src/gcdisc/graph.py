"""Granger-causal graphs: extraction from trained selectors and evaluation.

A graph is a boolean V x V adjacency where entry (v, w) means "variate w
Granger-causes variate v", i.e. the forecaster for v kept a nonzero selector
column for w.  Selectors trained in per-lag mode additionally yield an
L x V x V lag-resolved adjacency whose OR over lags equals the aggregated one.

Evaluation against a ground-truth graph uses cellwise accuracy, balanced
accuracy, and AUROC over edge scores obtained from a sparsity sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import selector


@dataclass
class GCGraph:
    """Boolean adjacency; ``adjacency[v, w]`` true iff w Granger-causes v."""

    adjacency: np.ndarray
    per_lag: np.ndarray | None = None  # (L, V, V), ORs down to `adjacency`
    variate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        if self.adjacency.ndim != 2 or self.adjacency.shape[0] != self.adjacency.shape[1]:
            raise ValueError(f"adjacency must be square, got {self.adjacency.shape}")
        if self.per_lag is not None:
            self.per_lag = np.asarray(self.per_lag, dtype=bool)
            if self.per_lag.shape[1:] != self.adjacency.shape:
                raise ValueError("per-lag adjacency does not match aggregated shape")
            if not np.array_equal(self.per_lag.any(axis=0), self.adjacency):
                raise ValueError("per-lag adjacency does not OR down to the aggregated graph")
        if not self.variate_names:
            self.variate_names = [f"v{i}" for i in range(self.adjacency.shape[0])]

    @property
    def n_variates(self) -> int:
        return self.adjacency.shape[0]

    def edge_count(self) -> int:
        return int(self.adjacency.sum())

    def to_json_dict(self) -> dict:
        out = {
            "variates": self.variate_names,
            "adjacency": self.adjacency.astype(int).tolist(),
        }
        if self.per_lag is not None:
            out["per_lag"] = self.per_lag.astype(int).tolist()
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "GCGraph":
        per_lag = np.asarray(d["per_lag"], dtype=bool) if d.get("per_lag") is not None else None
        return cls(
            adjacency=np.asarray(d["adjacency"], dtype=bool),
            per_lag=per_lag,
            variate_names=list(d.get("variates", [])),
        )

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "GCGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def save_csv(self, path) -> None:
        """0/1 matrix, rows = target variate v, columns = source variate w."""
        np.savetxt(path, self.adjacency.astype(int), fmt="%d", delimiter=",")

    def save_dot(self, path) -> None:
        """Write a Graphviz digraph (edge w -> v for every adjacency[v, w])."""
        lines = ["digraph gc {"]
        for name in self.variate_names:
            lines.append(f'  "{name}";')
        vs, ws = np.nonzero(self.adjacency)
        for v, w in zip(vs, ws):
            lines.append(f'  "{self.variate_names[w]}" -> "{self.variate_names[v]}";')
        lines.append("}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class EdgeScores:
    """Real-valued V x V edge confidences; higher means more likely an edge."""

    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise ValueError(f"scores must be square, got {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ValueError("edge scores must be finite")


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    auroc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    per_lambda: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "auroc": self.auroc,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "per_lambda": self.per_lambda,
        }


def extract_graph(models) -> GCGraph:
    """Read the discovered graph off trained component selectors.

    ``models`` holds one trained component per variate, ordered by target
    variate index.  Edge (v, w) is present exactly when column w of model v's
    selector has nonzero Euclidean norm; the proximal compression guarantees
    dropped columns are exact zeros, so no threshold is involved.
    """
    n = len(models)
    if n == 0:
        raise ValueError("no component models given")
    names = None
    rows = []
    lag_rows = []
    for model in models:
        if model is None:
            raise ValueError("missing component model (training failure?)")
        sel = model.selector
        norms = selector.column_norms(sel)
        if norms.shape[-1] != n:
            raise ValueError(
                f"component for variate {model.variate} has {norms.shape[-1]} input "
                f"columns, expected {n}"
            )
        if norms.ndim == 2:  # per-lag (L, V)
            lag_rows.append(norms > 0.0)
            rows.append((norms > 0.0).any(axis=0))
        else:
            rows.append(norms > 0.0)
        if names is None and getattr(model, "variate_names", None):
            names = list(model.variate_names)
    adjacency = np.stack(rows, axis=0)
    per_lag = None
    if lag_rows:
        if len(lag_rows) != n:
            raise ValueError("mixed per-lag and shared selectors")
        per_lag = np.stack(lag_rows, axis=1)  # (L, V, V)
    return GCGraph(adjacency=adjacency, per_lag=per_lag, variate_names=names or [])


def edge_scores_from_sweep(sweep: list[tuple[float, GCGraph]]) -> EdgeScores:
    """Aggregate a sparsity sweep into edge scores by survival count.

    Each cell scores the number of sweep graphs containing that edge, so an
    edge that survives heavier compression outranks one that only shows up at
    the weakest setting.
    """
    if len(sweep) < 2:
        raise ValueError("a sweep needs at least two sparsity settings")
    shape = sweep[0][1].adjacency.shape
    scores = np.zeros(shape, dtype=float)
    for _, g in sweep:
        if g.adjacency.shape != shape:
            raise ValueError("sweep graphs have inconsistent shapes")
        scores += g.adjacency
    return EdgeScores(scores=scores)


def _flatten_cells(mat: np.ndarray, include_diagonal: bool) -> np.ndarray:
    if include_diagonal:
        return mat.reshape(-1)
    n = mat.shape[0]
    off = ~np.eye(n, dtype=bool)
    return mat[off]


def confusion_metrics(pred: GCGraph, truth: GCGraph, include_diagonal: bool = True) -> MetricsReport:
    """Cellwise accuracy and balanced accuracy of a predicted graph."""
    if pred.adjacency.shape != truth.adjacency.shape:
        raise ValueError(
            f"prediction is {pred.adjacency.shape}, truth is {truth.adjacency.shape}"
        )
    p = _flatten_cells(pred.adjacency, include_diagonal)
    t = _flatten_cells(truth.adjacency, include_diagonal)
    pos = int(t.sum())
    neg = int(t.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("degenerate truth: needs at least one positive and one negative cell")
    tp = int((p & t).sum())
    tn = int((~p & ~t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    accuracy = (tp + tn) / t.size
    balanced = 0.5 * (tp / pos + tn / neg)
    return MetricsReport(
        accuracy=accuracy, balanced_accuracy=balanced, auroc=None, tp=tp, fp=fp, tn=tn, fn=fn
    )


def auroc(scores: EdgeScores, truth: GCGraph, include_diagonal: bool = True) -> float:
    """Probability a random positive cell outscores a random negative one.

    Mann-Whitney form with ties counted one half; identical to trapezoidal
    integration of the ROC curve.
    """
    s = _flatten_cells(scores.scores, include_diagonal)
    t = _flatten_cells(truth.adjacency, include_diagonal)
    pos = s[t]
    neg = s[~t]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("degenerate truth: needs at least one positive and one negative cell")
    # Rank-sum evaluation: O((P+N) log) instead of the P*N pairwise loop.
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=float)
    ranks[order] = np.arange(1, combined.size + 1)
    # midranks for ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum_pos = ranks[: pos.size].sum()
    u = rank_sum_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def variable_usage(models) -> np.ndarray:
    """Number of surviving input variates per component (aggregated over lags)."""
    counts = []
    for model in models:
        norms = selector.column_norms(model.selector)
        if norms.ndim == 2:
            counts.append(int((norms > 0.0).any(axis=0).sum()))
        else:
            counts.append(int((norms > 0.0).sum()))
    return np.asarray(counts, dtype=int)
