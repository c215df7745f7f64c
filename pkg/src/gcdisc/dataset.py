"""Multivariate time-series container, CSV I/O, standardization, windowing.

Data is held as a V x T float64 matrix (variates by time steps).  Training
consumes stride-1 sliding windows: ``contexts[i]`` is the V x C block of the
C steps preceding time ``i + C`` (columns ordered oldest to newest) and
``targets[i]`` is the full cross-section at that step.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .graph import GCGraph

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed input data (CSV parse problems, shape violations)."""


@dataclass
class Dataset:
    values: np.ndarray  # (V, T)
    variate_names: list[str] = field(default_factory=list)
    truth: GCGraph | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be a V x T matrix, got shape {self.values.shape}")
        if self.n_variates < 2:
            raise DataError(f"need at least 2 variates, got {self.n_variates}")
        if self.n_steps < 2:
            raise DataError(f"T < 2: need at least 2 time steps, got {self.n_steps}")
        if not np.isfinite(self.values).all():
            raise DataError("values contain NaN or Inf")
        if not self.variate_names:
            self.variate_names = [f"v{i}" for i in range(self.n_variates)]
        elif len(self.variate_names) != self.n_variates:
            raise DataError(
                f"{len(self.variate_names)} names for {self.n_variates} variates"
            )

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    """Per-variate mean and population std used for (un)standardization."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if (self.std <= 0).any():
            raise DataError("std must be positive")


@dataclass
class WindowSet:
    contexts: np.ndarray  # (N_w, V, C), lag columns oldest -> newest
    targets: np.ndarray  # (N_w, V)
    context_len: int

    @property
    def n_windows(self) -> int:
        return self.contexts.shape[0]

    @property
    def n_variates(self) -> int:
        return self.contexts.shape[1]


def load_csv(path, has_header: bool = True) -> Dataset:
    """Load a CSV with rows = time steps and columns = variates.

    Non-numeric cells are reported by (row, column), both 1-based and counted
    over data rows (the header row, when present, is not counted).
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    with fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    names: list[str] = []
    if has_header and rows:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if len(rows) < 2:
        raise DataError(f"T < 2: {path} has {len(rows)} data rows")
    width = len(rows[0])
    data = np.empty((len(rows), width), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"ragged CSV: row {r + 1} has {len(row)} cells, expected {width}")
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell at ({r + 1},{c + 1}): {cell!r}") from None
    return Dataset(values=data.T, variate_names=names)


def save_csv(dataset: Dataset, path, with_header: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if with_header:
            writer.writerow(dataset.variate_names)
        for t in range(dataset.n_steps):
            writer.writerow([repr(float(x)) for x in dataset.values[:, t]])


def standardize(dataset: Dataset) -> tuple[Dataset, NormStats]:
    """Z-score each variate with whole-series population statistics.

    Constant variates get their std floored at ``STD_FLOOR`` (yielding an
    all-zero row) and trigger a warning rather than an error.
    """
    mean = dataset.values.mean(axis=1)
    std = dataset.values.std(axis=1)
    constant = std < STD_FLOOR
    if constant.any():
        bad = [dataset.variate_names[i] for i in np.nonzero(constant)[0]]
        warnings.warn(f"constant variate(s) {bad}: std floored at {STD_FLOOR}", stacklevel=2)
        std = np.where(constant, STD_FLOOR, std)
    values = (dataset.values - mean[:, None]) / std[:, None]
    values[constant] = 0.0
    out = Dataset(values=values, variate_names=list(dataset.variate_names), truth=dataset.truth)
    return out, NormStats(mean=mean, std=std)


def unstandardize(dataset: Dataset, stats: NormStats) -> Dataset:
    values = dataset.values * stats.std[:, None] + stats.mean[:, None]
    return Dataset(values=values, variate_names=list(dataset.variate_names), truth=dataset.truth)


def make_windows(dataset: Dataset, context_len: int) -> WindowSet:
    """Stride-1 sliding windows over the whole series.

    Window i covers values[:, i : i+C] with target values[:, i+C]; there are
    exactly T - C of them.
    """
    if context_len < 1:
        raise DataError(f"context length must be >= 1, got {context_len}")
    t = dataset.n_steps
    if t <= context_len:
        raise DataError(f"T <= C: cannot window {t} steps with context {context_len}")
    n_w = t - context_len
    idx = np.arange(context_len)[None, :] + np.arange(n_w)[:, None]  # (N_w, C)
    # store lag-major, expose (N_w, V, C): downstream embedding flattens
    # lag-major, so this layout avoids copies on every training step
    base = np.ascontiguousarray(dataset.values[:, idx].transpose(2, 1, 0))  # (C, N_w, V)
    contexts = base.transpose(1, 2, 0)
    targets = dataset.values[:, context_len:].T.copy()  # (N_w, V)
    return WindowSet(contexts=contexts, targets=targets, context_len=context_len)


def pool_windows(window_sets: list[WindowSet]) -> WindowSet:
    """Concatenate windows from independent recordings of the same variates."""
    if not window_sets:
        raise DataError("no window sets to pool")
    c = window_sets[0].context_len
    v = window_sets[0].n_variates
    for ws in window_sets[1:]:
        if ws.context_len != c or ws.n_variates != v:
            raise DataError("window sets disagree on context length or variate count")
    return WindowSet(
        contexts=np.concatenate([ws.contexts for ws in window_sets], axis=0),
        targets=np.concatenate([ws.targets for ws in window_sets], axis=0),
        context_len=c,
    )
