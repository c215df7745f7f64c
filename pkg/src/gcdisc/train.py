"""Joint optimization: gradient steps on forecaster + projection, a staged
closed-form step on the compression allocation, then the proximal column
shrink, every iteration.

Each target variate trains independently (its own parameters, its own RNG
stream keyed ``seed XOR variate``), so components can run serially or in a
process pool with identical results.  One optimization step does, in order:

  1. full-batch (or minibatch) prediction loss and its exact gradients
     through the forecaster into the selector projection,
  2. AdamW step on projection + forecaster (decoupled weight decay on the
     forecaster only),
  3. once the staged start step is reached, an Adam (or plain GD) step on the
     allocation logits using the closed-form reduction-loss gradient,
  4. the proximal compression of the selector columns at the same scheduled
     learning rate.

The learning rate follows a linear warmup to its peak and cosine annealing to
the end of training.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from . import selector as sel_mod
from . import slstm as slstm_mod
from .dataset import Dataset, WindowSet, make_windows, standardize
from .pipeline import FusedPipeline
from .selector import SelectorParams
from .slstm import LSTMForecaster, SLSTMForecaster, SLSTMParams
from .tensorfile import read_tensors, write_tensors

ABLATIONS = ("none", "lstm_forecaster", "group_lasso")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    sparsity: float = 10.0  # compression weight (0 disables sparsity entirely)
    peak_lr: float = 1e-4
    warmup_steps: int = 2000
    total_steps: int = 13000
    adapt_start: int = 1500  # step at which the allocation logits start training
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    ablation: str = "none"  # none | lstm_forecaster | group_lasso
    context: int = 10
    lag_mode: str = "shared"  # shared | per_lag
    hidden: int = 32
    heads: int = 1
    logits_optimizer: str = "adam"  # adam | gd
    dtype: str = "f8"  # f8 | f4 (reduced-precision build mode)

    def validate(self) -> None:
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not 0 <= self.adapt_start <= self.total_steps:
            raise ValueError("need 0 <= adapt_start <= total_steps")
        if self.sparsity < 0:
            raise ValueError("sparsity must be >= 0")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError("hidden must be a positive multiple of heads")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.lag_mode not in ("shared", "per_lag"):
            raise ValueError("lag_mode must be 'shared' or 'per_lag'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None")
        if self.logits_optimizer not in ("adam", "gd"):
            raise ValueError("logits_optimizer must be 'adam' or 'gd'")
        if self.dtype not in ("f8", "f4"):
            raise ValueError("dtype must be 'f8' or 'f4'")

    def np_dtype(self):
        return np.float64 if self.dtype == "f8" else np.float32

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class TrainHistory:
    """Per-step training records; all arrays have length total_steps."""

    l_pred: np.ndarray
    l_red: np.ndarray
    active: np.ndarray
    lr: np.ndarray
    wall_s: np.ndarray

    def save_ndjson(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k in range(len(self.l_pred)):
                fh.write(
                    f'{{"step":{k},"l_pred":{self.l_pred[k]!r},"l_red":{self.l_red[k]!r},'
                    f'"active":{int(self.active[k])},"lr":{self.lr[k]!r},'
                    f'"wall_s":{self.wall_s[k]!r}}}\n'
                )


@dataclass
class ComponentModel:
    selector: SelectorParams
    forecaster: SLSTMParams
    variate: int
    cell: str = "slstm"  # slstm | lstm
    variate_names: list[str] | None = None

    def __post_init__(self):
        if self.selector.width != self.forecaster.width:
            raise ValueError(
                f"selector width {self.selector.width} != forecaster width "
                f"{self.forecaster.width}"
            )

    def make_forecaster(self):
        cls = LSTMForecaster if self.cell == "lstm" else SLSTMForecaster
        return cls(self.forecaster)


@dataclass
class TrainResult:
    models: list
    histories: list
    failures: dict[int, str] = field(default_factory=dict)

    def require_complete(self) -> list:
        if self.failures:
            raise RuntimeError(f"components failed: {self.failures}")
        return self.models


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine annealing toward zero."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.peak_lr
    progress = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float, cfg: TrainConfig, decay_keys: frozenset = frozenset()):
    """One in-place Adam update with bias correction; decoupled weight decay
    is applied only to parameters named in ``decay_keys``."""
    state.step += 1
    bc1 = 1.0 - cfg.adam_beta1 ** state.step
    bc2 = 1.0 - cfg.adam_beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * (g * g)
        if name in decay_keys:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return state, params


def _cast_params(sel: SelectorParams, fc: SLSTMParams, dtype) -> None:
    sel.weights = sel.weights.astype(dtype)
    sel.bias = sel.bias.astype(dtype)
    sel.logits = sel.logits.astype(dtype)
    for name in fc.as_dict():
        setattr(fc, name, getattr(fc, name).astype(dtype))


def train_component(windows: WindowSet, variate: int, cfg: TrainConfig,
                    step_hook=None) -> tuple[ComponentModel, TrainHistory]:
    """Train the forecaster + selector pair for one target variate.

    ``step_hook(step, phase)``, when given, is called at each phase of every
    step ("grad", "logits", "prox") in execution order; it exists for
    sequencing assertions and progress reporting.
    """
    cfg.validate()
    if not 0 <= variate < windows.n_variates:
        raise ValueError(f"variate {variate} out of range")
    if cfg.lag_mode == "per_lag" and windows.context_len != cfg.context:
        raise ValueError("per-lag mode needs windows built with cfg.context lags")
    rng = np.random.Generator(np.random.Philox(key=cfg.seed ^ variate))
    n_inputs = windows.n_variates
    sel = sel_mod.init_selector(
        n_inputs, cfg.hidden, per_lag=cfg.lag_mode == "per_lag",
        n_lags=cfg.context, rng=rng,
    )
    fc_params = slstm_mod.init_slstm(cfg.hidden, cfg.heads, rng=rng)
    dtype = cfg.np_dtype()
    if dtype != np.float64:
        _cast_params(sel, fc_params, dtype)
    cell = "lstm" if cfg.ablation == "lstm_forecaster" else "slstm"
    forecaster = (LSTMForecaster if cell == "lstm" else SLSTMForecaster)(fc_params)

    contexts = windows.contexts.astype(dtype, copy=False)
    targets = windows.targets[:, variate].astype(dtype, copy=False)
    n_windows = contexts.shape[0]
    group_lasso = cfg.ablation == "group_lasso"
    pipe = FusedPipeline(sel, forecaster)

    main_params = {**sel.as_dict(), **fc_params.as_dict()}
    del main_params["sel_logits"]  # the logits train on their own closed-form path
    decay_keys = frozenset(fc_params.as_dict())
    main_state = AdamState.for_params(main_params)
    logits_state = AdamState.for_params({"sel_logits": sel.logits})

    hist_pred = np.empty(cfg.total_steps)
    hist_red = np.empty(cfg.total_steps)
    hist_active = np.empty(cfg.total_steps, dtype=int)
    hist_lr = np.empty(cfg.total_steps)
    hist_wall = np.empty(cfg.total_steps)

    with threadpool_limits(limits=1):
        for k in range(cfg.total_steps):
            t0 = time.perf_counter()
            lr = lr_schedule(k, cfg)
            if cfg.batch_size is not None and cfg.batch_size < n_windows:
                idx = rng.choice(n_windows, size=cfg.batch_size, replace=False)
                ctx_b, tgt_b = contexts[idx], targets[idx]
            else:
                ctx_b, tgt_b = contexts, targets

            pred = pipe.forward(ctx_b)
            err = pred - tgt_b
            l_pred = float(np.mean(err * err))
            if not math.isfinite(l_pred):
                raise TrainingDiverged(
                    f"non-finite prediction loss at step {k} (variate {variate})", step=k
                )
            red_val, grad_logits = sel_mod.reduction_loss(sel, cfg.sparsity)

            if step_hook is not None:
                step_hook(k, "grad")
            upstream = (2.0 / err.shape[0]) * err
            d_w, d_b, fc_grads = pipe.backward(upstream)
            grads = {"sel_weights": d_w, "sel_bias": d_b, **fc_grads}
            adam_step(main_state, main_params, grads, lr, cfg, decay_keys)

            if k >= cfg.adapt_start and not group_lasso:
                if step_hook is not None:
                    step_hook(k, "logits")
                if cfg.logits_optimizer == "adam":
                    adam_step(logits_state, {"sel_logits": sel.logits},
                              {"sel_logits": grad_logits}, lr, cfg)
                else:
                    sel.logits -= lr * grad_logits

            if step_hook is not None:
                step_hook(k, "prox")
            if group_lasso:
                shrunk = sel_mod.group_lasso_proximal(sel, cfg.sparsity, lr)
            else:
                shrunk = sel_mod.proximal_step(sel, cfg.sparsity, lr)
            # write through so the optimizer keeps updating the same arrays
            sel.weights[...] = shrunk.weights

            norms = sel_mod.column_norms(sel)
            active = (norms > 0.0).any(axis=0).sum() if norms.ndim == 2 else (norms > 0.0).sum()
            hist_pred[k] = l_pred
            hist_red[k] = red_val
            hist_active[k] = int(active)
            hist_lr[k] = lr
            hist_wall[k] = time.perf_counter() - t0

    model = ComponentModel(selector=sel, forecaster=fc_params, variate=variate, cell=cell)
    history = TrainHistory(
        l_pred=hist_pred, l_red=hist_red, active=hist_active, lr=hist_lr, wall_s=hist_wall
    )
    return model, history


def _component_task(args):
    windows, variate, cfg = args
    return variate, train_component(windows, variate, cfg)


def train_all(data: Dataset | WindowSet, cfg: TrainConfig, workers: int | None = None,
              variates: list[int] | None = None) -> TrainResult:
    """Train every component (or the given subset) of a dataset.

    A ``Dataset`` is standardized per variate and windowed with ``cfg.context``
    first; a prebuilt ``WindowSet`` is used as-is.  Components are independent,
    so ``workers > 1`` fans them out to a process pool; results are identical
    either way.  A component failure is recorded and does not stop the rest.
    """
    cfg.validate()
    if isinstance(data, Dataset):
        standardized, _ = standardize(data)
        windows = make_windows(standardized, cfg.context)
        names = list(data.variate_names)
    else:
        windows = data
        names = None
    n = windows.n_variates
    targets = variates if variates is not None else list(range(n))
    models: list = [None] * n
    histories: list = [None] * n
    failures: dict[int, str] = {}

    def record(variate, outcome, error=None):
        if error is not None:
            failures[variate] = str(error)
        else:
            model, history = outcome
            if names:
                model.variate_names = names
            models[variate] = model
            histories[variate] = history

    if workers is not None and workers > 1 and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {v: pool.submit(_component_task, (windows, v, cfg)) for v in targets}
            for v, fut in futures.items():
                try:
                    record(v, fut.result()[1])
                except Exception as exc:  # noqa: BLE001 - per-component isolation
                    record(v, None, error=exc)
    else:
        for v in targets:
            try:
                record(v, train_component(windows, v, cfg))
            except Exception as exc:  # noqa: BLE001 - per-component isolation
                record(v, None, error=exc)
    return TrainResult(models=models, histories=histories, failures=failures)


CHECKPOINT_FORMAT = 1


def save_component(model: ComponentModel, path) -> None:
    """Write one component checkpoint (see tensorfile for the binary layout)."""
    tensors = {f"selector.{k.removeprefix('sel_')}": v for k, v in model.selector.as_dict().items()}
    tensors.update({f"forecaster.{k}": v for k, v in model.forecaster.as_dict().items()})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "variate": model.variate,
        "cell": model.cell,
        "per_lag": model.selector.per_lag,
        "heads": model.forecaster.heads,
        "variate_names": model.variate_names,
    }
    write_tensors(path, tensors, meta)


def load_component(path) -> ComponentModel:
    tensors, meta = read_tensors(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    sel = SelectorParams(
        weights=tensors["selector.weights"],
        bias=tensors["selector.bias"],
        logits=tensors["selector.logits"],
        per_lag=bool(meta["per_lag"]),
    )
    fc_kwargs = {
        k.removeprefix("forecaster."): v for k, v in tensors.items() if k.startswith("forecaster.")
    }
    fc = SLSTMParams(**fc_kwargs, heads=int(meta["heads"]))
    return ComponentModel(
        selector=sel, forecaster=fc, variate=int(meta["variate"]), cell=meta["cell"],
        variate_names=meta.get("variate_names"),
    )
