"""Benchmark generators with known Granger-causal structure.

Two families:

* Lorenz-96, the cyclic chaotic system
      dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F,
  integrated with classical RK4 at a fixed sampling interval.  Gaussian
  observation noise is added to the recorded samples (it does not feed back
  into the dynamics).  Every variate i depends on {i-2, i-1, i, i+1} mod V.

* A stationary linear VAR(L) process where each variate depends on itself at
  every lag plus a fixed number of extra cross dependencies, each placed at a
  single random lag.  The ground truth is lag-resolved.

All randomness flows through numpy's Philox counter-based generator keyed by
the config seed, so identical seeds give bit-identical series on any build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .graph import GCGraph

MIN_VAR_COEFF = 0.05  # lower magnitude bound of drawn VAR coefficients
RESCALE_FLOOR = MIN_VAR_COEFF / 2  # reject draws whose stabilization lands below this
TARGET_RADIUS = 0.95
MAX_DRAW_ATTEMPTS = 100


class SimulationError(RuntimeError):
    pass


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


@dataclass
class Lorenz96Config:
    n_variates: int = 20
    n_steps: int = 500
    forcing: float = 10.0
    dt: float = 0.05
    noise_std: float = 0.1
    init_std: float = 0.01
    burn_in: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.n_variates < 4:
            raise ValueError("Lorenz-96 needs at least 4 variates (cyclic stencil)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one sampled step")
        if self.noise_std < 0 or self.init_std < 0 or self.burn_in < 0:
            raise ValueError("noise_std, init_std, burn_in must be non-negative")


@dataclass
class VARConfig:
    n_variates: int = 10
    n_steps: int = 1000
    n_lags: int = 2
    extra_edges: int = 3
    coeff_scale: float = 0.5
    noise_std: float = 0.1
    burn_in: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.n_variates < 2:
            raise ValueError("need at least 2 variates")
        if self.n_lags < 1:
            raise ValueError("lag order must be >= 1")
        if not 0 <= self.extra_edges <= self.n_variates - 1:
            raise ValueError("extra_edges must be in [0, V-1]")
        if self.coeff_scale < MIN_VAR_COEFF:
            raise ValueError(f"coeff_scale must be >= {MIN_VAR_COEFF}")
        if self.n_steps < 1 or self.burn_in < 0:
            raise ValueError("bad step counts")


def lorenz96_derivative(x: np.ndarray, forcing: float) -> np.ndarray:
    """Right-hand side (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F with cyclic indices."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 4:
        raise ValueError("Lorenz-96 needs at least 4 variates")
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def _rk4_step(x: np.ndarray, dt: float, forcing: float) -> np.ndarray:
    k1 = lorenz96_derivative(x, forcing)
    k2 = lorenz96_derivative(x + 0.5 * dt * k1, forcing)
    k3 = lorenz96_derivative(x + 0.5 * dt * k2, forcing)
    k4 = lorenz96_derivative(x + dt * k3, forcing)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_truth(n_variates: int) -> GCGraph:
    """Stencil dependencies plus self: edge (v, w) iff w in {v-2, v-1, v, v+1}."""
    adj = np.zeros((n_variates, n_variates), dtype=bool)
    for v in range(n_variates):
        for w in (v - 2, v - 1, v, v + 1):
            adj[v, w % n_variates] = True
    return GCGraph(adjacency=adj)


def simulate_lorenz96(cfg: Lorenz96Config) -> Dataset:
    cfg.validate()
    rng = _rng(cfg.seed)
    x = rng.normal(0.0, cfg.init_std, size=cfg.n_variates)
    for step in range(cfg.burn_in):
        x = _rk4_step(x, cfg.dt, cfg.forcing)
        if not np.isfinite(x).all():
            raise SimulationError(f"Lorenz-96 state diverged at burn-in step {step}")
    samples = np.empty((cfg.n_steps, cfg.n_variates), dtype=np.float64)
    for step in range(cfg.n_steps):
        x = _rk4_step(x, cfg.dt, cfg.forcing)
        if not np.isfinite(x).all():
            raise SimulationError(f"Lorenz-96 state diverged at step {step}")
        samples[step] = x
    if cfg.noise_std > 0:
        samples += rng.normal(0.0, cfg.noise_std, size=samples.shape)
    return Dataset(values=samples.T, truth=lorenz96_truth(cfg.n_variates))


def _companion_radius(coeffs: np.ndarray) -> float:
    """Spectral radius of the VAR companion matrix; < 1 means stationary."""
    n_lags, v, _ = coeffs.shape
    top = np.concatenate([coeffs[lag] for lag in range(n_lags)], axis=1)
    if n_lags == 1:
        companion = top
    else:
        eye = np.eye(v * (n_lags - 1))
        bottom = np.concatenate([eye, np.zeros((v * (n_lags - 1), v))], axis=1)
        companion = np.concatenate([top, bottom], axis=0)
    return float(np.abs(np.linalg.eigvals(companion)).max())


def draw_var_coefficients(cfg: VARConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw stationary VAR coefficients and the matching lag-resolved truth.

    Returns ``(coeffs, truth_mask)`` with shapes (L, V, V).  Every variate gets
    a self coefficient at each lag; ``extra_edges`` distinct other variates are
    added per row, each at one random lag.  Magnitudes are uniform in
    [MIN_VAR_COEFF, coeff_scale] with random sign.  Unstable draws are tamed by
    scaling lag-l blocks with s**l (which scales the companion spectrum by s);
    a draw is rejected when taming would push magnitudes below RESCALE_FLOOR,
    and after MAX_DRAW_ATTEMPTS rejections the generator gives up.
    """
    v, n_lags = cfg.n_variates, cfg.n_lags

    def one_draw():
        coeffs = np.zeros((n_lags, v, v), dtype=np.float64)
        mask = np.zeros((n_lags, v, v), dtype=bool)

        def draw_coeff():
            mag = rng.uniform(MIN_VAR_COEFF, cfg.coeff_scale)
            return mag if rng.uniform() < 0.5 else -mag

        for row in range(v):
            for lag in range(n_lags):
                coeffs[lag, row, row] = draw_coeff()
                mask[lag, row, row] = True
            others = [w for w in range(v) if w != row]
            picks = rng.choice(len(others), size=cfg.extra_edges, replace=False)
            for p in picks:
                w = others[int(p)]
                lag = int(rng.integers(n_lags))
                coeffs[lag, row, w] = draw_coeff()
                mask[lag, row, w] = True
        return coeffs, mask

    for _ in range(MAX_DRAW_ATTEMPTS):
        coeffs, mask = one_draw()
        radius = _companion_radius(coeffs)
        if radius < 1.0:
            return coeffs, mask
        scale = TARGET_RADIUS / radius
        scaled = coeffs * (scale ** np.arange(1, n_lags + 1))[:, None, None]
        if np.abs(scaled[mask]).min() >= RESCALE_FLOOR:
            return scaled, mask
    raise SimulationError(
        f"no stable VAR coefficient draw in {MAX_DRAW_ATTEMPTS} attempts "
        f"(coeff_scale={cfg.coeff_scale} too large?)"
    )


def var_step(coeffs: np.ndarray, history: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """One VAR transition: sum_l coeffs[l] @ history[:, -l] + noise.

    ``history`` is (V, L) with the newest state in the last column.
    """
    n_lags = coeffs.shape[0]
    out = noise.copy()
    for lag in range(n_lags):
        out += coeffs[lag] @ history[:, -(lag + 1)]
    return out


def simulate_var(cfg: VARConfig) -> Dataset:
    cfg.validate()
    rng = _rng(cfg.seed)
    coeffs, mask = draw_var_coefficients(cfg, rng)
    v, n_lags = cfg.n_variates, cfg.n_lags
    total = cfg.burn_in + cfg.n_steps
    innovations = rng.normal(0.0, cfg.noise_std, size=(total, v))
    series = np.zeros((v, n_lags + total), dtype=np.float64)
    for t in range(total):
        series[:, n_lags + t] = var_step(coeffs, series[:, t : n_lags + t], innovations[t])
    values = series[:, n_lags + cfg.burn_in :]
    truth = GCGraph(adjacency=mask.any(axis=0), per_lag=mask)
    return Dataset(values=values, truth=truth)
