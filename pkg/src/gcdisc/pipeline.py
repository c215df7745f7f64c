"""Fused selector + forecaster step used by the training loop.

For a projection W (D x V), bias b, and stacked gate input weights Wg
(4D x D), the input-path gate pre-activation of a window column s is

    Wg (W s + b) + bg  =  (Wg W) s + (Wg b + bg).

Since V is much smaller than D, applying the (4D x V) composite directly to
the raw window columns removes the widest matrix products from both passes.
Gradients map back exactly through the same factorization:

    dComposite = dpre^T s,   dW = Wg^T dComposite,
    dWg = dComposite W^T + outer(sum dpre, b),   db = Wg^T (sum dpre).

Per-lag selectors use one composite per lag.  The fused path reassociates
floating-point products, so its outputs differ from the modular
embed -> forward route in the last ulps; its gradients are exact for its own
forward (the acceptance gradient checks run through this path), and a test
pins the two routes together at reassociation tolerance.
"""

from __future__ import annotations

import numpy as np

from .selector import SelectorParams
from .slstm import GATES


class FusedPipeline:
    """One target variate's selector + forecaster, stepped on raw windows."""

    def __init__(self, sel: SelectorParams, forecaster):
        self.sel = sel
        self.forecaster = forecaster
        self._w_lag = None
        self._gates_buf = None

    def _gates(self, shape, dtype) -> np.ndarray:
        # persistent output buffer: fresh multi-MB allocations each step cost
        # more in page faults than the matmuls they feed
        if self._gates_buf is None or self._gates_buf.shape != shape \
                or self._gates_buf.dtype != dtype:
            self._gates_buf = np.empty(shape, dtype=dtype)
        return self._gates_buf

    def forward(self, contexts: np.ndarray) -> np.ndarray:
        """Predictions for a (B, V, C) window batch."""
        sel = self.sel
        p = self.forecaster.params
        wcat = p.input_weights()
        base = wcat @ sel.bias + p.biases()  # (4D,)
        w_lag = np.ascontiguousarray(contexts.transpose(2, 0, 1))  # (C, B, V)
        c_len, b, n_in = w_lag.shape
        gates_in = self._gates((c_len, b, 4 * p.width), w_lag.dtype)
        if sel.per_lag:
            comp = np.matmul(wcat, sel.weights)  # (L, 4D, V)
            # window column c carries lag C - c, i.e. composite index C-1-c
            np.matmul(w_lag, np.ascontiguousarray(comp[::-1].transpose(0, 2, 1)),
                      out=gates_in)
        else:
            comp_t = np.ascontiguousarray((wcat @ sel.weights).T)  # (V, 4D)
            np.matmul(w_lag.reshape(c_len * b, n_in), comp_t,
                      out=gates_in.reshape(c_len * b, 4 * p.width))
        gates_in += base
        self._w_lag = w_lag
        return self.forecaster.run_gates(gates_in)

    def backward(self, upstream) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
        """Gradients (d selector weights, d selector bias, forecaster grads)."""
        if self._w_lag is None:
            raise RuntimeError("backward called before forward")
        sel = self.sel
        p = self.forecaster.params
        d = p.width
        fc_grads, flat_dpre = self.forecaster.backward_gates(upstream)
        w_lag = self._w_lag
        c_len, b, n_in = w_lag.shape
        wcat = p.input_weights()
        d_bcat = np.concatenate([fc_grads[f"b_{g}"] for g in GATES])
        if sel.per_lag:
            d_pre = flat_dpre.reshape(c_len, b, 4 * d)
            d_comp_by_col = np.matmul(d_pre.transpose(0, 2, 1), w_lag)  # (C, 4D, V)
            d_comp = d_comp_by_col[::-1]
            d_sel_w = np.matmul(wcat.T, d_comp)  # (L, D, V)
            d_wcat = np.matmul(d_comp, sel.weights.transpose(0, 2, 1)).sum(axis=0)
        else:
            d_comp = flat_dpre.T @ w_lag.reshape(c_len * b, n_in)  # (4D, V)
            d_sel_w = wcat.T @ d_comp
            d_wcat = d_comp @ sel.weights.T
        d_wcat += np.outer(d_bcat, sel.bias)
        d_sel_b = wcat.T @ d_bcat
        for k, g in enumerate(GATES):
            fc_grads[f"w_{g}"] = d_wcat[k * d:(k + 1) * d]
        return d_sel_w, d_sel_b, fc_grads
