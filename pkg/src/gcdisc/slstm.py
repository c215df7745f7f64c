"""Recurrent forecaster cells with hand-rolled backpropagation through time.

The main cell uses exponential gating: input and forget gates are
exponentials of their pre-activations, kept finite by a running stabilizer
state and renormalized by an accumulated normalizer state,

    z_t = tanh(Wz x_t + Rz h_{t-1} + bz)         cell input
    i~, f~, o~ analogous pre-activations
    m_t = max(f~ + m_{t-1}, i~)                  stabilizer (elementwise)
    i'_t = exp(i~ - m_t)                         stabilized input gate
    f'_t = exp(f~ + m_{t-1} - m_t)               stabilized forget gate
    c_t = f' * c_{t-1} + i' * z_t                cell state
    n_t = f' * n_{t-1} + i'                      normalizer
    h_t = sigmoid(o~) * c_t / n_t                hidden state

The stabilizer is a pure numerical device: shifting m by a constant while
rescaling c and n by exp(-shift) leaves every h_t unchanged.  Recurrence
matrices are block-diagonal with `heads` equal blocks; off-block entries are
exactly zero and their gradients are masked so they stay zero forever.

A scalar prediction head (dot product plus bias) sits on the last hidden
state.  `LSTMForecaster` is the like-for-like classic sigmoid/tanh cell used
as an ablation baseline.

Both forecasters run on a batch of embedded windows, shape (B, C, D), cache
all activations on forward, and return exact gradients for every parameter
and for the embedded inputs.  Ties in the stabilizer max route their
gradient through the forget branch.

Besides forward/backward on embedded inputs, both cells expose a gates-level
entry (run_gates / backward_gates) taking the input-path gate
pre-activations directly, laid out lag-major as (C, B, 4D).  The training
loop uses it to fold the input projection and the gate input weights into
one small composite matrix, avoiding the widest matrix products.  Both
entries run the recurrence identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

GATES = ("z", "i", "f", "o")


class ForecasterError(RuntimeError):
    pass


def _sigmoid(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    # 1/(1+exp(-x)) without temporaries; exp overflow saturates to exactly 0
    with np.errstate(over="ignore"):
        out = np.negative(x, out=out)
        np.exp(out, out=out)
        out += 1.0
        return np.reciprocal(out, out=out)


def block_mask(width: int, heads: int) -> np.ndarray:
    """Boolean (width, width) mask of the allowed block-diagonal entries."""
    if width % heads != 0:
        raise ValueError(f"width {width} not divisible by heads {heads}")
    mask = np.zeros((width, width), dtype=bool)
    size = width // heads
    for h in range(heads):
        sl = slice(h * size, (h + 1) * size)
        mask[sl, sl] = True
    return mask


@dataclass
class SLSTMParams:
    """Gate weights for one forecaster; also reused by the classic-LSTM ablation."""

    w_z: np.ndarray
    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    r_z: np.ndarray
    r_i: np.ndarray
    r_f: np.ndarray
    r_o: np.ndarray
    b_z: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray  # shape ()
    heads: int = 1

    @property
    def width(self) -> int:
        return self.w_z.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        """Name -> array views, suitable for in-place optimizer updates."""
        out = {}
        for g in GATES:
            out[f"w_{g}"] = getattr(self, f"w_{g}")
            out[f"r_{g}"] = getattr(self, f"r_{g}")
            out[f"b_{g}"] = getattr(self, f"b_{g}")
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def input_weights(self) -> np.ndarray:
        """Stacked (4*width, width) input weights, gate order z, i, f, o."""
        return np.concatenate([self.w_z, self.w_i, self.w_f, self.w_o], axis=0)

    def recurrent_weights(self) -> np.ndarray:
        return np.concatenate([self.r_z, self.r_i, self.r_f, self.r_o], axis=0)

    def biases(self) -> np.ndarray:
        return np.concatenate([self.b_z, self.b_i, self.b_f, self.b_o])


@dataclass
class SLSTMState:
    h: np.ndarray
    c: np.ndarray
    n: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, width: int) -> "SLSTMState":
        return cls(*(np.zeros(width) for _ in range(4)))


def init_slstm(width: int, heads: int = 1, seed: int = 0,
               rng: np.random.Generator | None = None) -> SLSTMParams:
    """Uniform(-sqrt(1/width), sqrt(1/width)) weights, zero biases except a
    0..1 forget-bias ramp that spreads the memory timescales across units.

    Draw order is fixed (w_z, w_i, w_f, w_o, r_z, .., r_o, head_w) so a seed
    pins the parameters bit-exactly.  Recurrence matrices are drawn dense and
    masked to their block diagonal.
    """
    if width % heads != 0:
        raise ValueError(f"width {width} not divisible by heads {heads}")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=seed))
    bound = np.sqrt(1.0 / width)
    mask = block_mask(width, heads)

    def draw():
        return rng.uniform(-bound, bound, size=(width, width))

    ws = {g: draw() for g in GATES}
    rs = {g: draw() * mask for g in GATES}
    return SLSTMParams(
        w_z=ws["z"], w_i=ws["i"], w_f=ws["f"], w_o=ws["o"],
        r_z=rs["z"], r_i=rs["i"], r_f=rs["f"], r_o=rs["o"],
        b_z=np.zeros(width), b_i=np.zeros(width),
        b_f=np.linspace(0.0, 1.0, width), b_o=np.zeros(width),
        head_w=rng.uniform(-bound, bound, size=width),
        head_b=np.zeros(()),
        heads=heads,
    )


def cell_step(params: SLSTMParams, x_t: np.ndarray, state: SLSTMState) -> tuple[np.ndarray, SLSTMState]:
    """Advance one time step for a single input vector."""
    d = params.width
    pre = params.input_weights() @ x_t + params.recurrent_weights() @ state.h + params.biases()
    z_pre, i_pre, f_pre, o_pre = pre[:d], pre[d:2 * d], pre[2 * d:3 * d], pre[3 * d:]
    z = np.tanh(z_pre)
    shifted_f = f_pre + state.m
    m = np.maximum(shifted_f, i_pre)
    i_gate = np.exp(i_pre - m)
    f_gate = np.exp(shifted_f - m)
    c = f_gate * state.c + i_gate * z
    n = f_gate * state.n + i_gate
    o = _sigmoid(o_pre)
    h = o * c / n
    for name, value in (("z", z), ("i", i_gate), ("f", f_gate), ("o", o),
                        ("cell", c), ("normalizer", n), ("hidden", h)):
        if not np.isfinite(value).all():
            raise ForecasterError(f"non-finite value in {name} during cell step")
    return h, SLSTMState(h=h, c=c, n=n, m=m)


def input_gates(params: SLSTMParams, embedded: np.ndarray):
    """Input-path gate pre-activations, laid out lag-major.

    Returns (single, x_flat, gates_in): x_flat is the (C*B, D) lag-major
    flattening of the embedded windows (kept for input-weight gradients),
    gates_in is (C, B, 4D).
    """
    d = params.width
    single = embedded.ndim == 2
    x = embedded[None] if single else embedded
    if x.ndim != 3 or x.shape[2] != d:
        raise ValueError(f"embedded must be (B, C, {d}) or (C, {d}), got {embedded.shape}")
    b, c_len, _ = x.shape
    x_flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(c_len * b, d)
    wcat_t = np.ascontiguousarray(params.input_weights().T)
    gates_in = (x_flat @ wcat_t + params.biases()).reshape(c_len, b, 4 * d)
    return single, x_flat, gates_in


class _ForecasterBase:
    """Shared plumbing: embedded-input entry points and reusable buffers."""

    def __init__(self, params: SLSTMParams):
        self.params = params
        self._mask4 = np.tile(block_mask(params.width, params.heads), (4, 1))
        self._cache = None
        self._buffers = {}

    def _buffer(self, name: str, shape, dtype) -> np.ndarray:
        key = (name, shape, dtype)
        buf = self._buffers.get(key)
        if buf is None:
            buf = np.empty(shape, dtype=dtype)
            self._buffers[key] = buf
        return buf

    def forward(self, embedded: np.ndarray):
        """Predict one scalar per window; embedded is (B, C, D) or (C, D)."""
        single, x_flat, gates_in = input_gates(self.params, embedded)
        pred = self.run_gates(gates_in)
        self._cache["x_flat"] = x_flat
        self._cache["single"] = single
        return float(pred[0]) if single else pred

    def _collect_gate_grads(self, grads, d_pre, hs, b, c_len, d):
        flat_dpre = d_pre.reshape(c_len * b, 4 * d)
        d_bcat = flat_dpre.sum(axis=0)
        d_rcat = flat_dpre.T @ hs[:-1].reshape(c_len * b, d)
        d_rcat *= self._mask4
        for k, g in enumerate(GATES):
            grads[f"r_{g}"] = d_rcat[k * d:(k + 1) * d]
            grads[f"b_{g}"] = d_bcat[k * d:(k + 1) * d]
        return grads, flat_dpre

    def backward(self, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Exact gradients of upstream . prediction, for every parameter and
        for the embedded inputs (same layout as the forward input)."""
        if self._cache is None:
            raise ForecasterError("backward called without a cached forward pass")
        if self._cache.get("x_flat") is None:
            raise ForecasterError("backward needs a forward(embedded) pass, not run_gates")
        single = self._cache["single"]
        if single and np.ndim(upstream) == 0:
            upstream = np.asarray([upstream])
        grads, flat_dpre = self.backward_gates(upstream)
        d = self.params.width
        b, c_len, _ = self._cache["shape"]
        d_wcat = flat_dpre.T @ self._cache["x_flat"]
        for k, g in enumerate(GATES):
            grads[f"w_{g}"] = d_wcat[k * d:(k + 1) * d]
        wcat = self.params.input_weights()
        d_embedded = (flat_dpre @ wcat).reshape(c_len, b, d).transpose(1, 0, 2)
        if single:
            d_embedded = d_embedded[0]
        return grads, d_embedded


class SLSTMForecaster(_ForecasterBase):
    """Sequence runner over the exponential-gated cell."""

    def run_gates(self, gates_in: np.ndarray) -> np.ndarray:
        p = self.params
        d = p.width
        c_len, b = gates_in.shape[0], gates_in.shape[1]
        dt = gates_in.dtype
        hs = self._buffer("hs", (c_len + 1, b, d), dt)
        cs = self._buffer("cs", (c_len + 1, b, d), dt)
        ns = self._buffer("ns", (c_len + 1, b, d), dt)
        ms = self._buffer("ms", (c_len + 1, b, d), dt)
        zs = self._buffer("zs", (c_len, b, d), dt)
        os_ = self._buffer("os", (c_len, b, d), dt)
        igs = self._buffer("igs", (c_len, b, d), dt)
        fgs = self._buffer("fgs", (c_len, b, d), dt)
        fbranch = self._buffer("fbranch", (c_len, b, d), np.dtype(bool))
        pre = self._buffer("pre", (b, 4 * d), dt)
        hs[0] = 0.0
        cs[0] = 0.0
        ns[0] = 0.0
        ms[0] = 0.0
        rcat_t = np.ascontiguousarray(p.recurrent_weights().T)

        if kernels.available() and dt == np.float64:
            kernels.slstm_forward(np.ascontiguousarray(gates_in), rcat_t,
                                  hs, cs, ns, ms, zs, os_, igs, fgs, fbranch)
        else:
            for t in range(c_len):
                np.matmul(hs[t], rcat_t, out=pre)
                pre += gates_in[t]
                i_pre = pre[:, d:2 * d]
                shifted_f = pre[:, 2 * d:3 * d]
                shifted_f += ms[t]
                np.tanh(pre[:, :d], out=zs[t])
                _sigmoid(pre[:, 3 * d:], out=os_[t])
                m = ms[t + 1]
                np.maximum(shifted_f, i_pre, out=m)
                np.greater_equal(shifted_f, i_pre, out=fbranch[t])
                np.subtract(i_pre, m, out=igs[t])
                np.exp(igs[t], out=igs[t])
                np.subtract(shifted_f, m, out=fgs[t])
                np.exp(fgs[t], out=fgs[t])
                np.multiply(fgs[t], cs[t], out=cs[t + 1])
                cs[t + 1] += igs[t] * zs[t]
                np.multiply(fgs[t], ns[t], out=ns[t + 1])
                ns[t + 1] += igs[t]
                np.multiply(os_[t], cs[t + 1], out=hs[t + 1])
                hs[t + 1] /= ns[t + 1]

        self._cache = {
            "shape": (b, c_len, d), "single": False, "x_flat": None,
            "hs": hs, "cs": cs, "ns": ns, "zs": zs, "os": os_,
            "igs": igs, "fgs": fgs, "fbranch": fbranch,
        }
        return hs[c_len] @ p.head_w + p.head_b

    def backward_gates(self, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients for the recurrence/bias/head parameters plus the
        flattened (C*B, 4D) gradient at the gate pre-activations, from which
        the caller derives input-side gradients."""
        if self._cache is None:
            raise ForecasterError("backward called without a cached forward pass")
        p, cc = self.params, self._cache
        b, c_len, d = cc["shape"]
        hs, cs, ns = cc["hs"], cc["cs"], cc["ns"]
        zs, os_, igs, fgs, fbranch = cc["zs"], cc["os"], cc["igs"], cc["fgs"], cc["fbranch"]
        dt = hs.dtype
        u = np.atleast_1d(np.asarray(upstream, dtype=dt))
        if u.shape != (b,):
            raise ValueError(f"upstream must have shape ({b},), got {u.shape}")
        rcat = p.recurrent_weights()

        grads = {"head_w": hs[c_len].T @ u, "head_b": np.array(u.sum())}
        d_pre = self._buffer("d_pre", (c_len, b, 4 * d), dt)
        if kernels.available() and dt == np.float64:
            kernels.slstm_backward(rcat, p.head_w, u, hs, cs, ns,
                                   zs, os_, igs, fgs, fbranch, d_pre)
            return self._collect_gate_grads(grads, d_pre, hs, b, c_len, d)

        dh = u[:, None] * p.head_w[None, :]
        dc = np.zeros((b, d), dtype=dt)
        dn = np.zeros((b, d), dtype=dt)
        dm = np.zeros((b, d), dtype=dt)

        for t in range(c_len - 1, -1, -1):
            z, o, ig, fg, fb = zs[t], os_[t], igs[t], fgs[t], fbranch[t]
            dp = d_pre[t]
            # h = o * c / n
            inv_n = 1.0 / ns[t + 1]
            dh *= inv_n
            do = dh * cs[t + 1]
            dc += dh * o
            dn -= do * o * inv_n
            # c = fg*c_prev + ig*z ; n = fg*n_prev + ig
            dfg = dc * cs[t]
            dfg += dn * ns[t]
            dig = dc * z
            dig += dn
            dz = dc * ig
            dc *= fg
            dn *= fg
            # ig = exp(i_pre - m) ; fg = exp(f_pre + m_prev - m)
            di_pre = dig
            di_pre *= ig
            df_exp = dfg
            df_exp *= fg
            # total gradient at m, then the max routing (ties -> forget
            # branch); the forget branch feeds f_pre and m_prev equally
            dm -= di_pre
            dm -= df_exp
            taken = dm * fb
            di_pre += dm
            di_pre -= taken
            dp[:, d:2 * d] = di_pre
            np.add(df_exp, taken, out=dp[:, 2 * d:3 * d])
            np.add(df_exp, taken, out=dm)  # gradient into m_prev
            np.multiply(dz, 1.0 - z * z, out=dp[:, :d])
            np.multiply(do * o, 1.0 - o, out=dp[:, 3 * d:])
            dh = dp @ rcat

        return self._collect_gate_grads(grads, d_pre, hs, b, c_len, d)


class LSTMForecaster(_ForecasterBase):
    """Classic sigmoid/tanh LSTM with the same width, head, and interface."""

    def run_gates(self, gates_in: np.ndarray) -> np.ndarray:
        p = self.params
        d = p.width
        c_len, b = gates_in.shape[0], gates_in.shape[1]
        dt = gates_in.dtype
        hs = self._buffer("hs", (c_len + 1, b, d), dt)
        cs = self._buffer("cs", (c_len + 1, b, d), dt)
        zs = self._buffer("zs", (c_len, b, d), dt)
        is_ = self._buffer("is", (c_len, b, d), dt)
        fs = self._buffer("fs", (c_len, b, d), dt)
        os_ = self._buffer("os", (c_len, b, d), dt)
        qs = self._buffer("qs", (c_len, b, d), dt)
        pre = self._buffer("pre", (b, 4 * d), dt)
        hs[0] = 0.0
        cs[0] = 0.0
        rcat_t = np.ascontiguousarray(p.recurrent_weights().T)

        if kernels.available() and dt == np.float64:
            kernels.lstm_forward(np.ascontiguousarray(gates_in), rcat_t,
                                 hs, cs, zs, is_, fs, os_, qs)
        else:
            for t in range(c_len):
                np.matmul(hs[t], rcat_t, out=pre)
                pre += gates_in[t]
                np.tanh(pre[:, :d], out=zs[t])
                _sigmoid(pre[:, d:2 * d], out=is_[t])
                _sigmoid(pre[:, 2 * d:3 * d], out=fs[t])
                _sigmoid(pre[:, 3 * d:], out=os_[t])
                np.multiply(fs[t], cs[t], out=cs[t + 1])
                cs[t + 1] += is_[t] * zs[t]
                np.tanh(cs[t + 1], out=qs[t])
                np.multiply(os_[t], qs[t], out=hs[t + 1])

        self._cache = {
            "shape": (b, c_len, d), "single": False, "x_flat": None,
            "hs": hs, "cs": cs, "zs": zs, "is": is_, "fs": fs, "os": os_, "qs": qs,
        }
        return hs[c_len] @ p.head_w + p.head_b

    def backward_gates(self, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
        if self._cache is None:
            raise ForecasterError("backward called without a cached forward pass")
        p, cc = self.params, self._cache
        b, c_len, d = cc["shape"]
        hs, cs = cc["hs"], cc["cs"]
        zs, is_, fs, os_, qs = cc["zs"], cc["is"], cc["fs"], cc["os"], cc["qs"]
        dt = hs.dtype
        u = np.atleast_1d(np.asarray(upstream, dtype=dt))
        if u.shape != (b,):
            raise ValueError(f"upstream must have shape ({b},), got {u.shape}")
        rcat = p.recurrent_weights()

        grads = {"head_w": hs[c_len].T @ u, "head_b": np.array(u.sum())}
        d_pre = self._buffer("d_pre", (c_len, b, 4 * d), dt)
        if kernels.available() and dt == np.float64:
            kernels.lstm_backward(rcat, p.head_w, u, hs, cs,
                                  zs, is_, fs, os_, qs, d_pre)
            return self._collect_gate_grads(grads, d_pre, hs, b, c_len, d)

        dh = u[:, None] * p.head_w[None, :]
        dc = np.zeros((b, d), dtype=dt)

        for t in range(c_len - 1, -1, -1):
            z, i, f, o, q = zs[t], is_[t], fs[t], os_[t], qs[t]
            dp = d_pre[t]
            do = dh * q
            dc += dh * o * (1.0 - q * q)
            df = dc * cs[t]
            di = dc * z
            dz = dc * i
            dc *= f
            np.multiply(dz, 1.0 - z * z, out=dp[:, :d])
            np.multiply(di * i, 1.0 - i, out=dp[:, d:2 * d])
            np.multiply(df * f, 1.0 - f, out=dp[:, 2 * d:3 * d])
            np.multiply(do * o, 1.0 - o, out=dp[:, 3 * d:])
            dh = dp @ rcat

        return self._collect_gate_grads(grads, d_pre, hs, b, c_len, d)


def forward(params: SLSTMParams, embedded: np.ndarray):
    """One-shot prediction without keeping the backward cache."""
    return SLSTMForecaster(params).forward(embedded)
