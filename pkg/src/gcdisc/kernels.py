"""Optional compiled inner loops for the forecaster recurrences.

The numpy implementations in `slstm` make one pass over the batch per
elementwise operation; these kernels fuse each lag into a single pass, which
matters because training is memory-bound.  They implement exactly the same
recurrences (same tie-breaks, same evaluation order per element, float64
only); `slstm` falls back to its numpy loops when numba is unavailable, when
GCDISC_NO_NUMBA is set, or for non-float64 inputs.  libm and numpy's
vectorized transcendentals may differ in the last ulp, so the two paths
agree to ~1e-15 relative rather than bit-for-bit; each path is
deterministic on its own, which is what the reproducibility contract needs.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("GCDISC_NO_NUMBA"):
        raise ImportError("numba disabled via GCDISC_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via GCDISC_NO_NUMBA runs
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        return wrap


def available() -> bool:
    return HAVE_NUMBA


@njit(cache=True)
def slstm_forward(gates_in, rcat_t, hs, cs, ns, ms, zs, os_, igs, fgs, fbranch):
    c_len, b, d4 = gates_in.shape
    d = d4 // 4
    for t in range(c_len):
        pre = np.dot(hs[t], rcat_t)
        for j in range(b):
            for k in range(d):
                zp = pre[j, k] + gates_in[t, j, k]
                ip = pre[j, d + k] + gates_in[t, j, d + k]
                fp = pre[j, 2 * d + k] + gates_in[t, j, 2 * d + k] + ms[t, j, k]
                op = pre[j, 3 * d + k] + gates_in[t, j, 3 * d + k]
                z = np.tanh(zp)
                forget = fp >= ip
                m = fp if forget else ip
                ig = np.exp(ip - m)
                fg = np.exp(fp - m)
                c = fg * cs[t, j, k] + ig * z
                n = fg * ns[t, j, k] + ig
                o = 1.0 / (1.0 + np.exp(-op))
                fbranch[t, j, k] = forget
                zs[t, j, k] = z
                os_[t, j, k] = o
                igs[t, j, k] = ig
                fgs[t, j, k] = fg
                cs[t + 1, j, k] = c
                ns[t + 1, j, k] = n
                ms[t + 1, j, k] = m
                hs[t + 1, j, k] = o * c / n


@njit(cache=True)
def slstm_backward(rcat, head_w, u, hs, cs, ns, zs, os_, igs, fgs, fbranch, d_pre):
    c_len, b, d = zs.shape
    dh = np.empty((b, d))
    for j in range(b):
        for k in range(d):
            dh[j, k] = u[j] * head_w[k]
    dc = np.zeros((b, d))
    dn = np.zeros((b, d))
    dm = np.zeros((b, d))
    for t in range(c_len - 1, -1, -1):
        for j in range(b):
            for k in range(d):
                z = zs[t, j, k]
                o = os_[t, j, k]
                ig = igs[t, j, k]
                fg = fgs[t, j, k]
                inv_n = 1.0 / ns[t + 1, j, k]
                dhv = dh[j, k] * inv_n
                dov = dhv * cs[t + 1, j, k]
                dcv = dc[j, k] + dhv * o
                dnv = dn[j, k] - dov * o * inv_n
                dfg = dcv * cs[t, j, k] + dnv * ns[t, j, k]
                dig = dcv * z + dnv
                dz = dcv * ig
                dc[j, k] = dcv * fg
                dn[j, k] = dnv * fg
                di = dig * ig
                dfe = dfg * fg
                dmt = dm[j, k] - di - dfe
                if fbranch[t, j, k]:
                    dip = di
                    dfp = dfe + dmt
                    dm[j, k] = dfp
                else:
                    dip = di + dmt
                    dfp = dfe
                    dm[j, k] = dfe
                d_pre[t, j, k] = dz * (1.0 - z * z)
                d_pre[t, j, d + k] = dip
                d_pre[t, j, 2 * d + k] = dfp
                d_pre[t, j, 3 * d + k] = dov * o * (1.0 - o)
        dh = np.dot(d_pre[t], rcat)


@njit(cache=True)
def lstm_forward(gates_in, rcat_t, hs, cs, zs, is_, fs, os_, qs):
    c_len, b, d4 = gates_in.shape
    d = d4 // 4
    for t in range(c_len):
        pre = np.dot(hs[t], rcat_t)
        for j in range(b):
            for k in range(d):
                zp = pre[j, k] + gates_in[t, j, k]
                ip = pre[j, d + k] + gates_in[t, j, d + k]
                fp = pre[j, 2 * d + k] + gates_in[t, j, 2 * d + k]
                op = pre[j, 3 * d + k] + gates_in[t, j, 3 * d + k]
                z = np.tanh(zp)
                i = 1.0 / (1.0 + np.exp(-ip))
                f = 1.0 / (1.0 + np.exp(-fp))
                o = 1.0 / (1.0 + np.exp(-op))
                c = f * cs[t, j, k] + i * z
                q = np.tanh(c)
                zs[t, j, k] = z
                is_[t, j, k] = i
                fs[t, j, k] = f
                os_[t, j, k] = o
                qs[t, j, k] = q
                cs[t + 1, j, k] = c
                hs[t + 1, j, k] = o * q


@njit(cache=True)
def lstm_backward(rcat, head_w, u, hs, cs, zs, is_, fs, os_, qs, d_pre):
    c_len, b, d = zs.shape
    dh = np.empty((b, d))
    for j in range(b):
        for k in range(d):
            dh[j, k] = u[j] * head_w[k]
    dc = np.zeros((b, d))
    for t in range(c_len - 1, -1, -1):
        for j in range(b):
            for k in range(d):
                z = zs[t, j, k]
                i = is_[t, j, k]
                f = fs[t, j, k]
                o = os_[t, j, k]
                q = qs[t, j, k]
                dov = dh[j, k] * q
                dcv = dc[j, k] + dh[j, k] * o * (1.0 - q * q)
                df = dcv * cs[t, j, k]
                di = dcv * z
                dz = dcv * i
                dc[j, k] = dcv * f
                d_pre[t, j, k] = dz * (1.0 - z * z)
                d_pre[t, j, d + k] = di * i * (1.0 - i)
                d_pre[t, j, 2 * d + k] = df * f * (1.0 - f)
                d_pre[t, j, 3 * d + k] = dov * o * (1.0 - o)
        dh = np.dot(d_pre[t], rcat)
