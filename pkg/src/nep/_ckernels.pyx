# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Same contracts as nep.kernels (the numpy fallback): integer/index outputs
are bit-identical across backends, floating outputs agree to round-off.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport INFINITY, erf, exp, sqrt

NAME = "native"

ctypedef fused floating:
    float
    double

cdef double _INV_SQRT2 = 1.0 / sqrt(2.0)
cdef double _INV_SQRT2PI = 1.0 / sqrt(2.0 * 3.14159265358979323846)


def gelu_fwd(x):
    """Exact (erf) GELU; returns (y, dcoef) like the numpy fallback."""
    arr = np.ascontiguousarray(x)
    flat = arr.reshape(-1)
    y = np.empty_like(arr)
    dcoef = np.empty_like(arr)
    if arr.dtype == np.float32:
        _gelu_f32(flat, y.reshape(-1), dcoef.reshape(-1))
    elif arr.dtype == np.float64:
        _gelu_f64(flat, y.reshape(-1), dcoef.reshape(-1))
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return y, dcoef


cdef void _gelu_core(floating[::1] x, floating[::1] y,
                     floating[::1] dcoef) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
        pdf = exp(-0.5 * v * v) * _INV_SQRT2PI
        y[i] = <floating> (v * cdf)
        dcoef[i] = <floating> (cdf + v * pdf)


def _gelu_f32(float[::1] x, float[::1] y, float[::1] dcoef):
    with nogil:
        _gelu_core(x, y, dcoef)


def _gelu_f64(double[::1] x, double[::1] y, double[::1] dcoef):
    with nogil:
        _gelu_core(x, y, dcoef)


def layer_norm_fwd(x, g, b, eps=1e-5):
    """Fused row-wise layer norm over the last axis of a 2-D array."""
    arr = np.ascontiguousarray(x)
    if arr.ndim != 2:
        raise ValueError("layer_norm_fwd expects a 2-D array")
    gv = np.ascontiguousarray(g, dtype=arr.dtype)
    bv = np.ascontiguousarray(b, dtype=arr.dtype)
    y = np.empty_like(arr)
    xhat = np.empty_like(arr)
    inv = np.empty((arr.shape[0], 1), dtype=arr.dtype)
    if arr.dtype == np.float32:
        _ln_f32(arr, gv, bv, y, xhat, inv.reshape(-1), eps)
    elif arr.dtype == np.float64:
        _ln_f64(arr, gv, bv, y, xhat, inv.reshape(-1), eps)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return y, xhat, inv


cdef void _ln_core(floating[:, ::1] x, floating[::1] g, floating[::1] b,
                   floating[:, ::1] y, floating[:, ::1] xhat,
                   floating[::1] inv, double eps) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], d = x.shape[1]
    cdef double mu, var, diff, s
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            var += diff * diff
        s = 1.0 / sqrt(var / d + eps)
        inv[i] = <floating> s
        for j in range(d):
            diff = (x[i, j] - mu) * s
            xhat[i, j] = <floating> diff
            y[i, j] = <floating> (diff * g[j] + b[j])


def _ln_f32(float[:, ::1] x, float[::1] g, float[::1] b, float[:, ::1] y,
            float[:, ::1] xhat, float[::1] inv, double eps):
    with nogil:
        _ln_core(x, g, b, y, xhat, inv, eps)


def _ln_f64(double[:, ::1] x, double[::1] g, double[::1] b, double[:, ::1] y,
            double[:, ::1] xhat, double[::1] inv, double eps):
    with nogil:
        _ln_core(x, g, b, y, xhat, inv, eps)


def masked_softmax(scores, causal, key_valid=None):
    arr = np.ascontiguousarray(scores)
    if arr.ndim != 4:
        raise ValueError("scores must be [B, H, T, T]")
    if key_valid is None:
        valid = np.ones((arr.shape[0], arr.shape[2]), dtype=np.uint8)
    else:
        valid = np.ascontiguousarray(key_valid, dtype=np.uint8)
    out = np.empty_like(arr)
    if arr.dtype == np.float32:
        _softmax_f32(arr, out, 1 if causal else 0, valid)
    elif arr.dtype == np.float64:
        _softmax_f64(arr, out, 1 if causal else 0, valid)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return out


cdef void _softmax_core(floating[:, :, :, ::1] scores,
                        floating[:, :, :, ::1] out,
                        int causal,
                        const unsigned char[:, ::1] valid) noexcept nogil:
    cdef Py_ssize_t b, h, i, j, jmax
    cdef Py_ssize_t nb = scores.shape[0], nh = scores.shape[1]
    cdef Py_ssize_t t = scores.shape[2]
    cdef double m, s, e
    for b in range(nb):
        for h in range(nh):
            for i in range(t):
                jmax = i + 1 if causal else t
                m = -INFINITY
                for j in range(jmax):
                    if valid[b, j] and scores[b, h, i, j] > m:
                        m = scores[b, h, i, j]
                s = 0.0
                for j in range(jmax):
                    if valid[b, j]:
                        e = exp(scores[b, h, i, j] - m)
                        out[b, h, i, j] = <floating> e
                        s += e
                    else:
                        out[b, h, i, j] = 0.0
                for j in range(jmax, t):
                    out[b, h, i, j] = 0.0
                if s > 0.0:
                    for j in range(jmax):
                        out[b, h, i, j] = <floating> (out[b, h, i, j] / s)


def _softmax_f32(float[:, :, :, ::1] scores, float[:, :, :, ::1] out,
                 int causal, const unsigned char[:, ::1] valid):
    with nogil:
        _softmax_core(scores, out, causal, valid)


def _softmax_f64(double[:, :, :, ::1] scores, double[:, :, :, ::1] out,
                 int causal, const unsigned char[:, ::1] valid):
    with nogil:
        _softmax_core(scores, out, causal, valid)


def attn_softmax_grad(probs, dprobs):
    p = np.ascontiguousarray(probs)
    dp = np.ascontiguousarray(dprobs, dtype=p.dtype)
    out = np.empty_like(p)
    last = p.shape[p.ndim - 1]
    flat_p = p.reshape(-1, last)
    flat_dp = dp.reshape(-1, last)
    flat_out = out.reshape(-1, last)
    if p.dtype == np.float32:
        _softmax_grad_f32(flat_p, flat_dp, flat_out)
    elif p.dtype == np.float64:
        _softmax_grad_f64(flat_p, flat_dp, flat_out)
    else:
        raise TypeError(f"unsupported dtype {p.dtype}")
    return out


cdef void _softmax_grad_core(floating[:, ::1] p, floating[:, ::1] dp,
                             floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = p.shape[0], t = p.shape[1]
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(t):
            inner += p[i, j] * dp[i, j]
        for j in range(t):
            out[i, j] = <floating> (p[i, j] * (dp[i, j] - inner))


def _softmax_grad_f32(float[:, ::1] p, float[:, ::1] dp, float[:, ::1] out):
    with nogil:
        _softmax_grad_core(p, dp, out)


def _softmax_grad_f64(double[:, ::1] p, double[:, ::1] dp, double[:, ::1] out):
    with nogil:
        _softmax_grad_core(p, dp, out)


def markov_walk(cum_rows, start, uniforms):
    cdef double[:, ::1] cum = np.ascontiguousarray(cum_rows, dtype=np.float64)
    cdef double[::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t k = cum.shape[0], n = u.shape[0]
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef Py_ssize_t cur = <Py_ssize_t> start
    with nogil:
        for i in range(n):
            j = 0
            # first j with u < cum[cur, j]; clamp guards round-off shortfall
            while j < k and u[i] >= cum[cur, j]:
                j += 1
            if j >= k:
                j = k - 1
            out[i] = j
            cur = j
    return out_arr


def concordance_counts(risk, times, events):
    cdef double[::1] r = np.ascontiguousarray(risk, dtype=np.float64)
    cdef double[::1] t = np.ascontiguousarray(times, dtype=np.float64)
    cdef cnp.int64_t[::1] e = np.ascontiguousarray(events, dtype=np.int64)
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t i, j
    cdef long long conc = 0, tied = 0, comp = 0
    with nogil:
        for i in range(n):
            if e[i] != 1:
                continue
            for j in range(n):
                if t[i] < t[j]:
                    comp += 1
                    if r[i] > r[j]:
                        conc += 1
                    elif r[i] == r[j]:
                        tied += 1
    return int(conc), int(tied), int(comp)
