"""Pure-numpy implementations of the hot kernels.

`nep.backend` selects these when the compiled extension (nep._ckernels) is
unavailable. Each function here is the reference semantics; the compiled
versions must agree exactly for integer/index outputs and to floating-point
round-off for the softmax.
"""

import numpy as np
from scipy.special import erf

NAME = "python"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_fwd(x):
    """Exact (erf) GELU. Returns (y, dcoef) with dcoef the pointwise
    derivative, so the backward pass is a single multiply."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (x * cdf).astype(x.dtype), (cdf + x * pdf).astype(x.dtype)


def layer_norm_fwd(x, g, b, eps=1e-5):
    """Row-wise layer norm over the last axis of a 2-D array.

    Returns (y, xhat, inv_std); xhat and inv_std feed the backward pass.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, xhat, inv


def masked_softmax(scores, causal, key_valid=None):
    """Row-wise softmax over the last axis with attention masking.

    scores: [B, H, T, T] array (query axis -2, key axis -1).
    causal: if True, key j > query i is masked out.
    key_valid: optional [B, T] bool; False keys are masked for every query.

    Masked entries of the result are exactly 0.0; every row sums to 1.
    """
    b, h, t, _ = scores.shape
    allowed = np.ones((b, 1, t, t), dtype=bool)
    if causal:
        allowed = allowed & np.tril(np.ones((t, t), dtype=bool))
    if key_valid is not None:
        allowed = allowed & key_valid[:, None, None, :]
    neg = np.array(-np.inf, dtype=scores.dtype)
    masked = np.where(allowed, scores, neg)
    masked = masked - masked.max(axis=-1, keepdims=True)
    ex = np.exp(masked)
    ex = np.where(allowed, ex, 0.0).astype(scores.dtype)
    return ex / ex.sum(axis=-1, keepdims=True)


def attn_softmax_grad(probs, dprobs):
    """Backward of masked_softmax: dscores = p * (dp - sum(p * dp)).

    Masked positions have p == 0, so their gradient is exactly 0.
    """
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def markov_walk(cum_rows, start, uniforms):
    """Walk a first-order chain using pre-drawn uniforms.

    cum_rows: [K, K] float64, each row the cumulative sum of a stochastic
    transition row. start: initial token index. uniforms: [n] draws in [0,1).
    Returns the n visited tokens after `start` as int64.

    Step rule: next = first index j with u < cum_rows[cur, j], clamped to
    K - 1 (guards cum rows that fall short of 1.0 by round-off). The compiled
    kernel applies the identical rule, so outputs are bit-equal across
    backends.
    """
    k = cum_rows.shape[0]
    out = np.empty(len(uniforms), dtype=np.int64)
    cur = int(start)
    for i, u in enumerate(uniforms):
        nxt = int(np.searchsorted(cum_rows[cur], u, side="right"))
        if nxt >= k:
            nxt = k - 1
        out[i] = nxt
        cur = nxt
    return out


def concordance_counts(risk, times, events, chunk=512):
    """Harrell pair counts: (concordant, risk-tied, comparable).

    A pair (i, j) is comparable when times[i] < times[j] and events[i] == 1;
    it is concordant when risk[i] > risk[j] and risk-tied when equal. Counts
    are exact integers, so the resulting index matches brute-force pair
    enumeration bit-for-bit.
    """
    risk = np.asarray(risk, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    n = len(risk)
    conc = 0
    tied = 0
    comp = 0
    # Chunked broadcasting keeps the n^2 masks off the heap for large n.
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        ev = events[lo:hi] == 1
        comparable = (times[lo:hi, None] < times[None, :]) & ev[:, None]
        comp += int(comparable.sum())
        ri = risk[lo:hi, None]
        conc += int((comparable & (ri > risk[None, :])).sum())
        tied += int((comparable & (ri == risk[None, :])).sum())
    return conc, tied, comp
