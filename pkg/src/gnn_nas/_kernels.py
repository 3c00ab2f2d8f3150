"""Compiled per-edge loops for multi-head message passing.

Edges are grouped by target through ``indptr`` (CSR over targets) and
``src`` gives each edge's sending node.  Node arrays hold ``heads`` blocks of
equal width side by side; ``coeff`` arrays are ``[E x heads]``.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def sddmm(indptr, src, a, b, heads):
    """out[e, k] = <a[i], b[src[e]]> restricted to head block k."""
    n = indptr.shape[0] - 1
    d = a.shape[1] // heads
    out = np.zeros((src.shape[0], heads), dtype=a.dtype)
    for i in range(n):
        ai = a[i]
        for e in range(indptr[i], indptr[i + 1]):
            bj = b[src[e]]
            for k in range(heads):
                # accumulate in the array dtype so float32 inputs vectorize
                s = out[e, k]
                base = k * d
                for t in range(base, base + d):
                    s += ai[t] * bj[t]
                out[e, k] = s
    return out


@njit(cache=True, fastmath=True)
def segmax(indptr, src, coeff, x, heads):
    """Per-target max of coeff * x[src]; empty targets give zeros."""
    n = indptr.shape[0] - 1
    kd = x.shape[1]
    d = kd // heads
    out = np.zeros((n, kd), dtype=x.dtype)
    for i in range(n):
        first = indptr[i]
        if first == indptr[i + 1]:
            continue
        oi = out[i]
        xj = x[src[first]]
        for k in range(heads):
            c = coeff[first, k]
            for t in range(k * d, (k + 1) * d):
                oi[t] = c * xj[t]
        for e in range(first + 1, indptr[i + 1]):
            xj = x[src[e]]
            for k in range(heads):
                c = coeff[e, k]
                for t in range(k * d, (k + 1) * d):
                    oi[t] = max(oi[t], c * xj[t])
    return out


@njit(cache=True, fastmath=True)
def segmax_backward(indptr, src, coeff, x, out, g, heads, need_coeff):
    """Route each output gradient to the first edge attaining the max."""
    n, kd = g.shape
    d = kd // heads
    gx = np.zeros_like(x)
    gc = np.zeros((coeff.shape[0], heads), dtype=x.dtype)
    arg = np.empty(kd, dtype=np.int64)
    for i in range(n):
        last = indptr[i + 1]
        if indptr[i] == last:
            continue
        arg[:] = last
        for e in range(indptr[i], last):
            j = src[e]
            for k in range(heads):
                c = coeff[e, k]
                b = k * d
                for t in range(b, b + d):
                    hit = (arg[t] == last) & (c * x[j, t] == out[i, t])
                    arg[t] = e if hit else arg[t]
        for t in range(kd):
            e = arg[t]
            j = src[e]
            k = t // d
            gx[j, t] += coeff[e, k] * g[i, t]
            if need_coeff:
                gc[e, k] += g[i, t] * x[j, t]
    return gx, gc
