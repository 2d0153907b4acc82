"""Fused single-antenna kernel for the Gaussian-mixture collapse.

With ``N == 1`` every covariance is a positive real scalar, so the per-symbol
products, their normalizers and the two moment matches reduce to a short
scalar loop. The matrix implementation in :mod:`cellfree_jcd.ep` computes the
same quantities for any ``N``.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True, error_model="numpy")
def collapse_scalar(ymu, yvar, hmu, hvar, xs, logprior, vfloor, lt, mu1, v1, mu2, v2):
    """For edge ``e`` and candidate ``m``:

    ``P = hvar |x|^2``, ``S = P + yvar``, ``r = ymu - hmu x``,
    ``lt = -log S - |r|^2 / S``; the product mean/variance are
    ``m + P r / S`` and ``P yvar / S``. Weights ``softmax(logprior + lt)``
    mix them into ``(mu2, v2)`` for ``z`` and ``(mu1, v1)`` for ``z / x``.
    ``xs`` and ``logprior`` have one row or one row per edge.
    """
    E = ymu.shape[0]
    M = xs.shape[1]
    xrow = xs.shape[0] > 1
    prow = logprior.shape[0] > 1
    xinv = np.empty((xs.shape[0], M), dtype=np.complex128)
    xa2 = np.empty((xs.shape[0], M))
    for i in range(xs.shape[0]):
        for m in range(M):
            x = xs[i, m]
            xa2[i, m] = x.real * x.real + x.imag * x.imag
            xinv[i, m] = x.conjugate() / xa2[i, m]
    ma = np.empty(M, dtype=np.complex128)
    va = np.empty(M)
    w = np.empty(M)
    for e in range(E):
        xe = e if xrow else 0
        pe = e if prow else 0
        best = -np.inf
        for m in range(M):
            x = xs[xe, m]
            P = hvar[e] * xa2[xe, m]
            S = P + yvar[e]
            if not S > 0.0:
                S = abs(S) + vfloor[e]
            r = ymu[e] - hmu[e] * x
            t = -math.log(S) - (r.real * r.real + r.imag * r.imag) / S
            lt[e, m] = t
            g = P / S
            ma[m] = hmu[e] * x + g * r
            va[m] = P * (1.0 - g)
            w[m] = logprior[pe, m] + t
            if w[m] > best:
                best = w[m]
        tot = 0.0
        for m in range(M):
            w[m] = math.exp(w[m] - best)
            tot += w[m]
        a2 = 0.0 + 0.0j
        a1 = 0.0 + 0.0j
        for m in range(M):
            w[m] /= tot
            a2 += w[m] * ma[m]
            a1 += w[m] * ma[m] * xinv[xe, m]
        s2 = 0.0
        s1 = 0.0
        for m in range(M):
            d2 = ma[m] - a2
            d1 = ma[m] * xinv[xe, m] - a1
            s2 += w[m] * (va[m] + d2.real * d2.real + d2.imag * d2.imag)
            s1 += w[m] * (va[m] / xa2[xe, m] + d1.real * d1.real + d1.imag * d1.imag)
        mu2[e] = a2
        v2[e] = s2
        mu1[e] = a1
        v1[e] = s1
