"""Performance metrics: pilot-contamination metric, NMSE, SER, empirical CDFs
and metric-binned averages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg


def pc_metric(xi: np.ndarray, Xp: np.ndarray, sigma_n2: float) -> np.ndarray:
    """Per-UE pilot contamination ``c_k`` in (0, 1].

    For every AP the normalized diagonal of the pilot-MMSE error covariance
    under the LSFC-only model, ``[(diag(xi_l)^-1 + Xp Xp^H / sigma_n2)^-1]_kk / xi_lk``,
    is evaluated; ``c_k`` is its minimum over the APs.

    ``xi`` is a ``ChannelStats`` or the ``(L, K)`` array of LSFCs; only the
    antenna-averaged LSFCs enter, not the full correlation matrices.
    """
    xi = np.asarray(getattr(xi, "xi", xi), dtype=float)
    if np.any(xi <= 0):
        raise ValueError("LSFCs must be strictly positive")
    if not sigma_n2 > 0:
        raise ValueError("pc_metric needs a positive noise power")
    Xp = np.asarray(Xp, dtype=complex)
    L, K = xi.shape
    # normalize by xi to keep the per-AP matrix well scaled:
    # D^-1 + G/s = D^-1/2 (I + D^1/2 G D^1/2 / s) D^-1/2
    d = np.sqrt(xi)
    G = Xp @ np.conj(Xp.T) / sigma_n2
    A = np.eye(K) + d[:, :, None] * G[None] * d[:, None, :]
    inv, ok = linalg.inv_pd(A)
    if not np.all(ok):
        raise np.linalg.LinAlgError("pilot-contamination matrix is not positive definite")
    ratio = np.real(np.diagonal(inv, axis1=-2, axis2=-1))
    return ratio.min(axis=0)


def nmse(H: np.ndarray, H_hat: np.ndarray) -> float:
    den = np.sum(np.abs(H) ** 2)
    if den == 0:
        raise ValueError("NMSE undefined for an all-zero channel")
    return float(np.sum(np.abs(H - H_hat) ** 2) / den)


def nmse_per_ue(H: np.ndarray, H_hat: np.ndarray) -> np.ndarray:
    """Column-wise NMSE of an ``(L*N) x K`` channel matrix."""
    den = np.sum(np.abs(H) ** 2, axis=0)
    if np.any(den == 0):
        raise ValueError("NMSE undefined for an all-zero channel column")
    return np.sum(np.abs(H - H_hat) ** 2, axis=0) / den


def ser(X_true: np.ndarray, X_hat: np.ndarray) -> float:
    X_true, X_hat = np.asarray(X_true), np.asarray(X_hat)
    if X_true.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X_true.shape} vs {X_hat.shape}")
    if X_true.size == 0:
        return 0.0
    return float(np.mean(X_true != X_hat))


def ser_per_ue(X_true: np.ndarray, X_hat: np.ndarray) -> np.ndarray:
    X_true, X_hat = np.asarray(X_true), np.asarray(X_hat)
    if X_true.shape != X_hat.shape:
        raise ValueError(f"shape mismatch {X_true.shape} vs {X_hat.shape}")
    if X_true.shape[1] == 0:
        return np.zeros(X_true.shape[0])
    return np.mean(X_true != X_hat, axis=1)


@dataclass
class ECDF:
    """Right-continuous empirical CDF."""

    support: np.ndarray
    fractions: np.ndarray

    def __call__(self, q):
        n = self.support.size
        return np.searchsorted(self.support, q, side="right") / n

    def quantile(self, level: float) -> float:
        return float(np.quantile(self.support, level))


def ecdf(samples) -> ECDF:
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("ecdf needs at least one sample")
    return ECDF(support=s, fractions=np.arange(1, s.size + 1) / s.size)


def log_bin_edges(values, n_bins: int = 20, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo = float(np.min(v)) if lo is None else lo
    hi = float(np.max(v)) if hi is None else hi
    if hi <= lo:
        hi = lo * (1 + 1e-9) + 1e-300
    return np.logspace(np.log10(lo), np.log10(hi), n_bins + 1)


@dataclass
class BinnedMeans:
    centers: np.ndarray  # geometric centers of nonempty bins
    means: np.ndarray
    counts: np.ndarray
    bin_index: np.ndarray


def bin_by_metric(metric, values, edges) -> BinnedMeans:
    """Average ``values`` over bins of ``metric``; empty bins are omitted.

    Bins are ``[e_i, e_{i+1})`` with the last bin closed on the right;
    points outside the edges are dropped.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    m = np.asarray(metric, dtype=float).ravel()
    v = np.asarray(values, dtype=float).ravel()
    idx = np.searchsorted(edges, m, side="right") - 1
    idx[m == edges[-1]] = edges.size - 2
    keep = (idx >= 0) & (idx < edges.size - 1) & np.isfinite(v)
    idx, v = idx[keep], v[keep]
    nb = edges.size - 1
    counts = np.bincount(idx, minlength=nb)
    sums = np.bincount(idx, weights=v, minlength=nb)
    ne = counts > 0
    centers = np.sqrt(edges[:-1] * edges[1:]) if edges[0] > 0 else 0.5 * (edges[:-1] + edges[1:])
    return BinnedMeans(centers[ne], sums[ne] / counts[ne], counts[ne], np.flatnonzero(ne))
