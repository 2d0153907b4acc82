"""Linear MMSE baselines: pilot-based and genie-aided channel estimation, and
the centralized MMSE MIMO detector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .model import ChannelStats, Constellation, Frame


class SingularityError(np.linalg.LinAlgError):
    """Raised when the observation covariance of an MMSE estimator is singular."""


@dataclass
class MmseEstimate:
    mu: np.ndarray  # (L, K, N)
    C: np.ndarray  # (L, K, N, N)

    @property
    def H_hat(self) -> np.ndarray:
        L, K, N = self.mu.shape
        return self.mu.transpose(0, 2, 1).reshape(L * N, K)


def _lmmse_block(Y_l: np.ndarray, X: np.ndarray, Xi_l: np.ndarray, sigma_n2: float):
    """LMMSE of ``vec(H_l)`` from ``vec(Y_l) = (X^T kron I_N) vec(H_l) + noise``.

    ``Y_l`` is ``(..., N, T)``, ``X`` is ``(K, T)``, ``Xi_l`` is ``(..., K, N, N)``;
    leading axes (APs) are batched.
    """
    K, T = X.shape
    N = Xi_l.shape[-1]
    batch = Xi_l.shape[:-3]
    if T == 0:
        # no observations: the estimate is the prior
        return np.zeros(batch + (K, N), dtype=complex), np.array(Xi_l, dtype=complex)
    xt =np.kron(X.T, np.eye(N))  # (T*N, K*N)
    big_xi = np.zeros(batch + (K * N, K * N), dtype=complex)
    for k in range(K):
        big_xi[..., k * N : (k + 1) * N, k * N : (k + 1) * N] = Xi_l[..., k, :, :]
    y = np.swapaxes(Y_l, -1, -2).reshape(batch + (T * N, 1))
    xxi = xt @ big_xi  # (..., TN, KN)
    S = xxi @ np.conj(xt.T) + sigma_n2 * np.eye(T * N)
    fac, ok = linalg.cholesky(S)
    if not np.all(ok):
        raise SingularityError(
            "pilot observation covariance is singular "
            f"(sigma_n2={sigma_n2}, rank-deficient symbols); add noise or use full-rank pilots"
        )
    G = linalg.cho_solve(fac, np.concatenate([xxi, y], axis=-1))
    gx, gy = G[..., : K * N], G[..., K * N :]
    mu = (np.conj(np.swapaxes(xxi, -1, -2)) @ gy)[..., 0]
    C = linalg.hermitize(big_xi - np.conj(np.swapaxes(xxi, -1, -2)) @ gx)
    mu = mu.reshape(batch + (K, N))
    C = np.stack([C[..., k * N : (k + 1) * N, k * N : (k + 1) * N] for k in range(K)], axis=-3)
    return mu, C


def pilot_mmse(Yp_l: np.ndarray, Xp: np.ndarray, Xi_l: np.ndarray, sigma_n2: float):
    """Per-AP pilot MMSE estimate.

    Parameters
    ----------
    Yp_l : (N, T_p) received pilots at one AP
    Xp : (K, T_p) pilot matrix
    Xi_l : (K, N, N) channel correlation matrices of that AP
    sigma_n2 : noise power

    Returns
    -------
    mu : (K, N) conditional means, C : (K, N, N) error covariances
    """
    return _lmmse_block(np.asarray(Yp_l), np.asarray(Xp), np.asarray(Xi_l), sigma_n2)


def pilot_mmse_all(frame: Frame, stats: ChannelStats, sigma_n2: float | None = None) -> MmseEstimate:
    """Pilot MMSE at every AP (the APs are processed independently)."""
    s2 = frame.sigma_n2 if sigma_n2 is None else sigma_n2
    L, K, N, _ = stats.Xi.shape
    Yp = frame.Yp.reshape(L, N, frame.T_p)
    mu, C = _lmmse_block(Yp, frame.Xp, stats.Xi, s2)
    return MmseEstimate(mu, C)


def genie_mmse(Y: np.ndarray, X: np.ndarray, stats: ChannelStats, sigma_n2: float) -> MmseEstimate:
    """MMSE channel estimate given every transmitted symbol (pilots and data)."""
    L, K, N, _ = stats.Xi.shape
    mu, C = _lmmse_block(Y.reshape(L, N, X.shape[1]), np.asarray(X), stats.Xi, sigma_n2)
    return MmseEstimate(mu, C)


def mmse_equalize(Yd: np.ndarray, H_hat: np.ndarray, sigma_n2: float, sigma_x2: float) -> np.ndarray:
    K = H_hat.shape[1]
    A = np.conj(H_hat.T) @ H_hat + (sigma_n2 / sigma_x2) * np.eye(K)
    fac, ok = linalg.cholesky(A)
    if not ok:
        raise SingularityError("MMSE detector Gram matrix is singular")
    return linalg.cho_solve(fac, np.conj(H_hat.T) @ Yd)


def mmse_detect(Yd: np.ndarray, H_hat: np.ndarray, sigma_n2: float, const: Constellation) -> np.ndarray:
    """Centralized linear MMSE detection followed by nearest-symbol slicing.

    Returns constellation indices of shape ``(K, T_d)``.
    """
    x = mmse_equalize(Yd, H_hat, sigma_n2, const.sigma_x2)
    return const.nearest(x)
