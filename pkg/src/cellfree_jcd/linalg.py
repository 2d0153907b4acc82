"""Batched Hermitian linear algebra on stacks of small complex matrices.

Every routine accepts arrays of shape ``(..., n, n)`` and works element-wise
over the leading batch axes, so a whole factor graph worth of ``N x N``
blocks can be processed in one call. A failed factorization of one block
never affects its neighbours: the positive-definiteness verdict is returned
as a boolean mask instead of raising.
"""

from __future__ import annotations

import numpy as np

PD_REL_TOL = 1e-12


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def eye_like(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    return np.broadcast_to(np.eye(n, dtype=a.dtype), a.shape)


def cholesky(a: np.ndarray, rel_tol: float = PD_REL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Lower Cholesky factor of each Hermitian block plus a PD mask.

    A block counts as positive definite when every pivot exceeds
    ``rel_tol * trace / n``. Factors of rejected blocks are filled with
    identity pivots and must not be used.
    """
    a = np.asarray(a, dtype=complex)
    n = a.shape[-1]
    if n == 1:
        piv = np.real(a)
        ok = np.isfinite(piv[..., 0, 0]) & (piv[..., 0, 0] > 0)
        return np.sqrt(np.where(ok[..., None, None], piv, 1.0)).astype(complex), ok
    a = hermitize(a)
    fac = np.zeros_like(a)
    trace = np.real(np.trace(a, axis1=-2, axis2=-1))
    thresh = rel_tol * trace / n
    ok = np.isfinite(trace) & (trace > 0)
    for j in range(n):
        row = fac[..., j, :j]
        pivot = np.real(a[..., j, j]) - np.sum(np.abs(row) ** 2, axis=-1)
        ok &= pivot > thresh
        d = np.sqrt(np.where(ok, pivot, 1.0))
        fac[..., j, j] = d
        if j + 1 < n:
            below = a[..., j + 1 :, j] - np.einsum("...ip,...p->...i", fac[..., j + 1 :, :j], np.conj(row))
            fac[..., j + 1 :, j] = below / d[..., None]
    return fac, ok


def is_pd(a: np.ndarray, rel_tol: float = PD_REL_TOL) -> np.ndarray:
    return cholesky(a, rel_tol)[1]


def _lower_inverse(fac: np.ndarray) -> np.ndarray:
    # forward substitution against the identity, column block at once
    n = fac.shape[-1]
    if n == 1:
        return 1.0 / fac
    inv = np.zeros_like(fac)
    for i in range(n):
        acc = np.eye(n, dtype=fac.dtype)[i] - np.einsum("...p,...pj->...j", fac[..., i, :i], inv[..., :i, :])
        inv[..., i, :] = acc / fac[..., i, i][..., None]
    return inv


def inv_pd(a: np.ndarray, rel_tol: float = PD_REL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of each Hermitian PD block via its Cholesky factor.

    Returns ``(inverse, ok)``; entries where ``ok`` is False are garbage.
    The result is exactly Hermitian.
    """
    fac, ok = cholesky(a, rel_tol)
    if fac.shape[-1] == 1:
        return (1.0 / np.real(fac) ** 2).astype(complex), ok
    linv = _lower_inverse(fac)
    inv = np.conj(np.swapaxes(linv, -1, -2)) @ linv
    return hermitize(inv), ok


def solve_pd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for Hermitian PD ``a`` with ``b`` of shape ``(..., n)``."""
    fac, ok = cholesky(a)
    if not np.all(ok):
        raise np.linalg.LinAlgError("matrix is not Hermitian positive definite")
    linv = _lower_inverse(fac)
    w = np.einsum("...ij,...j->...i", linv, b)
    return np.einsum("...ji,...j->...i", np.conj(linv), w)


def logdet_from_cholesky(fac: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.real(np.diagonal(fac, axis1=-2, axis2=-1))), axis=-1)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Hermitian square root of a PSD matrix.

    Eigenvalues below ``1e-12`` of the largest are treated as exact zeros so
    that rank-deficient inputs (e.g. duplicated rows) keep their structure.
    """
    w, v = np.linalg.eigh(hermitize(a))
    w = np.where(w > 1e-12 * np.max(w, axis=-1, keepdims=True), w, 0.0)
    return (v * np.sqrt(w)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))


def cho_solve(fac: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` given the lower Cholesky factor of ``a``; ``b`` is ``(..., n, m)``."""
    if fac.shape[-1] == 1:
        return b / (np.real(fac) ** 2)
    linv = _lower_inverse(fac)
    return np.conj(np.swapaxes(linv, -1, -2)) @ (linv @ b)
