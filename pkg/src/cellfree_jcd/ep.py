"""Bilinear expectation propagation for joint channel estimation and detection.

The factor graph couples, per AP ``l``, UE ``k`` and slot ``t``, an auxiliary
variable ``z = h_{l,k} x_{kt}`` with the received samples, the channel and the
transmitted symbol. Gaussian messages on ``z`` and ``h`` are kept in natural
form (precision ``Lambda`` and precision-weighted mean ``gamma``) with cached
moments; symbol messages are categorical over the constellation.

Every phase is vectorized over all ``(l, k, t)`` edges and over a leading
batch of independent coherence blocks, and reads only what earlier phases
committed. One call of :func:`iterate` runs the schedule

    y->z, z->x, x->z, z->h, h->z, z->z.

Two variants share the code. The default (modified) variant also runs the
``y->z``, ``z->h``, ``h->z`` and ``z->z`` updates on pilot slots, so the
pilot-slot ``z->h`` messages feed the channel belief; ``legacy_mode`` confines
those updates to data slots.

Internally each block is expressed in units of its effective noise power, so
the noise variance is 1 (below 1 only when the variance floor is active) and
channel magnitudes are SNR-like numbers.

Array layout (``B`` = batch): Gaussian vectors ``(B, L, K, T, N)``, matrices
``(B, L, K, T, N, N)``, categorical messages ``(B, L, K, T_d, M)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, linalg
from .baseline import MmseEstimate
from .model import Constellation, Frame


class EPDivergence(FloatingPointError):
    """A message became non-finite during the iterations."""


@dataclass
class EPConfig:
    max_iter: int = 20
    eta: float = 0.5
    legacy_mode: bool = False
    variance_floor: float = 1e-12  # relative to the average per-UE received power
    prob_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"damping eta must lie in [0, 1], got {self.eta}")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")


# --------------------------------------------------------------------------
# single beliefs (API level; the engine itself works on stacked arrays)
# --------------------------------------------------------------------------

@dataclass
class GaussianBelief:
    """Complex Gaussian in natural form; ``Lambda == 0`` means uninformative."""

    gamma: np.ndarray
    Lambda: np.ndarray

    @classmethod
    def from_moments(cls, mu, C) -> "GaussianBelief":
        lam, ok = linalg.inv_pd(np.asarray(C, dtype=complex))
        if not np.all(ok):
            raise np.linalg.LinAlgError("covariance is not Hermitian positive definite")
        return cls(gamma=lam @ np.asarray(mu, dtype=complex), Lambda=lam)

    @classmethod
    def uninformative(cls, N: int) -> "GaussianBelief":
        return cls(np.zeros(N, dtype=complex), np.zeros((N, N), dtype=complex))

    @property
    def N(self) -> int:
        return self.gamma.shape[-1]

    @property
    def is_informative(self) -> bool:
        return bool(np.any(self.Lambda != 0))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_informative:
            raise ValueError("an uninformative belief has no moment form")
        C, ok = linalg.inv_pd(self.Lambda)
        if not np.all(ok):
            raise np.linalg.LinAlgError("precision is not Hermitian positive definite")
        return C @ self.gamma, C

    def __mul__(self, other: "GaussianBelief") -> "GaussianBelief":
        return GaussianBelief(self.gamma + other.gamma, self.Lambda + other.Lambda)

    def __truediv__(self, other: "GaussianBelief") -> "GaussianBelief":
        return GaussianBelief(self.gamma - other.gamma, self.Lambda - other.Lambda)


def normalize_probs(p: np.ndarray, floor: float) -> np.ndarray:
    """Normalize along the last axis and mix in ``floor`` so every entry is >= floor."""
    p = p / np.sum(p, axis=-1, keepdims=True)
    M = p.shape[-1]
    return (1.0 - M * floor) * p + floor


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1, keepdims=True)
    return m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True))


def normalize_logprobs(logp: np.ndarray, floor: float) -> np.ndarray:
    return normalize_probs(np.exp(logp - np.max(logp, axis=-1, keepdims=True)), floor)


@dataclass
class CategoricalBelief:
    probs: np.ndarray

    @classmethod
    def uniform(cls, M: int) -> "CategoricalBelief":
        return cls(np.full(M, 1.0 / M))

    def normalized(self, floor: float = 1e-12) -> "CategoricalBelief":
        return CategoricalBelief(normalize_probs(np.asarray(self.probs, dtype=float), floor))


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------

@dataclass
class EPState:
    # problem data in internal units
    y: np.ndarray  # (B, L, T, N)
    noise: np.ndarray  # (B,)
    pilots: np.ndarray  # (K, T_p)
    symbols: np.ndarray  # (M,)
    scale: np.ndarray  # (B,) internal unit of power
    vfloor_z: np.ndarray  # (B,)
    vfloor_h: np.ndarray  # (B,)
    config: EPConfig
    # fixed channel prior Psi_h -> h
    prior_gamma: np.ndarray  # (B, L, K, N)
    prior_Lambda: np.ndarray  # (B, L, K, N, N)
    # Psi_y -> z
    yz_gamma: np.ndarray
    yz_Lambda: np.ndarray
    yz_mu: np.ndarray
    yz_C: np.ndarray
    yz_set: np.ndarray  # (B, L, K, T) bool; False = uninformative
    # Psi_z -> z
    zz_gamma: np.ndarray
    zz_Lambda: np.ndarray
    zz_mu: np.ndarray
    zz_C: np.ndarray
    # Psi_z -> h
    zh_gamma: np.ndarray
    zh_Lambda: np.ndarray
    # h -> Psi_z
    hz_gamma: np.ndarray
    hz_Lambda: np.ndarray
    hz_mu: np.ndarray
    hz_C: np.ndarray
    # categorical messages on data slots
    zx: np.ndarray
    xz: np.ndarray
    iteration: int = 0
    guard_rejections: dict = field(default_factory=lambda: {"z_to_h": 0, "z_to_z": 0})

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        B, L, K, T, N = self.zz_mu.shape
        return B, L, K, T, N

    @property
    def T_p(self) -> int:
        return self.pilots.shape[1]

    def active_slots(self) -> slice:
        return slice(self.T_p, None) if self.config.legacy_mode else slice(None)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-block ``(B,)`` array to broadcast against ``ndim`` dims."""
    return np.reshape(v, (-1,) + (1,) * (ndim - 1))


def _matvec(a, v):
    return np.einsum("...ij,...j->...i", a, v)


def _outer(u, v):
    return u[..., :, None] * np.conj(v[..., None, :])


def _to_moments(gamma, Lambda):
    C, ok = linalg.inv_pd(Lambda)
    return _matvec(C, gamma), C, ok


def _to_natural(mu, C):
    lam, ok = linalg.inv_pd(C)
    return _matvec(lam, mu), lam, ok


def _damp(new, old, eta):
    return eta * new + (1.0 - eta) * old


def init_state(
    Y: np.ndarray,
    Xp: np.ndarray,
    sigma_n2,
    prior_mu: np.ndarray,
    prior_C: np.ndarray,
    const: Constellation,
    config: EPConfig | None = None,
) -> EPState:
    """Build the initial message set for a batch of blocks.

    ``Y`` is ``(B, L*N, T)``, ``prior_mu`` ``(B, L, K, N)``, ``prior_C``
    ``(B, L, K, N, N)`` and ``sigma_n2`` a scalar or ``(B,)``.

    The channel prior and all ``h -> Psi_z`` messages start at the pilot MMSE
    estimate; ``Psi_z -> z`` starts at the moments of ``h x`` (known pilot on
    pilot slots; zero mean and ``(C + mu mu^H) sigma_x^2`` on data slots).
    Everything else is uninformative or uniform.
    """
    config = config or EPConfig()
    mu0 = np.asarray(prior_mu, dtype=complex)
    C0 = linalg.hermitize(np.asarray(prior_C, dtype=complex))
    B, L, K, N = mu0.shape
    Y = np.asarray(Y, dtype=complex)
    T = Y.shape[-1]
    Xp = np.asarray(Xp, dtype=complex).reshape(K, -1)
    T_p = Xp.shape[1]
    T_d = T - T_p
    sx2 = const.sigma_x2
    M = const.M
    s2 = np.broadcast_to(np.asarray(sigma_n2, dtype=float), (B,))

    second = (np.real(np.trace(C0, axis1=-2, axis2=-1)) + np.sum(np.abs(mu0) ** 2, axis=-1)) / N
    p_h = second.reshape(B, -1).mean(axis=1)
    if not np.all(p_h > 0):
        raise ValueError("channel prior carries no power")
    vfloor_h = config.variance_floor * p_h
    scale = np.maximum(s2, vfloor_h * sx2)
    noise = s2 / scale
    vfloor_h = vfloor_h / scale
    vfloor_z = vfloor_h * sx2

    mu0 = mu0 / np.sqrt(_bcast(scale, 4))
    C0 = C0 / _bcast(scale, 5)
    eye = np.eye(N)
    _, ok = linalg.cholesky(C0)
    C0 = np.where(ok[..., None, None], C0, C0 + _bcast(vfloor_h, 5) * eye)
    prior_gamma, prior_Lambda, _ = _to_natural(mu0, C0)

    zz_mu = np.zeros((B, L, K, T, N), dtype=complex)
    zz_C = np.zeros((B, L, K, T, N, N), dtype=complex)
    zz_mu[:, :, :, :T_p] = mu0[:, :, :, None, :] * Xp[None, None, :, :, None]
    zz_C[:, :, :, :T_p] = C0[:, :, :, None] * (np.abs(Xp) ** 2)[None, None, :, :, None, None]
    zz_C[:, :, :, T_p:] = ((C0 + _outer(mu0, mu0)) * sx2)[:, :, :, None]
    _, ok = linalg.cholesky(zz_C)
    zz_C = np.where(ok[..., None, None], zz_C, zz_C + _bcast(vfloor_z, 6) * eye)
    zz_gamma, zz_Lambda, _ = _to_natural(zz_mu, zz_C)

    y = Y.reshape(B, L, N, T).transpose(0, 1, 3, 2) / np.sqrt(_bcast(scale, 4))
    rep = lambda a: np.repeat(a[:, :, :, None], T, axis=3)  # noqa: E731
    zeros_v = np.zeros((B, L, K, T, N), dtype=complex)
    zeros_m = np.zeros((B, L, K, T, N, N), dtype=complex)
    uniform = np.full((B, L, K, T_d, M), 1.0 / M)

    return EPState(
        y=y,
        noise=noise,
        pilots=Xp,
        symbols=const.symbols.copy(),
        scale=scale,
        vfloor_z=vfloor_z,
        vfloor_h=vfloor_h,
        config=config,
        prior_gamma=prior_gamma,
        prior_Lambda=prior_Lambda,
        yz_gamma=zeros_v.copy(),
        yz_Lambda=zeros_m.copy(),
        yz_mu=zeros_v.copy(),
        yz_C=zeros_m.copy(),
        yz_set=np.zeros((B, L, K, T), dtype=bool),
        zz_gamma=zz_gamma,
        zz_Lambda=zz_Lambda,
        zz_mu=zz_mu,
        zz_C=zz_C,
        zh_gamma=zeros_v.copy(),
        zh_Lambda=zeros_m.copy(),
        hz_gamma=rep(prior_gamma),
        hz_Lambda=rep(prior_Lambda),
        hz_mu=rep(mu0),
        hz_C=rep(C0),
        zx=uniform.copy(),
        xz=uniform.copy(),
    )


def init_from_frame(frame: Frame, prior: MmseEstimate, const: Constellation, config: EPConfig | None = None) -> EPState:
    return init_state(frame.Y[None], frame.Xp, frame.sigma_n2, prior.mu[None], prior.C[None], const, config)


# --------------------------------------------------------------------------
# update rules
# --------------------------------------------------------------------------

def update_y_to_z(state: EPState) -> None:
    """Interference cancellation at each AP: subtract the other UEs' z beliefs.

    The sum over ``k' != k`` is computed as the total minus the own term.
    """
    sl = state.active_slots()
    N = state.dims[-1]
    zmu, zC = state.zz_mu[:, :, :, sl], state.zz_C[:, :, :, sl]
    others_mu = zmu.sum(axis=2, keepdims=True) - zmu
    others_C = zC.sum(axis=2, keepdims=True) - zC
    mu = state.y[:, :, None, sl] - others_mu
    C = linalg.hermitize(_bcast(state.noise, 6) * np.eye(N) + others_C)
    gamma, lam, ok = _to_natural(mu, C)
    if not np.all(ok):
        C = np.where(ok[..., None, None], C, C + _bcast(state.vfloor_z, 6) * np.eye(N))
        gamma, lam, _ = _to_natural(mu, C)

    # a message that has never been set has nothing to blend with
    eta = state.config.eta
    first = ~state.yz_set[:, :, :, sl]
    g = np.where(first[..., None], gamma, _damp(gamma, state.yz_gamma[:, :, :, sl], eta))
    lm = np.where(first[..., None, None], lam, _damp(lam, state.yz_Lambda[:, :, :, sl], eta))
    state.yz_gamma[:, :, :, sl] = g
    state.yz_Lambda[:, :, :, sl] = lm
    m, c, _ = _to_moments(g, lm)
    state.yz_mu[:, :, :, sl] = m
    state.yz_C[:, :, :, sl] = c
    state.yz_set[:, :, :, sl] = True


def log_theta(yz_mu, yz_C, hz_mu, hz_C, symbols, vfloor=0.0):
    """``log CN(0 | mu_yz - mu_hz x, C_yz + C_hz |x|^2)`` up to a constant.

    Candidate symbols get a new axis just before the vector axis; ``symbols``
    is either ``(M,)`` or broadcastable to ``yz_mu.shape[:-1] + (M,)``.
    Also returns the intermediates reused by :func:`collapse`.
    """
    x = np.asarray(symbols)[..., :, None]
    ax2 = np.abs(x) ** 2
    P = hz_C[..., None, :, :] * ax2[..., None]
    m = hz_mu[..., None, :] * x
    S = P + yz_C[..., None, :, :]
    fac, ok = linalg.cholesky(S)
    if not np.all(ok):
        vf = np.reshape(vfloor, np.shape(vfloor) + (1,) * (S.ndim - np.ndim(vfloor)))
        S = np.where(ok[..., None, None], S, S + vf * np.eye(S.shape[-1]))
        fac, ok = linalg.cholesky(S)
    r = yz_mu[..., None, :] - m
    sol = linalg.cho_solve(fac, np.concatenate([r[..., None], P], axis=-1))
    sr, sp = sol[..., 0], sol[..., 1:]
    quad = np.real(np.sum(np.conj(r) * sr, axis=-1))
    lt = -linalg.logdet_from_cholesky(fac) - quad
    return lt, (x, P, m, sr, sp)


def collapse(yz_mu, yz_C, hz_mu, hz_C, symbols, log_prior, vfloor=0.0):
    """Moment-match the posterior of ``z`` (b2) and of ``h = z / x`` (b1).

    For each candidate symbol the product of the ``y -> z`` message with the
    ``h`` belief pushed through ``z = h x`` is a Gaussian ``a(x)`` with
    normalizer ``theta(x)``; candidates are mixed with weights
    ``prior(x) * theta(x)``. Returns ``(mu_b1, C_b1, mu_b2, C_b2, log_theta)``.
    """
    lt, (x, P, m, sr, sp) = log_theta(yz_mu, yz_C, hz_mu, hz_C, symbols, vfloor)
    logw = log_prior + lt
    w = np.exp(logw - _logsumexp(logw))
    # product in Kalman form: mu_a = m + P S^-1 r, C_a = P - P S^-1 P
    mu_a = m + _matvec(P, sr)
    C_a = linalg.hermitize(P - P @ sp)

    def mix(means, covs):
        mu = np.einsum("...m,...mi->...i", w, means)
        d = means - mu[..., None, :]
        C = np.einsum("...m,...mij->...ij", w, covs + _outer(d, d))
        return mu, linalg.hermitize(C)

    mu_b2, C_b2 = mix(mu_a, C_a)
    mu_b1, C_b1 = mix(mu_a / x, C_a / (np.abs(x) ** 2)[..., None])
    return mu_b1, C_b1, mu_b2, C_b2, lt


def collapse_fast(yz_mu, yz_C, hz_mu, hz_C, symbols, log_prior, vfloor=0.0):
    """Same contract as :func:`collapse`; uses the fused kernel when ``N == 1``."""
    if yz_C.shape[-1] != 1:
        return collapse(yz_mu, yz_C, hz_mu, hz_C, symbols, log_prior, vfloor)
    lead = yz_mu.shape[:-1]
    xs = np.asarray(symbols, dtype=complex)
    M = xs.shape[-1]
    xs2 = xs.reshape(1, M) if xs.ndim == 1 else np.broadcast_to(xs, lead + (M,)).reshape(-1, M)
    lp = np.broadcast_to(log_prior, lead + (M,)).reshape(-1, M)
    E = int(np.prod(lead))
    vf = np.broadcast_to(np.reshape(vfloor, np.shape(vfloor) + (1,) * (len(lead) - np.ndim(vfloor))), lead)
    lt = np.empty((E, M))
    mu1 = np.empty(E, dtype=complex)
    mu2 = np.empty(E, dtype=complex)
    v1 = np.empty(E)
    v2 = np.empty(E)
    _kernels.collapse_scalar(
        np.ascontiguousarray(yz_mu).reshape(E), np.ascontiguousarray(yz_C.real).reshape(E),
        np.ascontiguousarray(hz_mu).reshape(E), np.ascontiguousarray(hz_C.real).reshape(E),
        np.ascontiguousarray(xs2), np.ascontiguousarray(lp, dtype=float),
        np.ascontiguousarray(vf, dtype=float).reshape(E), lt, mu1, v1, mu2, v2,
    )
    vec = lambda a: a.reshape(lead + (1,))  # noqa: E731
    mat = lambda a: a.astype(complex).reshape(lead + (1, 1))  # noqa: E731
    return vec(mu1), mat(v1), vec(mu2), mat(v2), lt.reshape(lead + (M,))


def update_z_to_x(state: EPState) -> None:
    """Local symbol beliefs at each AP, ``p(x) ~ theta(x)`` (data slots)."""
    T_p = state.T_p
    *_, lt = collapse_fast(
        state.yz_mu[:, :, :, T_p:], state.yz_C[:, :, :, T_p:],
        state.hz_mu[:, :, :, T_p:], state.hz_C[:, :, :, T_p:],
        state.symbols, np.zeros(state.symbols.shape), _bcast(state.vfloor_z, 4),
    )
    new = normalize_logprobs(lt, state.config.prob_floor)
    state.zx = normalize_probs(_damp(new, state.zx, state.config.eta), state.config.prob_floor)


def update_x_to_z(state: EPState) -> None:
    """CPU aggregation: product of the other APs' symbol beliefs."""
    logzx = np.log(state.zx)
    ext = logzx.sum(axis=1, keepdims=True) - logzx
    state.xz = normalize_logprobs(ext, state.config.prob_floor)


def _collapse_all(state: EPState, sl):
    """b1/b2 moments for the slots in ``sl`` (pilot and/or data)."""
    B, L, K, T, N = state.dims
    T_p = state.T_p
    start, stop, _ = sl.indices(T)
    n = stop - start
    out = [
        np.empty((B, L, K, n, N), dtype=complex),
        np.empty((B, L, K, n, N, N), dtype=complex),
        np.empty((B, L, K, n, N), dtype=complex),
        np.empty((B, L, K, n, N, N), dtype=complex),
    ]
    vf = _bcast(state.vfloor_z, 4)
    # pilot slots [start, split) and data slots [split, stop), both contiguous
    split = min(max(start, T_p), stop)
    if split > start:
        tp = slice(start, split)
        xs = np.broadcast_to(state.pilots[:, tp][None, None, :, :, None], (B, L, K, split - start, 1))
        res = collapse_fast(
            state.yz_mu[:, :, :, tp], state.yz_C[:, :, :, tp],
            state.hz_mu[:, :, :, tp], state.hz_C[:, :, :, tp],
            xs, np.zeros(xs.shape), vf,
        )
        for o, r in zip(out, res):
            o[:, :, :, : split - start] = r
    if stop > split:
        td = slice(split, stop)
        res = collapse_fast(
            state.yz_mu[:, :, :, td], state.yz_C[:, :, :, td],
            state.hz_mu[:, :, :, td], state.hz_C[:, :, :, td],
            state.symbols, np.log(state.xz[:, :, :, split - T_p : stop - T_p]), vf,
        )
        for o, r in zip(out, res):
            o[:, :, :, split - start :] = r
    return out


def _guarded_commit(state: EPState, name: str, sl, gamma_b, lam_b, ok_b, gamma_sub, lam_sub) -> None:
    """Commit the damped ratio ``b / sub`` on edges where it is Hermitian PD;
    elsewhere keep the last valid message."""
    lam = linalg.hermitize(lam_b - lam_sub)
    gamma = gamma_b - gamma_sub
    ok = ok_b & linalg.is_pd(lam) & np.all(np.isfinite(gamma), axis=-1)
    gs, ls = getattr(state, f"{name}_gamma"), getattr(state, f"{name}_Lambda")
    old_g, old_l = gs[:, :, :, sl], ls[:, :, :, sl]
    eta = state.config.eta
    gs[:, :, :, sl] = np.where(ok[..., None], _damp(gamma, old_g, eta), old_g)
    ls[:, :, :, sl] = np.where(ok[..., None, None], _damp(lam, old_l, eta), old_l)
    state.guard_rejections["z_to_h" if name == "zh" else "z_to_z"] += int(np.count_nonzero(~ok))


def update_z_to_h(state: EPState) -> None:
    """Channel information carried by each slot: b1 divided by the h message."""
    sl = state.active_slots()
    mu_b1, C_b1, _, _ = _collapse_all(state, sl)
    g_b, l_b, ok_b = _to_natural(mu_b1, C_b1)
    _guarded_commit(state, "zh", sl, g_b, l_b, ok_b, state.hz_gamma[:, :, :, sl], state.hz_Lambda[:, :, :, sl])


def update_h_to_z(state: EPState) -> None:
    """Prior plus every other slot's ``z -> h`` message (total minus self)."""
    sl = state.active_slots()
    tot_g = state.prior_gamma + state.zh_gamma.sum(axis=3)
    tot_l = state.prior_Lambda + state.zh_Lambda.sum(axis=3)
    g = tot_g[:, :, :, None] - state.zh_gamma[:, :, :, sl]
    lm = linalg.hermitize(tot_l[:, :, :, None] - state.zh_Lambda[:, :, :, sl])
    mu, C, ok = _to_moments(g, lm)
    if not np.all(ok):
        raise EPDivergence("channel belief lost positive definiteness")
    state.hz_gamma[:, :, :, sl] = g
    state.hz_Lambda[:, :, :, sl] = lm
    state.hz_mu[:, :, :, sl] = mu
    state.hz_C[:, :, :, sl] = C


def update_z_to_z(state: EPState) -> None:
    """Refined z beliefs for the next interference cancellation: b2 divided
    by the y message."""
    sl = state.active_slots()
    _, _, mu_b2, C_b2 = _collapse_all(state, sl)
    g_b, l_b, ok_b = _to_natural(mu_b2, C_b2)
    _guarded_commit(state, "zz", sl, g_b, l_b, ok_b, state.yz_gamma[:, :, :, sl], state.yz_Lambda[:, :, :, sl])
    mu, C, _ = _to_moments(state.zz_gamma[:, :, :, sl], state.zz_Lambda[:, :, :, sl])
    state.zz_mu[:, :, :, sl] = mu
    state.zz_C[:, :, :, sl] = C


PHASES = (update_y_to_z, update_z_to_x, update_x_to_z, update_z_to_h, update_h_to_z, update_z_to_z)
_SYMBOL_PHASES = (update_z_to_x, update_x_to_z)


def _check_finite(state: EPState) -> None:
    for name in ("yz_mu", "yz_C", "zz_mu", "zz_C", "zh_gamma", "zh_Lambda", "hz_mu", "hz_C", "zx", "xz"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise EPDivergence(f"non-finite {name} after iteration {state.iteration}")


def iterate(state: EPState) -> None:
    has_data = state.dims[3] > state.T_p
    for phase in PHASES:
        if phase in _SYMBOL_PHASES and not has_data:
            continue
        phase(state)
    state.iteration += 1
    _check_finite(state)


# --------------------------------------------------------------------------
# estimates
# --------------------------------------------------------------------------

def channel_posterior(state: EPState) -> tuple[np.ndarray, np.ndarray]:
    """Posterior channel mean ``(B, L, K, N)`` and covariance in physical units."""
    g = state.prior_gamma + state.zh_gamma.sum(axis=3)
    lm = linalg.hermitize(state.prior_Lambda + state.zh_Lambda.sum(axis=3))
    mu, C, ok = _to_moments(g, lm)
    if not np.all(ok):
        raise EPDivergence("posterior channel precision is not positive definite")
    return mu * np.sqrt(_bcast(state.scale, 4)), C * _bcast(state.scale, 5)


def symbol_posterior(state: EPState) -> np.ndarray:
    """Posterior over the constellation, ``(B, K, T_d, M)``: product over all APs."""
    logp = np.log(state.zx).sum(axis=1)
    return np.exp(logp - _logsumexp(logp))


def stack_channel(h: np.ndarray) -> np.ndarray:
    """``(..., L, K, N)`` per-link channels to ``(..., L*N, K)``."""
    *lead, L, K, N = h.shape
    return np.swapaxes(h, -1, -2).reshape(*lead, L * N, K)


@dataclass
class EPResult:
    h_hat: np.ndarray  # (B, L, K, N) or (L, K, N) for a single block
    h_cov: np.ndarray
    x_idx: np.ndarray  # (B, K, T_d)
    x_hat: np.ndarray
    probs: np.ndarray  # (B, K, T_d, M)
    diagnostics: dict
    state: EPState

    @property
    def H_hat(self) -> np.ndarray:
        return stack_channel(self.h_hat)


def _entropy(p: np.ndarray) -> np.ndarray:
    if p.shape[-2] == 0:
        return np.zeros(p.shape[0])
    h = -np.sum(p * np.log(np.maximum(p, 1e-300)), axis=-1)
    return h.reshape(p.shape[0], -1).mean(axis=1)


def run_batch(
    Y: np.ndarray,
    Xp: np.ndarray,
    sigma_n2,
    prior_mu: np.ndarray,
    prior_C: np.ndarray,
    const: Constellation,
    config: EPConfig | None = None,
    H_true: np.ndarray | None = None,
) -> EPResult:
    """Run the receiver on ``B`` independent blocks sharing pilots and constellation.

    With ``H_true`` (``(B, L*N, K)``) the per-block channel NMSE after every
    iteration is traced; entry 0 is the pilot MMSE prior.
    """
    config = config or EPConfig()
    state = init_state(Y, Xp, sigma_n2, prior_mu, prior_C, const, config)
    diag = {"nmse": [], "entropy": [], "guard_rejections": []}

    def record():
        if H_true is not None:
            h, _ = channel_posterior(state)
            err = np.sum(np.abs(stack_channel(h) - H_true) ** 2, axis=(-2, -1))
            diag["nmse"].append(err / np.sum(np.abs(H_true) ** 2, axis=(-2, -1)))
        diag["entropy"].append(_entropy(symbol_posterior(state)))
        diag["guard_rejections"].append(sum(state.guard_rejections.values()))

    record()
    for _ in range(config.max_iter):
        iterate(state)
        record()

    h_hat, h_cov = channel_posterior(state)
    probs = symbol_posterior(state)
    x_idx = np.argmax(probs, axis=-1)
    return EPResult(h_hat, h_cov, x_idx, const.symbols[x_idx], probs, diag, state)


def run(
    frame: Frame,
    prior: MmseEstimate,
    const: Constellation,
    config: EPConfig | None = None,
    H_true: np.ndarray | None = None,
) -> EPResult:
    """Single-block convenience wrapper around :func:`run_batch`."""
    res = run_batch(
        frame.Y[None], frame.Xp, frame.sigma_n2, prior.mu[None], prior.C[None], const, config,
        None if H_true is None else np.asarray(H_true)[None],
    )
    diag = {k: [np.asarray(v)[0] if np.ndim(v) else v for v in vals] for k, vals in res.diagnostics.items()}
    diag["nmse"] = [float(v) for v in diag["nmse"]]
    diag["entropy"] = [float(v) for v in diag["entropy"]]
    return EPResult(res.h_hat[0], res.h_cov[0], res.x_idx[0], res.x_hat[0], res.probs[0], diag, res.state)


def dump_diagnostics(diagnostics: dict, fh) -> None:
    """Write one JSON record per iteration: NMSE (when traced), mean symbol
    entropy and cumulative guard rejections."""
    for i, ent in enumerate(diagnostics["entropy"]):
        rec = {"iteration": i, "entropy": np.asarray(ent).tolist(), "guard_rejections": diagnostics["guard_rejections"][i]}
        if diagnostics.get("nmse"):
            rec["nmse"] = np.asarray(diagnostics["nmse"][i]).tolist()
        fh.write(json.dumps(rec) + "\n")
