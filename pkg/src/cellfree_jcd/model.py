"""Scenario generation for the cell-free uplink.

Geometry, large-scale fading, pilot constructions and frame synthesis
``Y = H X + N``. All randomness flows through an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import hadamard

from .linalg import sqrtm_psd


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


@dataclass(frozen=True)
class SystemDims:
    L: int
    N: int
    K: int
    T_p: int
    T_d: int
    contaminated: bool = False

    def __post_init__(self):
        for name in ("L", "N", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T_p < 0 or self.T_d < 0 or self.T < 1:
            raise ValueError(f"invalid block partition T_p={self.T_p}, T_d={self.T_d}")
        if self.contaminated and not self.T_p < self.K:
            raise ValueError(f"contaminated scenario needs T_p < K, got T_p={self.T_p}, K={self.K}")

    @property
    def T(self) -> int:
        return self.T_p + self.T_d


@dataclass(frozen=True)
class Constellation:
    symbols: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=complex).ravel()
        if s.size == 0:
            raise ValueError("empty constellation")
        if np.any(np.abs(s) == 0):
            raise ValueError("constellation must not contain the zero symbol")
        if len(np.unique(np.round(s, 12))) != s.size:
            raise ValueError("constellation symbols must be distinct")
        object.__setattr__(self, "symbols", s)

    @property
    def M(self) -> int:
        return self.symbols.size

    @property
    def sigma_x2(self) -> float:
        return float(np.mean(np.abs(self.symbols) ** 2))

    @classmethod
    def qam4(cls, sigma_x2: float = 1.0) -> "Constellation":
        a = np.sqrt(sigma_x2 / 2.0)
        return cls(a * np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]))

    def scaled(self, sigma_x2: float) -> "Constellation":
        return Constellation(self.symbols * np.sqrt(sigma_x2 / self.sigma_x2))

    def nearest(self, values: np.ndarray) -> np.ndarray:
        """Index of the closest symbol; ties go to the lowest index."""
        d = np.abs(np.asarray(values)[..., None] - self.symbols) ** 2
        return np.argmin(d, axis=-1)


# --------------------------------------------------------------------------
# pilots
# --------------------------------------------------------------------------

def make_hadamard_pilots(dims: SystemDims, const: Constellation) -> np.ndarray:
    """Orthogonal Hadamard rows shared round-robin: UE k uses row ``k mod T_p``."""
    tp = dims.T_p
    if tp < 1 or tp & (tp - 1):
        raise ValueError(f"Hadamard pilots need T_p to be a power of two, got {tp}")
    if tp > dims.K:
        raise ValueError(f"T_p={tp} exceeds K={dims.K}")
    base = hadamard(tp).astype(complex)
    return np.sqrt(const.sigma_x2) * base[np.arange(dims.K) % tp]


def make_dft_pilots(dims: SystemDims, const: Constellation) -> np.ndarray:
    """First ``T_p`` columns of the ``K x K`` DFT matrix, unit-modulus scaled."""
    if dims.T_p > dims.K:
        raise ValueError(f"T_p={dims.T_p} exceeds K={dims.K}")
    k = np.arange(dims.K)[:, None]
    t = np.arange(dims.T_p)[None, :]
    return np.sqrt(const.sigma_x2) * np.exp(-2j * np.pi * k * t / dims.K)


PILOT_BUILDERS = {"hadamard": make_hadamard_pilots, "dft": make_dft_pilots}


def make_pilots(kind: str, dims: SystemDims, const: Constellation) -> np.ndarray:
    try:
        return PILOT_BUILDERS[kind](dims, const)
    except KeyError:
        raise ValueError(f"unknown pilot type {kind!r}; choose from {sorted(PILOT_BUILDERS)}") from None


# --------------------------------------------------------------------------
# geometry and large-scale fading
# --------------------------------------------------------------------------

@dataclass
class GeometryConfig:
    area: tuple[float, float] = (400.0, 400.0)
    ap_grid: tuple[int, int] = (4, 4)
    ap_spacing: float = 100.0
    ap_offset: tuple[float, float] = (50.0, 50.0)
    ap_height: float = 10.0

    def ap_positions(self) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(self.ap_grid[0]), np.arange(self.ap_grid[1]), indexing="ij")
        x = self.ap_offset[0] + self.ap_spacing * ii.ravel()
        y = self.ap_offset[1] + self.ap_spacing * jj.ravel()
        return np.column_stack([x, y, np.full(x.size, self.ap_height)])


@dataclass
class Geometry:
    ap_positions: np.ndarray  # (L, 3)
    ue_positions: np.ndarray  # (K, 2)
    area: tuple[float, float]


def sample_geometry(config: GeometryConfig, K: int, rng: np.random.Generator) -> Geometry:
    w, h = config.area
    ue = rng.uniform(size=(K, 2)) * np.array([w, h])
    return Geometry(config.ap_positions(), ue, tuple(config.area))


@dataclass
class ChannelModelParams:
    """3GPP urban-microcell style large-scale fading constants."""

    pathloss_const_db: float = -30.5
    pathloss_slope_db: float = 36.7
    shadow_std_db: float = 4.0
    decorrelation_distance: float = 9.0
    ap_shadow_correlation: float = 0.0
    min_distance: float = 1.0
    use_3d_distance: bool = True
    shadowing: bool = True


@dataclass
class ChannelStats:
    Xi: np.ndarray  # (L, K, N, N)
    xi: np.ndarray  # (L, K)

    @property
    def N(self) -> int:
        return self.Xi.shape[-1]


def distances(geom: Geometry, params: ChannelModelParams) -> np.ndarray:
    ap = geom.ap_positions
    d2 = np.linalg.norm(ap[:, None, :2] - geom.ue_positions[None, :, :], axis=-1)
    d2 = np.maximum(d2, params.min_distance)
    if params.use_3d_distance:
        return np.sqrt(d2**2 + ap[:, None, 2] ** 2)
    return d2


def pathloss_db(d, params: ChannelModelParams):
    """Deterministic channel gain in dB (negative; decreasing in distance)."""
    return params.pathloss_const_db - params.pathloss_slope_db * np.log10(d)


def sample_shadowing(geom: Geometry, params: ChannelModelParams, rng: np.random.Generator) -> np.ndarray:
    """Lognormal shadowing in dB, shape (L, K).

    UEs are correlated through ``2**(-dist / decorrelation_distance)``;
    APs share a constant correlation ``ap_shadow_correlation``.
    """
    L = geom.ap_positions.shape[0]
    ue = geom.ue_positions
    K = ue.shape[0]
    dk = np.linalg.norm(ue[:, None, :] - ue[None, :, :], axis=-1)
    r_ue = 2.0 ** (-dk / params.decorrelation_distance)
    rho = params.ap_shadow_correlation
    r_ap = (1.0 - rho) * np.eye(L) + rho * np.ones((L, L))
    z = rng.standard_normal((L, K))
    return params.shadow_std_db * (np.real(sqrtm_psd(r_ap)) @ z @ np.real(sqrtm_psd(r_ue)))


def compute_channel_stats(
    geom: Geometry,
    params: ChannelModelParams,
    rng: np.random.Generator,
    N: int = 1,
    correlation=None,
) -> ChannelStats:
    """LSFCs from path loss plus correlated shadowing; ``Xi = xi * I_N`` by default.

    ``correlation`` optionally maps ``(l, k, xi_lk)`` to an ``N x N`` matrix and
    replaces the scaled identity.
    """
    gain_db = pathloss_db(distances(geom, params), params)
    if params.shadowing:
        gain_db = gain_db + sample_shadowing(geom, params, rng)
    xi = 10.0 ** (gain_db / 10.0)
    L, K = xi.shape
    if correlation is None:
        Xi = xi[:, :, None, None] * np.eye(N, dtype=complex)
    else:
        Xi = np.empty((L, K, N, N), dtype=complex)
        for l in range(L):
            for k in range(K):
                Xi[l, k] = correlation(l, k, xi[l, k])
        xi = np.real(np.trace(Xi, axis1=-2, axis2=-1)) / N
    return ChannelStats(Xi=Xi, xi=xi)


def stats_from_lsfc(xi: np.ndarray, N: int = 1) -> ChannelStats:
    xi = np.asarray(xi, dtype=float)
    return ChannelStats(Xi=xi[:, :, None, None] * np.eye(N, dtype=complex), xi=xi)


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------

@dataclass
class Frame:
    Xp: np.ndarray  # (K, T_p)
    Xd: np.ndarray  # (K, T_d)
    H: np.ndarray  # (L*N, K)
    Y: np.ndarray  # (L*N, T)
    sigma_n2: float
    data_idx: np.ndarray = field(default=None)  # (K, T_d) constellation indices

    @property
    def X(self) -> np.ndarray:
        return np.concatenate([self.Xp, self.Xd], axis=1)

    @property
    def T_p(self) -> int:
        return self.Xp.shape[1]

    @property
    def Yp(self) -> np.ndarray:
        return self.Y[:, : self.T_p]

    @property
    def Yd(self) -> np.ndarray:
        return self.Y[:, self.T_p :]


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_channel(stats: ChannelStats, rng: np.random.Generator) -> np.ndarray:
    """Draw ``h_{l,k} ~ CN(0, Xi_{l,k})`` stacked as an ``(L*N) x K`` matrix."""
    Xi = stats.Xi
    L, K, N, _ = Xi.shape
    w = np.linalg.eigvalsh(Xi)
    tr = np.real(np.trace(Xi, axis1=-2, axis2=-1))
    bad = w[..., 0] < -1e-12 * np.maximum(tr, np.finfo(float).tiny)
    if np.any(bad):
        l, k = np.argwhere(bad)[0]
        raise ValueError(f"correlation matrix Xi[{l},{k}] is not PSD (min eigenvalue {w[l, k, 0]:.3e})")
    g = _crandn(rng, (L, K, N))
    h = np.einsum("lkij,lkj->lki", sqrtm_psd(Xi), g)
    return h.transpose(0, 2, 1).reshape(L * N, K)


def sample_frame(
    dims: SystemDims,
    stats: ChannelStats,
    pilots: np.ndarray,
    const: Constellation,
    sigma_n2: float,
    rng: np.random.Generator,
) -> Frame:
    H = sample_channel(stats, rng)
    idx = rng.integers(const.M, size=(dims.K, dims.T_d))
    Xd = const.symbols[idx]
    noise = _crandn(rng, (dims.L * dims.N, dims.T))
    X = np.concatenate([pilots, Xd], axis=1)
    Y = H @ X + np.sqrt(sigma_n2) * noise
    return Frame(Xp=np.asarray(pilots), Xd=Xd, H=H, Y=Y, sigma_n2=float(sigma_n2), data_idx=idx)


def channel_blocks(H: np.ndarray, L: int, N: int) -> np.ndarray:
    """``(L*N) x K`` channel matrix reshaped to ``(L, K, N)``."""
    K = H.shape[1]
    return H.reshape(L, N, K).transpose(0, 2, 1)
