"""Small scenario builders shared by the EP and harness tests."""

import numpy as np

from cellfree_jcd import baseline, model


def small_problem(seed=0, L=3, N=1, K=3, T_p=2, T_d=5, power_dbm=10.0, pilots="dft", sigma_n2=None, xi_range=(0.2, 2.0)):
    rng = np.random.default_rng(seed)
    dims = model.SystemDims(L, N, K, T_p, T_d)
    const = model.Constellation.qam4(float(model.dbm_to_watt(power_dbm)))
    stats = model.stats_from_lsfc(rng.uniform(*xi_range, (L, K)) * 1e-9, N=N)
    s2 = 1e-9 * const.sigma_x2 * 0.05 if sigma_n2 is None else sigma_n2
    Xp = model.make_pilots(pilots, dims, const) if T_p else np.zeros((K, 0), dtype=complex)
    frame = model.sample_frame(dims, stats, Xp, const, s2, rng)
    prior = baseline.pilot_mmse_all(frame, stats)
    return frame, prior, const, stats
