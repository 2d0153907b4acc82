import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellfree_jcd import baseline, model
from cellfree_jcd.model import Constellation, SystemDims
from oracles import joint_gaussian_conditioning, random_hpd


def test_scalar_example():
    mu, C = baseline.pilot_mmse(np.array([[2.0, 0.0]]), np.array([[1.0, 1.0]]), np.ones((1, 1, 1)), 1.0)
    assert mu[0, 0] == pytest.approx(2 / 3, abs=1e-14)
    assert C[0, 0, 0].real == pytest.approx(1 / 3, abs=1e-14)
    # matrix-inversion-lemma closed form xi x^H y / (s2 + xi |x|^2)
    assert mu[0, 0] == pytest.approx(1.0 * 2.0 / (1.0 + 2.0))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(1, 2), K=st.integers(1, 3), T=st.integers(1, 3))
def test_matches_joint_gaussian_oracle(seed, N, K, T):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((K, T)) + 1j * rng.standard_normal((K, T))
    Xi = np.stack([random_hpd(rng, N, scale=rng.uniform(0.1, 3)) for _ in range(K)])
    Y = rng.standard_normal((N, T)) + 1j * rng.standard_normal((N, T))
    s2 = rng.uniform(0.05, 2.0)
    mu, C = baseline.pilot_mmse(Y, X, Xi, s2)
    mu_o, C_o = joint_gaussian_conditioning(Y, X, Xi, s2)
    assert np.linalg.norm(mu - mu_o) <= 1e-10 * max(np.linalg.norm(mu_o), 1e-300)
    assert np.linalg.norm(C - C_o) <= 1e-10 * np.linalg.norm(C_o)


def test_error_covariance_bounded_by_prior():
    rng = np.random.default_rng(4)
    Xi = np.stack([random_hpd(rng, 2) for _ in range(3)])
    X = rng.standard_normal((3, 2)) + 0j
    _, C = baseline.pilot_mmse(rng.standard_normal((2, 2)) + 0j, X, Xi, 0.5)
    for k in range(3):
        np.testing.assert_allclose(C[k], C[k].conj().T)
        assert np.linalg.eigvalsh(C[k]).min() > -1e-12
        assert np.linalg.eigvalsh(Xi[k] - C[k]).min() > -1e-9


def test_noiseless_orthogonal_pilots_recover_channel():
    X = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex)
    h = np.array([[0.3 + 0.1j], [-1.2 + 0.7j]])
    Y = (h.T @ X)  # (N=1, T)
    mu, C = baseline.pilot_mmse(Y, X, np.ones((2, 1, 1)), 1e-14)
    np.testing.assert_allclose(mu, h, atol=1e-10)
    assert np.max(np.abs(C)) < 1e-12


def test_zero_noise_rank_deficient_raises():
    X = np.array([[1.0], [1.0]], dtype=complex)
    with pytest.raises(baseline.SingularityError):
        baseline.pilot_mmse(np.ones((1, 1)), np.array([[0.0]]), np.ones((1, 1, 1)), 0.0)
    mu, _ = baseline.pilot_mmse(np.ones((1, 1)), X, np.ones((2, 1, 1)), 1e-3)
    assert mu[0] == pytest.approx(mu[1])


def test_shared_pilots_identical_estimates():
    rng = np.random.default_rng(0)
    X = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, 1, 1]], dtype=complex)
    Y = rng.standard_normal((1, 4)) + 1j * rng.standard_normal((1, 4))
    mu, C = baseline.pilot_mmse(Y, X, np.array([[[0.7]], [[1.3]], [[0.7]]]), 0.2)
    assert mu[0, 0] == pytest.approx(mu[2, 0], abs=1e-14)
    assert C[0, 0, 0] == pytest.approx(C[2, 0, 0], abs=1e-14)


def test_orthogonal_pilots_decouple():
    X = np.array([[1, 1], [1, -1]], dtype=complex)
    xi = np.array([[0.5, 2.0]])
    single = [baseline.pilot_mmse(np.array([[1.0, 0.5j]]), X[k:k + 1], np.array([[[xi[0, k]]]]), 0.3) for k in range(2)]
    mu, C = baseline.pilot_mmse(np.array([[1.0, 0.5j]]), X, xi.reshape(2, 1, 1), 0.3)
    for k in range(2):
        assert mu[k, 0] == pytest.approx(single[k][0][0, 0])
        assert C[k, 0, 0] == pytest.approx(single[k][1][0, 0, 0])


def test_genie_reduces_to_pilot_and_closed_form():
    rng = np.random.default_rng(1)
    dims = SystemDims(3, 1, 2, 2, 0)
    c = Constellation.qam4(1.0)
    stats = model.stats_from_lsfc(rng.uniform(0.5, 2, (3, 2)))
    Xp = model.make_hadamard_pilots(dims, c)
    f = model.sample_frame(dims, stats, Xp, c, 0.1, rng)
    p = baseline.pilot_mmse_all(f, stats)
    g = baseline.genie_mmse(f.Y, f.X, stats, 0.1)
    np.testing.assert_allclose(g.mu, p.mu)
    np.testing.assert_allclose(g.C, p.C)
    # K=1, all-ones X of length T: C = xi s2 / (s2 + xi T)
    xi, s2, T = 1.7, 0.4, 5
    _, C = baseline.pilot_mmse(np.zeros((1, T)), np.ones((1, T)), np.full((1, 1, 1), xi), s2)
    assert C[0, 0, 0].real == pytest.approx(xi * s2 / (s2 + xi * T))


def test_genie_never_worse_than_pilot_estimate():
    rng = np.random.default_rng(2)
    dims = SystemDims(4, 1, 4, 2, 6)
    c = Constellation.qam4(1.0)
    for _ in range(20):
        stats = model.stats_from_lsfc(rng.uniform(0.1, 2, (4, 4)))
        f = model.sample_frame(dims, stats, model.make_dft_pilots(dims, c), c, 0.2, rng)
        p = baseline.pilot_mmse_all(f, stats)
        g = baseline.genie_mmse(f.Y, f.X, stats, 0.2)
        # posterior error variance ordering holds realization-wise
        assert np.all(g.C.real <= p.C.real + 1e-9)


def test_no_pilots_returns_prior():
    stats = model.stats_from_lsfc(np.array([[0.5, 2.0]]))
    mu, C = baseline.pilot_mmse(np.zeros((1, 0)), np.zeros((2, 0)), stats.Xi[0], 1.0)
    np.testing.assert_array_equal(mu, 0)
    np.testing.assert_allclose(C, stats.Xi[0])


def test_mmse_detect_examples():
    c = Constellation.qam4(2.0)
    rng = np.random.default_rng(0)
    idx = rng.integers(4, size=(3, 10))
    X = c.symbols[idx]
    np.testing.assert_array_equal(baseline.mmse_detect(X, np.eye(3), 1e-12, c), idx)
    h = np.array([[2.5]])
    np.testing.assert_array_equal(baseline.mmse_detect(h @ X[:1], h, 5.0, c), idx[:1])
    H = rng.standard_normal((8, 3)) + 1j * rng.standard_normal((8, 3))
    np.testing.assert_array_equal(baseline.mmse_detect(H @ X, H, 1e-9, c), idx)


def test_mmse_detect_rotation_invariant():
    c = Constellation.qam4(1.0)
    rng = np.random.default_rng(3)
    H = rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2))
    Y = rng.standard_normal((6, 7)) + 1j * rng.standard_normal((6, 7))
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6)))
    np.testing.assert_array_equal(baseline.mmse_detect(Y, H, 0.3, c), baseline.mmse_detect(Q @ Y, Q @ H, 0.3, c))


def test_estimate_stacking_layout():
    mu = np.arange(2 * 3 * 2).reshape(2, 3, 2).astype(complex)
    est = baseline.MmseEstimate(mu, np.zeros((2, 3, 2, 2)))
    H = est.H_hat
    assert H.shape == (4, 3)
    np.testing.assert_array_equal(model.channel_blocks(H, 2, 2), mu)
