import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probspec.errors import ContractError, CoverageError, CoverageWarning, DimensionError
from probspec.spectrum import (
    FactoredCovariance, LogSpectrum, SpectrumHyper, default_l_max, excitation_map,
    geometry_for, mode_covariance, mode_covariance_grad, mode_covariance_stack,
    power_law_spectrum, read_spectra_table, read_spectrum_csv, regular_l_grid,
    sigma_sq_at, tau_from_excitations, temporal_update, write_spectra_table,
    write_spectrum_csv,
)


def grid_for(K, n_max, L=60):
    return regular_l_grid(L, default_l_max(K, n_max))


def brute_D(k, K, o, n_max, l_grid, tau, sigma0, with_scale=False):
    """Defining aliased sum, term by term, with np.interp for tau.

    ``with_scale`` also returns the entrywise sum of absolute terms, the
    natural scale for relative errors of a sum with cancellation.
    """
    ns = range(-n_max, n_max) if abs(k) == K // 2 else range(-n_max, n_max + 1)
    D = np.zeros((o + 1, o + 1), complex)
    S = np.zeros((o + 1, o + 1))
    for n in ns:
        kap = k + n * K
        s2 = sigma0 ** 2 if kap == 0 else math.exp(2 * np.interp(math.log(abs(kap)), l_grid, tau))
        for c in range(o + 1):
            for d in range(o + 1):
                t = (-1) ** d * (2j * math.pi * kap) ** (c + d) * s2
                D[c, d] += t
                S[c, d] += abs(t)
    return (D, S) if with_scale else D


def random_tau(rng, l_grid):
    slope = rng.uniform(-4, -1)
    walk = np.cumsum(rng.standard_normal(l_grid.size)) * 0.05
    return rng.normal() + slope * l_grid + walk


@pytest.mark.parametrize("K", [4, 8, 16])
@pytest.mark.parametrize("o", [0, 1, 2])
@pytest.mark.parametrize("n_max", [1, 2, 5])
def test_mode_covariance_matches_brute_force(K, o, n_max, rng):
    l = grid_for(K, n_max)
    for tau in (np.zeros_like(l), random_tau(rng, l)):
        spec = LogSpectrum(l, tau, sigma0=1.7)
        hyper = SpectrumHyper(n_max=n_max)
        for k in range(-K // 2 + 1, K // 2 + 1):
            D = mode_covariance(k, spec, hyper, o, K)
            B, scale = brute_D(k, K, o, n_max, l, tau, 1.7, with_scale=True)
            assert np.max(np.abs(D - B) / scale) <= 1e-13


def test_flat_spectrum_mode_one_example():
    K, n_max, o = 8, 2, 1
    l = grid_for(K, n_max)
    spec = LogSpectrum(l, np.zeros_like(l))
    D = mode_covariance(1, spec, SpectrumHyper(n_max=n_max), o, K)
    assert np.allclose(D, brute_D(1, K, o, n_max, l, spec.tau, 1.0), rtol=1e-13, atol=0)


def test_single_term_sum():
    # spectrum vanishing above |k|=1 (numerically) leaves the n=0 term only
    K, n_max = 8, 1
    l = grid_for(K, n_max)
    tau = np.where(l == 0, math.log(2.0) / 2, -400.0)
    D = mode_covariance(1, LogSpectrum(l, tau), SpectrumHyper(n_max=n_max), 0, K)
    assert D[0, 0] == pytest.approx(2.0, rel=1e-14)


def test_mode_covariance_invariants_random_spectra(rng):
    K, o, n_max = 16, 2, 10
    l = grid_for(K, n_max, L=80)
    hyper = SpectrumHyper(n_max=n_max)
    for _ in range(100):
        spec = LogSpectrum(l, random_tau(rng, l), sigma0=rng.uniform(0.1, 2))
        for k in range(-K // 2 + 1, K // 2 + 1):
            D = mode_covariance(k, spec, hyper, o, K)
            assert np.array_equal(D, D.conj().T)
            ev = np.linalg.eigvalsh(D)
            assert ev.min() >= -1e-12 * np.trace(D).real
            partner = -k if abs(k) < K // 2 else k
            Dm = mode_covariance(partner, spec, hyper, o, K)
            assert np.max(np.abs(Dm - D.conj())) <= 1e-12 * np.max(np.abs(D))
            c, d = np.indices(D.shape)
            assert np.all(D[(c + d) % 2 == 0].imag == 0)
            assert np.all(D[(c + d) % 2 == 1].real == 0)
            assert D[0, 0].real > 0
            # odd entries are imaginary, so Hermitian symmetry makes them antisymmetric
            assert D[0, 1] == -D[1, 0]


def test_power_scaling_is_exact():
    K, o, n_max = 8, 2, 3
    l = grid_for(K, n_max)
    spec = power_law_spectrum(-6, 1.0, l)
    alpha = 4.0  # power of two keeps the scaling exact in floating point
    scaled = LogSpectrum(l, spec.tau + 0.5 * math.log(alpha), spec.sigma0 * math.sqrt(alpha))
    D = mode_covariance_stack(spec, n_max, o, K)
    Ds = mode_covariance_stack(scaled, n_max, o, K)
    assert np.allclose(Ds, alpha * D, rtol=1e-14, atol=0)


def test_sigma_sq_at():
    l = regular_l_grid(50, math.log(100.0))
    spec = LogSpectrum(l, np.full(50, 0.3), sigma0=2.0)
    assert sigma_sq_at(7.3, spec) == pytest.approx(math.exp(0.6))
    assert sigma_sq_at(0.0, spec) == pytest.approx(4.0)
    assert sigma_sq_at(0.5, spec) == pytest.approx(math.exp(0.6))
    pl = power_law_spectrum(-6, 1.0, l)
    assert sigma_sq_at(10.0, pl) == pytest.approx(1e-6, rel=1e-12)
    assert sigma_sq_at(1.0, pl) == pytest.approx(1.0)
    assert sigma_sq_at(2.0, pl) == pytest.approx(2.0 ** -6, rel=1e-12)
    assert np.allclose(power_law_spectrum(0, 3.0, l).tau, math.log(3.0))
    with pytest.raises(CoverageError):
        sigma_sq_at(101.0, spec)
    with pytest.raises(ContractError):
        power_law_spectrum(-6, 0.0, l)


def test_log_spectrum_contract():
    with pytest.raises(ContractError):
        LogSpectrum([0.0], [0.0])
    with pytest.raises(ContractError):
        LogSpectrum([0.0, 1.0, 3.0], [0, 0, 0])
    with pytest.raises(ContractError):
        LogSpectrum([0.5, 1.0], [0, 0])
    with pytest.raises(DimensionError):
        LogSpectrum([0.0, 1.0], [0.0])
    assert LogSpectrum([0.0, 1.0], [0.4, 0.0]).sigma0 == pytest.approx(math.exp(0.4))


def test_coverage_error_when_grid_too_short():
    l = regular_l_grid(20, math.log(8 * 3))
    with pytest.raises(CoverageError):
        mode_covariance_stack(LogSpectrum(l, np.zeros(20)), 3, 0, 8)


def test_coverage_warning_for_flat_spectrum():
    l = grid_for(8, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("error", CoverageWarning)
        with pytest.raises(CoverageWarning):
            mode_covariance_stack(LogSpectrum(l, np.zeros_like(l)), 2, 1, 8)


def test_mode_covariance_grad_finite_differences(rng):
    K, o, n_max = 8, 2, 3
    l = grid_for(K, n_max, L=40)
    hyper = SpectrumHyper(n_max=n_max)
    spec = LogSpectrum(l, random_tau(rng, l))
    eps = 1e-6
    for k in (0, 1, -3, 4):
        G = mode_covariance_grad(k, spec, hyper, o, K)
        for m in range(spec.L):
            e = np.zeros(spec.L)
            e[m] = eps
            fd = (mode_covariance(k, spec.with_tau(spec.tau + e), hyper, o, K)
                  - mode_covariance(k, spec.with_tau(spec.tau - e), hyper, o, K)) / (2 * eps)
            scale = np.max(np.abs(fd))
            if scale == 0:
                assert np.all(G[m] == 0)
            else:
                assert np.max(np.abs(G[m] - fd)) <= 1e-6 * scale
        # uniform shift of tau scales every non-zero-frequency term by e^{2 eps}
        Dshift = brute_D(k, K, o, n_max, l, spec.tau, 0.0)
        assert np.allclose(G.sum(axis=0), 2 * Dshift, rtol=1e-12, atol=1e-12 * np.max(np.abs(Dshift)))


def test_grad_zero_for_unsupported_nodes():
    K, n_max = 8, 1
    l = regular_l_grid(400, default_l_max(K, n_max))
    G = mode_covariance_grad(1, LogSpectrum(l, np.zeros(400)), SpectrumHyper(n_max=n_max), 1, K)
    # only nodes bracketing log 1, log 7 and log 9 can be touched
    touched = {m for m in range(400) if np.any(G[m] != 0)}
    assert 0 < len(touched) <= 6


def test_factored_covariance_reconstructs(rng):
    K, o, n_max = 16, 2, 20
    l = grid_for(K, n_max, L=100)
    spec = power_law_spectrum(-6, 1.0, l)
    geom = geometry_for(spec, n_max, K)
    fac = FactoredCovariance(geom, spec, o, eps=1e-12)
    D = mode_covariance_stack(spec, n_max, o, K)
    idx = np.arange(o + 1)
    want = D.copy()
    want[:, idx, idx] *= 1 + 1e-12
    got = fac.cov()
    for k in range(K // 2 + 1):
        assert np.max(np.abs(got[k] - want[k])) <= 1e-12 * np.max(np.abs(want[k]))
        sign, ld = np.linalg.slogdet(want[k])
        assert fac.logdet[k] == pytest.approx(ld, rel=1e-8, abs=1e-8)


def test_tau_from_excitations_straight_lines():
    l = regular_l_grid(30, 5.0)
    h = SpectrumHyper(sigma_tau=1.3, offset=0.7, slope=-2.5)
    assert np.allclose(tau_from_excitations(np.zeros((30, 2)), h, l), 0.7 - 2.5 * l, rtol=0, atol=1e-14)
    flat = SpectrumHyper(sigma_tau=0.0, offset=0.7, slope=-2.5)
    xi = np.random.default_rng(0).standard_normal((30, 2))
    assert np.allclose(tau_from_excitations(xi, flat, l), 0.7 - 2.5 * l, rtol=0, atol=1e-14)
    with pytest.raises(DimensionError):
        tau_from_excitations(np.zeros(30), h, l)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_tau_from_excitations_is_affine(a, b, seed):
    rng = np.random.default_rng(seed)
    l = regular_l_grid(20, 4.0)
    h = SpectrumHyper(sigma_tau=0.8, offset=0.2, slope=-1.0, offset_std=0.5, slope_std=0.3)
    x, y = rng.standard_normal((2, 20, 2))
    f = lambda z: tau_from_excitations(z, h, l) - tau_from_excitations(np.zeros((20, 2)), h, l)
    assert np.allclose(f(a * x + b * y), a * f(x) + b * f(y), rtol=1e-12, atol=1e-12)


def iwp_covariance_by_composition(h, l):
    """Covariance of tau by propagating the exact (position, velocity) moments node to node."""
    dl = l[1] - l[0]
    A = np.array([[1.0, dl], [0.0, 1.0]])
    Q = h.sigma_tau ** 2 * np.array([[dl ** 3 / 3, dl ** 2 / 2], [dl ** 2 / 2, dl]])
    L = l.size
    P = np.diag([h.offset_std ** 2, h.slope_std ** 2])
    # Cov(x_j, x_i) = (A^{j-i} P_i)[0, 0]
    states = [P]
    for _ in range(L - 1):
        states.append(A @ states[-1] @ A.T + Q)
    C = np.zeros((L, L))
    for i in range(L):
        M = states[i]
        for j in range(i, L):
            C[i, j] = C[j, i] = M[0, 0]
            M = A @ M
    return C


def test_tau_sample_covariance_monte_carlo():
    l = regular_l_grid(6, 2.5)
    h = SpectrumHyper(sigma_tau=1.1, offset=0.0, slope=0.0, offset_std=0.4, slope_std=0.6)
    emap = excitation_map(h, l)
    rng = np.random.default_rng(11)
    xi = rng.standard_normal((100_000, 6, 2))
    taus = xi.reshape(100_000, 12) @ emap.matrix.T
    S = np.cov(taus, rowvar=False)
    C = iwp_covariance_by_composition(h, l)
    assert np.allclose(emap.matrix @ emap.matrix.T, C, rtol=1e-12, atol=1e-12)
    assert np.max(np.abs(S - C)) <= 0.03 * np.max(np.abs(np.diag(C)))
    d = np.sqrt(np.diag(C))
    assert np.max(np.abs(np.diag(S) / np.diag(C) - 1)) < 0.03
    assert np.max(np.abs((S - C) / np.outer(d, d))) < 0.03


def test_temporal_update():
    a = np.array([0.0, 1.0, 2.0])
    assert np.array_equal(temporal_update(a, 0.3, np.zeros(3)), a)
    assert np.array_equal(temporal_update(a, 0.0, np.ones(3)), a)
    l = np.linspace(0, 4, 9)
    assert np.allclose(temporal_update(np.zeros(9), 0.5, -6 * l), -3 * l)
    with pytest.raises(DimensionError):
        temporal_update(a, 1.0, np.ones(4))


def test_spectrum_csv_roundtrip(tmp_path):
    l = regular_l_grid(12, 3.0)
    spec = LogSpectrum(l, np.sin(l) - l, sigma0=0.37)
    h = SpectrumHyper(sigma_tau=0.5, offset=0.1, slope=-2.0, n_max=7, offset_std=1.0)
    p = tmp_path / "s.csv"
    write_spectrum_csv(p, spec, h, extra={"note": "x"})
    back, hb, meta = read_spectrum_csv(p)
    assert np.array_equal(back.tau, spec.tau) and np.array_equal(back.l_grid, spec.l_grid)
    assert back.sigma0 == spec.sigma0 and hb == h and meta["note"] == "x"
    rows = [(1, 0.1, spec.tau), (2, 0.2, spec.tau * 2)]
    write_spectra_table(tmp_path / "t.csv", l, 0.37, rows, h)
    lg, s0, steps, times, taus, ht = read_spectra_table(tmp_path / "t.csv")
    assert np.allclose(lg, l, rtol=1e-15) and s0 == 0.37 and list(steps) == [1, 2]
    assert np.array_equal(taus[1], spec.tau * 2) and ht == h
    p.write_text("# L = 3\nl,tau\n0,0\n1,0\n")
    with pytest.raises(DimensionError):
        read_spectrum_csv(p)
