import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probspec.errors import ContractError, DimensionError
from probspec.grid import (
    FourierField, SpatialGrid, analyze, derivative_factor, derivative_factors,
    dft_analyze, dft_synthesize, half_weights, synthesize,
)

from conftest import brute_analysis, brute_synthesis, random_half

even_K = st.integers(2, 64).map(lambda n: 2 * n)


def test_grid_contract():
    g = SpatialGrid(8)
    assert g.x[1] == 1 / 8 and g.x.size == 8
    assert list(g.modes) == list(range(-3, 5))
    assert g.nyquist == 4 and g.n_half == 5
    for K in (2, 7, 0, 5.5):
        with pytest.raises(ContractError):
            SpatialGrid(K)


def test_constant_and_cosine():
    g = SpatialGrid(8)
    h = np.zeros(5, complex)
    h[0] = 3
    assert np.allclose(dft_synthesize(FourierField(h, 8), g), 3.0, atol=0, rtol=1e-15)
    h[0], h[1] = 0, 0.5
    assert np.allclose(dft_synthesize(FourierField(h, 8), g), np.cos(2 * np.pi * np.arange(8) / 8), atol=1e-15)
    f = dft_analyze(np.full(8, 5.0), g)
    assert f.half[0] == pytest.approx(5.0) and np.max(np.abs(f.half[1:])) < 1e-15
    f = dft_analyze(np.cos(2 * np.pi * g.x), g)
    assert f.coefficient(1) == pytest.approx(0.5) and f.coefficient(-1) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(K=even_K, seed=st.integers(0, 2**31))
def test_roundtrip_and_parseval(K, seed):
    rng = np.random.default_rng(seed)
    c = random_half(rng, K)
    s = synthesize(c, K)
    assert np.max(np.abs(analyze(s, K) - c)) <= 1e-12 * np.max(np.abs(c))
    full = FourierField(c, K).full()
    lhs, rhs = np.sum(s ** 2) / K, np.sum(np.abs(full) ** 2)
    assert abs(lhs - rhs) <= 1e-12 * rhs
    v = rng.standard_normal(K)
    assert np.max(np.abs(synthesize(analyze(v, K), K) - v)) <= 1e-12 * np.max(np.abs(v))


@pytest.mark.parametrize("K", [16, 32])
def test_matches_direct_dft_sums(K, rng):
    c = random_half(rng, K)
    full = FourierField(c, K).full()
    ref = brute_synthesis(full, K)
    assert np.max(np.abs(ref.imag)) < 1e-12 * np.max(np.abs(ref))
    assert np.max(np.abs(synthesize(c, K) - ref.real)) <= 1e-12 * np.max(np.abs(ref))
    v = rng.standard_normal(K)
    direct = brute_analysis(v, K)
    got = dft_analyze(v, SpatialGrid(K)).full()
    assert np.max(np.abs(got - direct)) <= 1e-12 * np.max(np.abs(direct))


def test_full_view_and_hermitian_checks(rng):
    K = 8
    c = random_half(rng, K)
    f = FourierField(c, K)
    full = f.full()
    assert full.shape == (K,)
    for k in range(-K // 2 + 1, K // 2 + 1):
        assert f.coefficient(k) == full[k + K // 2 - 1]
        assert f.coefficient(-k if abs(k) < K // 2 else k) == np.conj(f.coefficient(k))
    assert np.array_equal(FourierField.from_full(full, K).half, f.half)
    bad = full.copy()
    bad[0] += 1.0
    with pytest.raises(ContractError):
        FourierField.from_full(bad, K)
    h = c.copy()
    h[0] += 1j
    with pytest.raises(ContractError):
        FourierField(h, K)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        FourierField(np.zeros(4), 8)
    with pytest.raises(DimensionError):
        dft_analyze(np.zeros(7), SpatialGrid(8))
    with pytest.raises(DimensionError):
        dft_synthesize(FourierField(np.zeros(5), 8), SpatialGrid(16))
    with pytest.raises(DimensionError):
        FourierField(np.zeros(5), 8).coefficient(-4)


def test_derivative_factor_values():
    assert derivative_factor(0, 2, 8) == 0
    assert derivative_factor(1, 1, 8) == pytest.approx(2j * np.pi)
    assert derivative_factor(64, 1, 128) == 0
    assert derivative_factor(64, 2, 128) == pytest.approx(-(2 * np.pi * 64) ** 2)
    assert derivative_factor(-3, 0, 8) == 1
    with pytest.raises(ContractError):
        derivative_factor(1, -1, 8)
    K = 16
    for c in range(5):
        want = [derivative_factor(k, c, K) for k in range(K // 2 + 1)]
        assert np.allclose(derivative_factors(K, c), want, rtol=1e-15, atol=0)


@pytest.mark.parametrize("k", [1, 3, 7])
@pytest.mark.parametrize("c", [1, 2, 3])
def test_spectral_derivative_of_single_mode(k, c):
    K = 16
    x = np.arange(K) / K
    h = np.zeros(K // 2 + 1, complex)
    h[k] = 0.5  # cos(2 pi k x)
    got = synthesize(h * derivative_factors(K, c), K)
    w = 2 * np.pi * k
    exact = w ** c * np.cos(w * x + c * np.pi / 2)
    assert np.max(np.abs(got - exact)) <= 1e-10 * w ** c


def test_nyquist_odd_derivative_is_real_and_zero():
    K = 8
    h = np.zeros(5)
    h[4] = 1.0
    assert np.all(synthesize(h * derivative_factors(K, 1), K) == 0)


def test_half_weights():
    assert list(half_weights(8)) == [1, 2, 2, 2, 1]
