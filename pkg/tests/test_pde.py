import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probspec.errors import ConfigError, ContractError, DimensionError
from probspec.grid import SpatialGrid, analyze, derivative_factors
from probspec.pde import g_eval, g_jvp, g_vjp, make_burgers, make_diffusion, make_pde, make_static

from conftest import random_half

PDES = [make_diffusion(0.01), make_burgers(0.004), make_static()]


def exact_state(values_half, K, o=2):
    return np.stack([values_half * derivative_factors(K, c) for c in range(o + 1)], axis=1)


def random_u(rng, K, o=2, decay=True):
    c = random_half(rng, K)
    if decay:
        c = c / (1 + np.arange(K // 2 + 1)) ** 2
    return exact_state(c, K, o) + 0.1 * random_half(rng, K, o + 1)


def test_pointwise_examples():
    s = np.array([[1.0], [0.0], [4.0]])
    assert make_diffusion(0.01).rhs(s)[0] == pytest.approx(0.04)
    s = np.array([[2.0], [3.0], [0.0]])
    assert make_burgers(0.7).rhs(s)[0] == pytest.approx(-6.0)
    for bad in (0.0, -1.0):
        with pytest.raises(ContractError):
            make_diffusion(bad)
        with pytest.raises(ContractError):
            make_burgers(bad)


def test_make_pde_registry():
    assert make_pde("burgers", {"nu": 0.1}).params == {"nu": 0.1}
    assert make_pde("static").order == 2
    with pytest.raises(ConfigError):
        make_pde("heat", {"nu": 1})
    with pytest.raises(ConfigError):
        make_pde("diffusion", {})


@pytest.mark.parametrize("pde", PDES[:2], ids=lambda p: p.name)
def test_partials_finite_differences(pde, rng):
    s = rng.standard_normal((3, 40))
    P = pde.partials(s)
    eps = 1e-6
    for c in range(3):
        e = np.zeros_like(s)
        e[c] = eps
        fd = (pde.rhs(s + e) - pde.rhs(s - e)) / (2 * eps)
        assert np.max(np.abs(P[c] - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_diffusion_g_is_diagonal(rng):
    K = 16
    u = random_u(rng, K, decay=False)
    g = g_eval(u, make_diffusion(0.01), K)
    assert np.array_equal(g, 0.01 * u[:, 2])
    w = random_u(rng, K, decay=False)
    a, b = 0.3, -1.7
    lhs = g_eval(a * u + b * w, make_diffusion(0.01), K)
    rhs = a * g + b * g_eval(w, make_diffusion(0.01), K)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))


def test_burgers_sine_oracle():
    K = 32
    x = np.arange(K) / K
    nu = 0.004
    s = np.sin(2 * np.pi * x)
    u = exact_state(analyze(s, K), K)
    w = 2 * np.pi
    f = -s * w * np.cos(w * x) + nu * (-(w ** 2) * s)
    g = g_eval(u, make_burgers(nu), SpatialGrid(K))
    ref = analyze(f, K)
    assert np.max(np.abs(g - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_static_is_zero(rng):
    assert np.all(g_eval(random_u(rng, 8), make_static(), 8) == 0)


@pytest.mark.parametrize("pde", PDES, ids=lambda p: p.name)
def test_reality(pde, rng):
    K = 16
    g = g_eval(random_u(rng, K), pde, K)
    assert np.all(g[[0, -1]].imag == 0)


def test_burgers_zero_mode_vanishes(rng):
    K = 64
    for _ in range(20):
        c = np.zeros(K // 2 + 1, complex)
        c[1:K // 4] = rng.standard_normal(K // 4 - 1) + 1j * rng.standard_normal(K // 4 - 1)
        c[0] = rng.standard_normal()
        u = exact_state(c, K)
        g = g_eval(u, make_burgers(0.01), K)
        assert abs(g[0]) < 1e-12 * np.max(np.abs(c))


def fd_vjp(u, cot, pde, K, eps=1e-6):
    F = lambda z: np.real(np.sum(np.conj(cot) * g_eval(z, pde, K)))
    grad = np.zeros(u.shape, complex)
    for idx in np.ndindex(u.shape):
        for unit in (1.0, 1j):
            e = np.zeros(u.shape, complex)
            e[idx] = eps * unit
            d = (F(u + e) - F(u - e)) / (2 * eps)
            grad[idx] += d * unit
    return grad


@pytest.mark.parametrize("pde", PDES, ids=lambda p: p.name)
def test_vjp_finite_differences(pde, rng):
    K = 8
    for _ in range(50):
        u = random_u(rng, K)
        cot = random_half(rng, K)
        got = g_vjp(u, cot, pde, K)
        fd = fd_vjp(u, cot, pde, K)
        assert np.max(np.abs(got - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_vjp_linear_and_zero(rng):
    K = 8
    cot = random_half(rng, K)
    a = g_vjp(random_u(rng, K), cot, make_diffusion(0.5), K)
    b = g_vjp(random_u(rng, K), cot, make_diffusion(0.5), K)
    assert np.array_equal(a, b)
    assert np.array_equal(a[:, 2], 0.5 * cot) and np.all(a[:, :2] == 0)
    assert np.all(g_vjp(random_u(rng, K), np.zeros(5), make_burgers(0.1), K) == 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_jvp_matches_vjp_adjoint(seed):
    rng = np.random.default_rng(seed)
    K = 16
    pde = make_burgers(0.01)
    u = random_u(rng, K)
    du = random_half(rng, K, 3)
    cot = random_half(rng, K)
    # <cot, J du> = <J^T cot, du> in the real inner product Re sum conj(a) b
    lhs = np.real(np.sum(np.conj(cot) * g_jvp(u, du, pde, K)))
    rhs = np.real(np.sum(np.conj(g_vjp(u, cot, pde, K)) * du))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_jvp_finite_differences(rng):
    K = 16
    pde = make_burgers(0.01)
    u = random_u(rng, K)
    du = random_half(rng, K, 3)
    eps = 1e-6
    fd = (g_eval(u + eps * du, pde, K) - g_eval(u - eps * du, pde, K)) / (2 * eps)
    got = g_jvp(u, du, pde, K)
    assert np.max(np.abs(got - fd)) <= 1e-5 * np.max(np.abs(fd))
    batch = g_jvp(u, np.stack([du, 2 * du]), pde, K)
    assert np.allclose(batch[1], 2 * batch[0], rtol=1e-12, atol=1e-14)


def test_shape_errors(rng):
    with pytest.raises(DimensionError):
        g_eval(np.zeros((5, 2)), make_burgers(0.1), 8)
    with pytest.raises(DimensionError):
        g_eval(np.zeros((4, 3)), make_burgers(0.1), 8)
    with pytest.raises(DimensionError):
        g_vjp(np.zeros((5, 3)), np.zeros(4), make_burgers(0.1), 8)
