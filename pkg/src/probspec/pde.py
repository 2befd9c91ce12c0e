"""Pointwise PDE right-hand sides and their spectral measurement map.

A PDE ``ds/dt = f(s, s', ..., s^(o))`` enters the filter through

    g(u) = analysis( f( synthesis(u^(0)), ..., synthesis(u^(o)) ) )

evaluated at the ``K`` grid points, where ``u^(c)`` are the aliased Fourier
modes of the ``c``-th spatial derivative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .grid import SpatialGrid, analyze, synthesize

__all__ = ["PdeModel", "make_diffusion", "make_burgers", "make_static", "make_pde",
           "g_eval", "g_vjp", "g_jvp"]


@dataclass(frozen=True)
class PdeModel:
    """Scalar PDE ``ds/dt = f(s^(0), ..., s^(o))``.

    ``rhs`` and ``partials`` take an array of shape ``(o+1, ...)`` holding the
    derivative fields; ``partials`` returns ``df/ds^(c)`` stacked the same way.
    ``linear_coeffs`` is set when ``f = sum_c a_c s^(c)`` with constant ``a_c``.
    """

    name: str
    order: int
    rhs: Callable[[np.ndarray], np.ndarray]
    partials: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    linear_coeffs: tuple | None = None

    @property
    def is_linear(self) -> bool:
        return self.linear_coeffs is not None


def make_diffusion(nu: float) -> PdeModel:
    if not nu > 0:
        raise ContractError(f"diffusivity must be positive, got {nu}")

    def rhs(s):
        return nu * s[2]

    def partials(s):
        out = np.zeros_like(s)
        out[2] = nu
        return out

    return PdeModel("diffusion", 2, rhs, partials, {"nu": nu}, (0.0, 0.0, nu))


def make_burgers(nu: float) -> PdeModel:
    if not nu > 0:
        raise ContractError(f"viscosity must be positive, got {nu}")

    def rhs(s):
        return -s[0] * s[1] + nu * s[2]

    def partials(s):
        return np.stack([-s[1], -s[0], np.full_like(s[0], nu)])

    return PdeModel("burgers", 2, rhs, partials, {"nu": nu})


def make_static(order: int = 2) -> PdeModel:
    """``f = 0``: the field does not evolve."""

    def rhs(s):
        return np.zeros_like(s[0])

    def partials(s):
        return np.zeros_like(s)

    return PdeModel("static", order, rhs, partials, {}, (0.0,) * (order + 1))


def make_pde(name: str, params: dict | None = None) -> PdeModel:
    params = dict(params or {})
    try:
        if name == "diffusion":
            return make_diffusion(float(params.pop("nu")))
        if name == "burgers":
            return make_burgers(float(params.pop("nu")))
        if name == "static":
            return make_static(int(params.pop("order", 2)))
    except KeyError as exc:
        raise ConfigError(f"pde '{name}' requires parameter {exc.args[0]!r}") from None
    raise ConfigError(f"unknown pde '{name}' (known: diffusion, burgers, static)")


def _grid_K(grid) -> int:
    return grid.K if isinstance(grid, SpatialGrid) else int(grid)


def _check(u, pde: PdeModel, K: int):
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[1] != pde.order + 1:
        raise DimensionError(f"u must have shape (K/2+1, {pde.order + 1}), got {u.shape}")
    if u.shape[0] != K // 2 + 1:
        raise DimensionError(f"u has {u.shape[0]} modes, grid needs {K // 2 + 1}")
    return u


def g_eval(u, pde: PdeModel, grid) -> np.ndarray:
    """Half-spectrum modes of the pointwise right-hand side."""
    K = _grid_K(grid)
    u = _check(u, pde, K)
    if pde.is_linear:
        # exact mode-diagonal form; avoids transform roundoff on small modes
        g = np.asarray(u) @ np.asarray(pde.linear_coeffs, dtype=float)
        g = g.astype(complex)
        g[[0, -1]] = g[[0, -1]].real
        return g
    s = synthesize(u, K).T  # (o+1, K)
    return analyze(pde.rhs(s), K)


def g_vjp(u, cotangent, pde: PdeModel, grid) -> np.ndarray:
    """Gradient of ``Re sum_k conj(cotangent_k) g_k(u)`` w.r.t. ``u``.

    Gradients are returned as ``d/dRe + i d/dIm`` of each half-spectrum entry;
    the imaginary parts at modes ``0`` and ``K/2`` are not free and come out zero.
    """
    K = _grid_K(grid)
    u = _check(u, pde, K)
    cot = np.asarray(cotangent, dtype=complex)
    if cot.shape != (K // 2 + 1,):
        raise DimensionError(f"cotangent must have shape ({K // 2 + 1},)")
    if pde.is_linear:
        grad = cot[:, None] * np.asarray(pde.linear_coeffs, dtype=float)[None, :]
        grad[[0, -1]] = grad[[0, -1]].real
        return grad
    # adjoint of analysis: dF/df_j = irfft(cot with interior modes halved)
    half = cot.copy()
    half[1:-1] *= 0.5
    half[[0, -1]] = half[[0, -1]].real
    df = np.fft.irfft(half, n=K)
    s = synthesize(u, K).T
    ds = pde.partials(s) * df[None, :]  # (o+1, K)
    # adjoint of synthesis: dF/du_k = w_k rfft(dF/ds)_k
    grad = np.fft.rfft(ds, axis=1).T
    grad[1:-1] *= 2.0
    grad[[0, -1]] = grad[[0, -1]].real
    return grad


def g_jvp(u, du, pde: PdeModel, grid) -> np.ndarray:
    """Directional derivatives of ``g`` at ``u`` along a batch ``du`` of shape ``(..., K/2+1, o+1)``."""
    K = _grid_K(grid)
    u = _check(u, pde, K)
    du = np.asarray(du, dtype=complex)
    if du.shape[-2:] != u.shape:
        raise DimensionError(f"direction batch must end in {u.shape}, got {du.shape}")
    if pde.is_linear:
        out = du @ np.asarray(pde.linear_coeffs, dtype=float)
    else:
        s = synthesize(u, K).T  # (o+1, K)
        ds = np.fft.irfft(du * K, n=K, axis=-2)  # (..., K, o+1)
        df = np.einsum("...jc,cj->...j", ds, pde.partials(s))
        out = np.fft.rfft(df, axis=-1) / K
    out = np.array(out, dtype=complex)
    out[..., [0, -1]] = out[..., [0, -1]].real
    return out
