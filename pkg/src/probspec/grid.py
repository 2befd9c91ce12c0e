"""Periodic grid, Fourier-mode bookkeeping and discrete transforms.

Conventions
-----------
The domain is the unit interval with periodic boundaries, sampled at
``x_j = j / K``.  Fields are represented by their ``K`` discrete Fourier
modes ``k = -K/2 + 1, ..., K/2`` with

    s_j = sum_k c_k exp(2 pi i k x_j)          (synthesis, no 1/K)
    c_k = (1/K) sum_j s_j exp(-2 pi i k x_j)   (analysis)

Real fields are stored as the non-negative half spectrum ``k = 0 .. K/2``;
negative modes are implied by ``c_{-k} = conj(c_k)``.  Arrays holding several
components (e.g. spatial derivatives) keep the mode index on axis 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "SpatialGrid",
    "FourierField",
    "dft_synthesize",
    "dft_analyze",
    "derivative_factor",
    "derivative_factors",
    "synthesize",
    "analyze",
    "half_weights",
]


@dataclass(frozen=True)
class SpatialGrid:
    """Regular grid with ``K`` points on the unit periodic domain."""

    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 4 or self.K % 2:
            raise ContractError(f"K must be an even integer >= 4, got {self.K!r}")

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.K) / self.K

    @property
    def modes(self) -> np.ndarray:
        """Full mode set in ascending order, ``-K/2+1 .. K/2``."""
        return np.arange(-self.K // 2 + 1, self.K // 2 + 1)

    @property
    def half_modes(self) -> np.ndarray:
        return np.arange(self.K // 2 + 1)

    @property
    def nyquist(self) -> int:
        return self.K // 2

    @property
    def n_half(self) -> int:
        return self.K // 2 + 1


def half_weights(K: int) -> np.ndarray:
    """Multiplicity of each half-spectrum mode in the full spectrum (1 or 2)."""
    w = np.full(K // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def _check_real_modes(half: np.ndarray, K: int) -> np.ndarray:
    scale = max(float(np.max(np.abs(half))), 1.0) if half.size else 1.0
    bad = np.abs(half[[0, K // 2]].imag)
    if np.any(bad > 1e-12 * scale):
        raise ContractError(
            "modes k=0 and k=K/2 of a real field must be real "
            f"(max |imag| = {bad.max():.3e})"
        )
    out = np.array(half, dtype=complex)
    out[[0, K // 2]] = out[[0, K // 2]].real
    return out


class FourierField:
    """Fourier modes of a real field on a ``K``-point grid.

    Only the half spectrum is stored, so Hermitian symmetry holds by
    construction.  Extra trailing axes (components) are allowed.
    """

    hermitian = True

    def __init__(self, half, K: int):
        half = np.asarray(half, dtype=complex)
        if half.shape[0] != K // 2 + 1:
            raise DimensionError(
                f"half spectrum for K={K} needs {K // 2 + 1} modes, got {half.shape[0]}"
            )
        self.K = int(K)
        self.half = _check_real_modes(half, K)

    @classmethod
    def from_full(cls, full, K: int) -> "FourierField":
        """Build from modes ordered ``-K/2+1 .. K/2``; rejects non-Hermitian input."""
        full = np.asarray(full, dtype=complex)
        if full.shape[0] != K:
            raise DimensionError(f"expected {K} modes, got {full.shape[0]}")
        half = full[K // 2 - 1:]
        neg = full[:K // 2 - 1][::-1]  # modes -1, -2, ..., -K/2+1
        scale = max(float(np.max(np.abs(full))), 1.0)
        if np.max(np.abs(neg - np.conj(half[1:-1])), initial=0.0) > 1e-12 * scale:
            raise ContractError("mode set is not Hermitian: c_{-k} != conj(c_k)")
        return cls(half, K)

    def full(self) -> np.ndarray:
        """Modes ordered ``-K/2+1 .. K/2``."""
        neg = np.conj(self.half[1:-1])[::-1]
        return np.concatenate([neg, self.half], axis=0)

    def coefficient(self, k: int):
        K = self.K
        if not -K // 2 < k <= K // 2:
            raise DimensionError(f"mode {k} outside the range of K={K}")
        return self.half[k] if k >= 0 else np.conj(self.half[-k])

    def __repr__(self):
        return f"FourierField(K={self.K}, shape={self.half.shape})"


def synthesize(half: np.ndarray, K: int) -> np.ndarray:
    """Grid values from half-spectrum modes (mode axis 0)."""
    return np.fft.irfft(np.asarray(half) * K, n=K, axis=0)


def analyze(values: np.ndarray, K: int) -> np.ndarray:
    """Half-spectrum modes of real grid values (grid axis 0)."""
    return np.fft.rfft(values, axis=0) / K


def dft_synthesize(modes: FourierField, grid: SpatialGrid) -> np.ndarray:
    if modes.K != grid.K:
        raise DimensionError(f"field has K={modes.K}, grid has K={grid.K}")
    return synthesize(modes.half, grid.K)


def dft_analyze(values, grid: SpatialGrid) -> FourierField:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.K:
        raise DimensionError(f"expected {grid.K} grid values, got {values.shape[0]}")
    return FourierField(analyze(values, grid.K), grid.K)


def derivative_factor(k: int, c: int, K: int) -> complex:
    """On-grid spectral derivative factor ``(2 pi i k)^c``.

    Odd derivatives of the Nyquist mode are set to zero; they would otherwise
    produce a non-real derivative field.
    """
    if c < 0:
        raise ContractError("derivative order must be non-negative")
    if c % 2 and abs(k) == K // 2:
        return 0j
    return complex((2j * np.pi * k) ** c)


def derivative_factors(K: int, c: int) -> np.ndarray:
    """``derivative_factor`` over the half spectrum."""
    k = np.arange(K // 2 + 1)
    out = (2j * np.pi * k) ** c
    if c % 2:
        out[-1] = 0.0
    return out.astype(complex)
