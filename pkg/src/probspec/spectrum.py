"""Log-log power spectra and aliased Fourier-mode covariances.

The spatial prior spectrum is parameterised as ``sigma(|k|) = exp(tau(l))``
with ``l = log|k|`` on a regular grid in ``l``.  For a grid of ``K`` points the
covariance among the field and its first ``o`` spatial derivatives at
discrete mode ``k`` collects every continuous frequency that aliases onto it:

    D^k_{cd} = (-1)^d sum_n (2 pi i (k + n K))^(c+d) |sigma(|k + n K|)|^2

truncated at ``|n| <= n_max``.  At the Nyquist mode the truncation window is
``n = -n_max .. n_max - 1`` so that the aliased frequency set is symmetric and
``D^{K/2}`` stays real.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import CoverageError, CoverageWarning, DimensionError, ContractError

__all__ = [
    "SpectrumHyper",
    "LogSpectrum",
    "AliasGeometry",
    "default_l_max",
    "regular_l_grid",
    "sigma_sq_at",
    "mode_covariance",
    "mode_covariance_stack",
    "mode_covariance_grad",
    "moments_to_covariance",
    "contract_moment_gradient",
    "covariance_jacobian",
    "FactoredCovariance",
    "ExcitationMap",
    "tau_from_excitations",
    "temporal_update",
    "power_law_spectrum",
    "write_spectrum_csv",
    "read_spectrum_csv",
    "write_spectra_table",
    "read_spectra_table",
]


@dataclass(frozen=True)
class SpectrumHyper:
    """Hyperparameters of the log-frequency IWP prior on ``tau``.

    ``offset`` and ``slope`` fix ``tau`` and its derivative at ``l = 0``.  The
    optional ``offset_std`` / ``slope_std`` let the first excitation pair
    perturb them; both default to zero, which pins the straight line.
    """

    sigma_tau: float = 1.0
    offset: float = 0.0
    slope: float = -3.0
    n_max: int = 100
    offset_std: float = 0.0
    slope_std: float = 0.0

    def __post_init__(self):
        if self.sigma_tau < 0 or self.offset_std < 0 or self.slope_std < 0:
            raise ContractError("standard deviations must be non-negative")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ContractError("n_max must be a positive integer")


def default_l_max(K: int, n_max: int) -> float:
    """Largest log-frequency needed so that every ``|k + nK|``, ``|n| <= n_max`` is covered."""
    return math.log(n_max * K + K // 2)


def regular_l_grid(L: int, l_max: float) -> np.ndarray:
    if L < 2:
        raise ContractError("L must be at least 2")
    if not l_max > 0:
        raise ContractError("l_max must be positive")
    return np.linspace(0.0, l_max, L)


@dataclass
class LogSpectrum:
    """``tau`` values on a regular grid in ``l = log|k|`` starting at ``l = 0``."""

    l_grid: np.ndarray
    tau: np.ndarray
    sigma0: float | None = None

    def __post_init__(self):
        self.l_grid = np.asarray(self.l_grid, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        if self.l_grid.ndim != 1 or self.l_grid.shape != self.tau.shape:
            raise DimensionError("l_grid and tau must be 1-d arrays of equal length")
        if self.l_grid.size < 2:
            raise ContractError("L must be at least 2")
        dl = np.diff(self.l_grid)
        if np.any(dl <= 0) or not np.allclose(dl, dl[0], rtol=1e-10, atol=0):
            raise ContractError("l_grid must be strictly increasing and regular")
        if abs(self.l_grid[0]) > 1e-12:
            raise ContractError("l_grid must start at l = log(1) = 0")
        if self.sigma0 is None:
            self.sigma0 = float(np.exp(self.tau[0]))
        if not self.sigma0 > 0:
            raise ContractError("sigma0 must be positive")

    @property
    def L(self) -> int:
        return self.l_grid.size

    @property
    def l_max(self) -> float:
        return float(self.l_grid[-1])

    @property
    def dl(self) -> float:
        return float(self.l_grid[1] - self.l_grid[0])

    def with_tau(self, tau) -> "LogSpectrum":
        return LogSpectrum(self.l_grid, np.asarray(tau, dtype=float), self.sigma0)

    def copy(self) -> "LogSpectrum":
        return LogSpectrum(self.l_grid.copy(), self.tau.copy(), self.sigma0)


def _interp_index(log_kappa: np.ndarray, l0: float, dl: float, L: int):
    pos = (log_kappa - l0) / dl
    i0 = np.clip(np.floor(pos), 0, L - 2).astype(np.intp)
    frac = np.clip(pos - i0, 0.0, 1.0)
    return i0, frac


def sigma_sq_at(kappa, spec: LogSpectrum):
    """``|sigma(kappa)|^2`` with piecewise-linear ``tau`` in ``l``.

    ``kappa = 0`` returns ``sigma0**2``; ``0 < kappa < 1`` clamps to ``tau(0)``.
    """
    kappa = np.abs(np.asarray(kappa, dtype=float))
    if np.any(kappa > math.exp(spec.l_max) * (1 + 1e-12)):
        raise CoverageError(
            f"frequency {kappa.max():.6g} exceeds the spectrum grid "
            f"(e^l_max = {math.exp(spec.l_max):.6g})"
        )
    zero = kappa == 0
    with np.errstate(divide="ignore"):
        logk = np.where(zero, 0.0, np.log(np.where(zero, 1.0, kappa)))
    i0, frac = _interp_index(logk, spec.l_grid[0], spec.dl, spec.L)
    tau = (1 - frac) * spec.tau[i0] + frac * spec.tau[i0 + 1]
    out = np.where(zero, spec.sigma0 ** 2, np.exp(2 * tau))
    return out if out.ndim else float(out)


class AliasGeometry:
    """Aliased frequency table for the half spectrum of a ``K``-point grid.

    Rows are modes ``k = 0 .. K/2``, columns aliasing shifts ``n`` ordered by
    descending ``|n|`` so that small terms are accumulated first.
    """

    def __init__(self, K: int, n_max: int, L: int, l_max: float):
        self.K, self.n_max, self.L, self.l_max = K, n_max, L, l_max
        mags = np.arange(n_max, -1, -1)
        n = np.concatenate([[-m, m] if m else [0] for m in mags]).astype(np.int64)
        k = np.arange(K // 2 + 1)
        self.n = n
        self.kappa = (k[:, None] + n[None, :] * K).astype(float)
        valid = np.ones(self.kappa.shape, dtype=bool)
        valid[-1, n == n_max] = False  # Nyquist: symmetric window n in [-n_max, n_max - 1]
        self.valid = valid
        self.edge = (np.abs(n) == n_max)[None, :] & valid
        absk = np.abs(self.kappa)
        kmax = absk[valid].max()
        if kmax > math.exp(l_max) * (1 + 1e-12):
            raise CoverageError(
                f"aliased frequency {kmax:.0f} exceeds e^l_max = {math.exp(l_max):.6g}; "
                f"need l_max >= log({kmax:.0f})"
            )
        self.zero = absk == 0
        with np.errstate(divide="ignore"):
            logk = np.log(np.where(self.zero, 1.0, absk))
        dl = l_max / (L - 1)
        self.i0, self.frac = _interp_index(logk, 0.0, dl, L)
        self._powers = {}

    def powers(self, p: int) -> np.ndarray:
        """``(2 pi i kappa)^p`` masked to valid terms (phase ``i^p`` applied exactly)."""
        if p not in self._powers:
            t = (2 * np.pi * self.kappa) ** p * (1, 1j, -1, -1j)[p % 4]
            self._powers[p] = np.where(self.valid, t, 0.0)
        return self._powers[p]

    def sigma_sq(self, spec: LogSpectrum) -> np.ndarray:
        tau = (1 - self.frac) * spec.tau[self.i0] + self.frac * spec.tau[self.i0 + 1]
        s2 = np.exp(2 * tau)
        s2 = np.where(self.zero, spec.sigma0 ** 2, s2)
        return np.where(self.valid, s2, 0.0)

    def moments(self, spec: LogSpectrum, o: int, warn: bool = True):
        """Aliased moments ``M_p = sum_n (2 pi i kappa)^p |sigma|^2``, ``p = 0..2o``.

        Returns ``(M, s2)`` with ``M`` of shape ``(K/2+1, 2o+1)``.
        """
        if spec.L != self.L or abs(spec.l_max - self.l_max) > 1e-12 * max(1.0, self.l_max):
            raise DimensionError("spectrum grid does not match the alias geometry")
        s2 = self.sigma_sq(spec)
        M = np.stack([np.sum(self.powers(p) * s2, axis=1) for p in range(2 * o + 1)], axis=1)
        # symmetric alias windows at k = 0 and K/2: odd moments vanish exactly
        M[[0, -1], 1::2] = 0.0
        if not np.all(np.isfinite(M)):
            bad = np.argwhere(~np.isfinite(M))[0]
            raise CoverageError(f"non-finite aliased sum at mode k={bad[0]}, moment p={bad[1]}")
        if warn:
            top = np.abs(self.powers(2 * o)) * s2
            tail = np.sum(np.where(self.edge, top, 0.0), axis=1)
            total = np.sum(top, axis=1)
            if np.any(tail > 1e-10 * total):
                k = int(np.argmax(tail / np.where(total > 0, total, 1.0)))
                warnings.warn(
                    f"aliasing sum truncated at |n|={self.n_max} still carries "
                    f"{tail[k] / total[k]:.2e} of the total at mode k={k}",
                    CoverageWarning,
                    stacklevel=3,
                )
        return M, s2


@functools.lru_cache(maxsize=32)
def _geometry(K: int, n_max: int, L: int, l_max: float) -> AliasGeometry:
    return AliasGeometry(K, n_max, L, l_max)


def geometry_for(spec: LogSpectrum, n_max: int, K: int) -> AliasGeometry:
    return _geometry(int(K), int(n_max), spec.L, float(spec.l_max))


def moments_to_covariance(M: np.ndarray, o: int) -> np.ndarray:
    """Assemble ``D_{cd} = (-1)^d M_{c+d}`` and symmetrise to exact Hermitian form."""
    c = np.arange(o + 1)
    sign = (-1.0) ** c
    D = M[..., c[:, None] + c[None, :]] * sign[None, :]
    return 0.5 * (D + np.conj(np.swapaxes(D, -1, -2)))


def mode_covariance_stack(spec: LogSpectrum, n_max: int, o: int, K: int, warn: bool = True):
    """``D^k`` for all half-spectrum modes, shape ``(K/2+1, o+1, o+1)``."""
    geom = geometry_for(spec, n_max, K)
    M, _ = geom.moments(spec, o, warn=warn)
    return moments_to_covariance(M, o)


def _half_index(k: int, K: int) -> tuple[int, bool]:
    if not -K // 2 < k <= K // 2:
        raise DimensionError(f"mode {k} outside the range of K={K}")
    return abs(k), k < 0


def mode_covariance(k: int, spec: LogSpectrum, hyper: SpectrumHyper, o: int, K: int):
    """``D^k`` for a single mode ``k`` in ``-K/2+1 .. K/2``."""
    idx, neg = _half_index(k, K)
    D = mode_covariance_stack(spec, hyper.n_max, o, K)[idx]
    return np.conj(D) if neg else D


def mode_covariance_grad(k: int, spec: LogSpectrum, hyper: SpectrumHyper, o: int, K: int):
    """``dD^k / dtau_m`` for every grid node ``m``, shape ``(L, o+1, o+1)``.

    Uses ``d|sigma|^2 / dtau_m = 2 |sigma|^2 w_m`` with ``w_m`` the linear
    interpolation weights; the ``sigma0`` term of mode 0 does not depend on
    ``tau``.
    """
    idx, neg = _half_index(k, K)
    geom = geometry_for(spec, hyper.n_max, K)
    s2 = geom.sigma_sq(spec)[idx]
    ds2 = np.where(geom.zero[idx], 0.0, 2 * s2)
    i0, frac = geom.i0[idx], geom.frac[idx]
    grads = np.zeros((spec.L, 2 * o + 1), dtype=complex)
    for p in range(2 * o + 1):
        coef = geom.powers(p)[idx] * ds2
        np.add.at(grads[:, p], i0, coef * (1 - frac))
        np.add.at(grads[:, p], i0 + 1, coef * frac)
    G = moments_to_covariance(grads, o)
    return np.conj(G) if neg else G


def contract_moment_gradient(psi: np.ndarray, geom: AliasGeometry, s2: np.ndarray) -> np.ndarray:
    """Chain ``dF = Re sum_{k,p} psi[k, p] dM[k, p]`` down to ``dF/dtau``."""
    psi = np.array(psi, dtype=complex)
    psi[[0, -1], 1::2] = 0.0
    coef = np.zeros(geom.kappa.shape)
    for p in range(psi.shape[1]):
        coef += np.real(psi[:, p:p + 1] * geom.powers(p))
    coef *= np.where(geom.zero, 0.0, 2 * s2)
    L = geom.L
    i0 = geom.i0.ravel()
    frac = geom.frac.ravel()
    c = coef.ravel()
    return (np.bincount(i0, weights=c * (1 - frac), minlength=L)
            + np.bincount(i0 + 1, weights=c * frac, minlength=L))


def covariance_jacobian(geom: AliasGeometry, s2: np.ndarray, o: int) -> np.ndarray:
    """Dense ``dD^k_{cd} / dtau_m`` for all half modes, shape ``(K/2+1, o+1, o+1, L)``."""
    nh, L = geom.kappa.shape[0], geom.L
    base = np.arange(nh)[:, None] * L
    lo = (base + geom.i0).ravel()
    w_lo = (1 - geom.frac).ravel()
    w_hi = geom.frac.ravel()
    ds2 = np.where(geom.zero, 0.0, 2 * s2)
    G = np.zeros((2 * o + 1, nh, L), dtype=complex)
    for p in range(2 * o + 1):
        coef = (geom.powers(p) * ds2).ravel()
        for part, unit in ((coef.real, 1.0), (coef.imag, 1j)):
            if not np.any(part):
                continue
            acc = (np.bincount(lo, weights=part * w_lo, minlength=nh * L)
                   + np.bincount(lo + 1, weights=part * w_hi, minlength=nh * L))
            G[p] += unit * acc[:nh * L].reshape(nh, L)
    G[1::2, [0, -1]] = 0.0
    c = np.arange(o + 1)
    sign = (-1.0) ** c
    return np.moveaxis(G[c[:, None] + c[None, :]], 2, 0) * sign[None, None, :, None]


class FactoredCovariance:
    """Square-root form of the regularised mode covariances.

    ``D^k`` is a sum of rank-one terms ``|sigma_n|^2 a_n a_n^H`` with
    ``a_n = ((2 pi i kappa_n)^c)_c``.  Stacking ``sigma_n a_n^H`` (plus ridge
    rows ``sqrt(eps D_cc) e_c``) into ``B`` and taking ``B = Q R`` gives
    ``D + eps diag(D) = L L^H`` with ``L = R^H``, without ever squaring the
    condition number.  This matters because low modes are rank one to
    roughly ``(k/K)^6`` under steep spectra.

    Per aliased term the vectors ``g_n = sigma_n L^{-1} a_n`` are exposed;
    they give leverage scores ``|g_n|^2`` and whitened projections used by
    gradients with respect to ``tau``.  Modes ``0`` and ``K/2`` are real.
    """

    def __init__(self, geom: AliasGeometry, spec: LogSpectrum, o: int, eps: float = 0.0):
        if spec.L != geom.L or abs(spec.l_max - geom.l_max) > 1e-12 * max(1.0, geom.l_max):
            raise DimensionError("spectrum grid does not match the alias geometry")
        self.geom, self.o, self.eps = geom, o, float(eps)
        o1 = o + 1
        nh, T = geom.kappa.shape
        s2 = geom.sigma_sq(spec)
        if not np.all(np.isfinite(s2)):
            bad = np.argwhere(~np.isfinite(s2))[0]
            raise CoverageError(f"non-finite spectrum value at mode k={bad[0]}, alias column {bad[1]}")
        a = np.stack([geom.powers(c) for c in range(o1)], axis=-1)  # (nh, T, o1)
        sq = np.sqrt(s2)[..., None]
        diag = np.einsum("kt,ktc->kc", s2, np.abs(a) ** 2)
        B = np.zeros((nh, 2 * T + o1, o1), dtype=complex)
        B[:, :T] = sq * np.conj(a)
        B[[0, -1], :T] = sq[[0, -1]] * a[[0, -1]].real
        B[[0, -1], T:2 * T] = sq[[0, -1]] * a[[0, -1]].imag
        idx = np.arange(o1)
        B[:, 2 * T + idx, idx] = np.sqrt(self.eps * diag)
        Q, R = np.linalg.qr(B)
        d = np.diagonal(R, axis1=-2, axis2=-1)
        ph = np.where(np.abs(d) > 0, d / np.where(np.abs(d) > 0, np.abs(d), 1.0), 1.0)
        R = np.conj(ph)[:, :, None] * R
        Q = Q * ph[:, None, :]
        R[[0, -1]] = R[[0, -1]].real
        Q[[0, -1]] = Q[[0, -1]].real
        self.L = np.conj(np.swapaxes(R, -1, -2))
        g = np.conj(Q[:, :T])
        g[[0, -1]] = Q[[0, -1], :T] + 1j * Q[[0, -1], T:2 * T]
        self.g = g
        self.s2 = s2
        self.a = a
        self.diag = (1.0 + self.eps) * diag
        self.active = geom.valid & ~geom.zero

    @property
    def logdet(self) -> np.ndarray:
        """``log det(D + eps diag D)`` per mode."""
        piv = np.real(np.diagonal(self.L, axis1=-2, axis2=-1))
        return 2 * np.sum(np.log(piv), axis=1)

    def cov(self) -> np.ndarray:
        return self.L @ np.conj(np.swapaxes(self.L, -1, -2))

    def leverage(self) -> np.ndarray:
        """``|sigma_n|^2 a_n^H D^{-1} a_n`` per mode and aliased term."""
        return np.sum(np.abs(self.g) ** 2, axis=-1)

    def project(self, y: np.ndarray) -> np.ndarray:
        """``g_n^H y`` for whitened ``y = L^{-1} r``: equals ``sigma_n a_n^H D^{-1} r``."""
        return np.einsum("ktc,kc->kt", np.conj(self.g), y)

    def to_nodes(self, coef: np.ndarray) -> np.ndarray:
        """Chain per-term derivatives ``dF/dtau(kappa_n)`` to the ``tau`` grid nodes."""
        geom = self.geom
        c = np.where(self.active, coef, 0.0).ravel()
        i0 = geom.i0.ravel()
        frac = geom.frac.ravel()
        return (np.bincount(i0, weights=c * (1 - frac), minlength=geom.L)
                + np.bincount(i0 + 1, weights=c * frac, minlength=geom.L))

    @property
    def inv(self) -> np.ndarray:
        """``L^{-1}`` per mode (cached)."""
        if not hasattr(self, "_inv"):
            self._inv = np.linalg.inv(self.L)
        return self._inv

    def whiten(self, r: np.ndarray) -> np.ndarray:
        """``L^{-1} r`` per mode for ``r`` of shape ``(K/2+1, o+1)``."""
        return np.einsum("kij,kj->ki", self.inv, r)

    def tau_gradient(self, w: np.ndarray, logdet_mult: float, whitened, scales) -> np.ndarray:
        """Node gradient of ``sum_k w_k/2 [m logdet D_k + sum_a s_a |y_ak|^2]``.

        ``whitened`` holds ``y_a = L^{-1} r_a`` for fixed residuals ``r_a``;
        ``scales`` holds the ``s_a``.  The ridge is differentiated along with ``D``.
        """
        coef = logdet_mult * self.leverage()
        for y, sc in zip(whitened, scales):
            coef = coef - sc * np.abs(self.project(y)) ** 2
        if self.eps:
            dinv = np.sum(np.abs(self.inv) ** 2, axis=1)
            ridge = logdet_mult * dinv
            for y, sc in zip(whitened, scales):
                beta = np.einsum("kji,kj->ki", np.conj(self.inv), y)
                ridge = ridge - sc * np.abs(beta) ** 2
            coef = coef + self.eps * self.s2 * np.einsum("ktc,kc->kt", np.abs(self.a) ** 2, ridge)
        return self.to_nodes(w[:, None] * coef)

    def fisher_nodes(self, w: np.ndarray, copies: float = 1.0) -> np.ndarray:
        """Fisher information of ``tau`` (nodes x nodes) for ``copies`` independent draws per mode.

        Modes are weighted by ``w/2``: ``w = 1`` for real and ``w = 2`` for complex modes.
        """
        L = self.geom.L
        F = np.zeros((L, L))
        for k in range(self.L.shape[0]):
            act = self.active[k]
            W = self.node_matrix(k)[act]
            gk = self.g[k, act]
            G = 4.0 * np.abs(np.conj(gk) @ gk.T) ** 2
            F += 0.5 * w[k] * copies * (W.T @ G @ W)
        return F

    def node_matrix(self, k: int) -> np.ndarray:
        """Interpolation weights from aliased terms of mode ``k`` to nodes, shape ``(T, L)``."""
        geom = self.geom
        T = geom.kappa.shape[1]
        W = np.zeros((T, geom.L))
        act = self.active[k]
        rows = np.arange(T)[act]
        W[rows, geom.i0[k][act]] += 1 - geom.frac[k][act]
        W[rows, geom.i0[k][act] + 1] += geom.frac[k][act]
        return W


class ExcitationMap:
    """Linear map from standard-normal excitations to ``tau`` on the ``l`` grid.

    ``tau`` follows an integrated Wiener process in ``l`` with driving
    amplitude ``sigma_tau``.  Excitations have shape ``(L, 2)``: row 0 perturbs
    the initial value and slope (scaled by ``offset_std``/``slope_std``), row
    ``j >= 1`` drives the exact position/velocity transition from node ``j-1``
    to node ``j`` through the lower Cholesky factor of its covariance.
    """

    def __init__(self, hyper: SpectrumHyper, l_grid: np.ndarray):
        l_grid = np.asarray(l_grid, dtype=float)
        L = l_grid.size
        dl = float(l_grid[1] - l_grid[0])
        self.L = L
        self.base = hyper.offset + hyper.slope * (l_grid - l_grid[0])
        Q = hyper.sigma_tau ** 2 * np.array([[dl ** 3 / 3, dl ** 2 / 2], [dl ** 2 / 2, dl]])
        chol = np.linalg.cholesky(Q) if hyper.sigma_tau > 0 else np.zeros((2, 2))
        B = np.zeros((L, 2 * L))
        pos = np.zeros(2 * L)
        vel = np.zeros(2 * L)
        pos[0] = hyper.offset_std
        vel[1] = hyper.slope_std
        B[0] = pos
        for j in range(1, L):
            pos = pos + dl * vel
            pos[2 * j] += chol[0, 0]
            vel = vel.copy()
            vel[2 * j] += chol[1, 0]
            vel[2 * j + 1] += chol[1, 1]
            B[j] = pos
        self.matrix = B

    def __call__(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.L, 2):
            raise DimensionError(f"excitations must have shape ({self.L}, 2), got {xi.shape}")
        return self.base + self.matrix @ xi.ravel()

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ g).reshape(self.L, 2)


@functools.lru_cache(maxsize=16)
def _excitation_map(hyper: SpectrumHyper, L: int, l_max: float) -> ExcitationMap:
    return ExcitationMap(hyper, regular_l_grid(L, l_max))


def excitation_map(hyper: SpectrumHyper, l_grid: np.ndarray) -> ExcitationMap:
    return _excitation_map(hyper, int(len(l_grid)), float(l_grid[-1]))


def tau_from_excitations(xi, hyper: SpectrumHyper, l_grid) -> np.ndarray:
    """``tau`` values generated from excitations ``xi`` of shape ``(L, 2)``."""
    return excitation_map(hyper, np.asarray(l_grid, dtype=float))(xi)


def temporal_update(tau_prev, delta: float, tau_tilde) -> np.ndarray:
    """Discrete Wiener step ``tau_i = tau_{i-1} + delta * tau_tilde``."""
    tau_prev = np.asarray(tau_prev, dtype=float)
    tau_tilde = np.asarray(tau_tilde, dtype=float)
    if tau_prev.shape != tau_tilde.shape:
        raise DimensionError("tau grids do not match")
    return tau_prev + delta * tau_tilde


def power_law_spectrum(exponent: float, amplitude: float, l_grid) -> LogSpectrum:
    """``|sigma(k)|^2 = amplitude^2 |k|^exponent``; ``sigma0 = amplitude``."""
    if not amplitude > 0:
        raise ContractError("amplitude must be positive")
    l_grid = np.asarray(l_grid, dtype=float)
    return LogSpectrum(l_grid, math.log(amplitude) + 0.5 * exponent * l_grid, float(amplitude))


# -- CSV interchange ---------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _header_lines(spec: LogSpectrum, hyper: SpectrumHyper | None, extra: dict | None):
    lines = [
        "# probspec log-spectrum; l = log|k| [dimensionless], tau = log sigma",
        f"# L = {spec.L}",
        f"# l_max = {_fmt(spec.l_max)}",
        f"# sigma0 = {_fmt(spec.sigma0)}",
    ]
    if hyper is not None:
        for key, val in asdict(hyper).items():
            lines.append(f"# hyper.{key} = {_fmt(val) if isinstance(val, float) else val}")
    for key, val in (extra or {}).items():
        lines.append(f"# {key} = {val}")
    return lines


def _parse_header(lines):
    meta = {}
    for line in lines:
        body = line[1:].strip()
        if "=" in body:
            key, val = (s.strip() for s in body.split("=", 1))
            meta[key] = val
    return meta


def _hyper_from_meta(meta: dict) -> SpectrumHyper | None:
    kw = {}
    for f in fields(SpectrumHyper):
        key = f"hyper.{f.name}"
        if key in meta:
            kw[f.name] = int(meta[key]) if f.name == "n_max" else float(meta[key])
    return SpectrumHyper(**kw) if kw else None


def write_spectrum_csv(path, spec: LogSpectrum, hyper: SpectrumHyper | None = None, extra=None):
    lines = _header_lines(spec, hyper, extra)
    lines.append("l,tau")
    lines += [f"{_fmt(l)},{_fmt(t)}" for l, t in zip(spec.l_grid, spec.tau)]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_spectrum_csv(path):
    """Returns ``(LogSpectrum, hyper_or_None, meta)``."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    head = [ln for ln in raw if ln.startswith("#")]
    body = [ln for ln in raw if ln and not ln.startswith("#")]
    meta = _parse_header(head)
    if not body or body[0].replace(" ", "") != "l,tau":
        raise ContractError(f"{path}: expected a 'l,tau' header row")
    data = np.array([[float(v) for v in ln.split(",")] for ln in body[1:]])
    spec = LogSpectrum(data[:, 0], data[:, 1], float(meta["sigma0"]) if "sigma0" in meta else None)
    if "L" in meta and int(meta["L"]) != spec.L:
        raise DimensionError(f"{path}: header says L={meta['L']} but found {spec.L} rows")
    return spec, _hyper_from_meta(meta), meta


def write_spectra_table(path, l_grid, sigma0: float, rows, hyper: SpectrumHyper | None = None,
                        extra=None):
    """One ``tau`` row per step: columns ``step,time,tau_0..tau_{L-1}``."""
    l_grid = np.asarray(l_grid, dtype=float)
    spec = LogSpectrum(l_grid, np.zeros_like(l_grid), sigma0)
    lines = _header_lines(spec, hyper, extra)
    lines.append(",".join(["step", "time"] + [f"tau_{m}" for m in range(len(l_grid))]))
    for step, time, tau in rows:
        lines.append(",".join([str(int(step)), _fmt(time)] + [_fmt(t) for t in tau]))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_spectra_table(path):
    """Returns ``(l_grid, sigma0, steps, times, taus, hyper)``."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    meta = _parse_header([ln for ln in raw if ln.startswith("#")])
    body = [ln for ln in raw if ln and not ln.startswith("#")]
    if not body or not body[0].startswith("step,time"):
        raise ContractError(f"{path}: expected a 'step,time,tau_0,...' header row")
    L = int(meta["L"])
    l_grid = regular_l_grid(L, float(meta["l_max"]))
    rows = [ln.split(",") for ln in body[1:]]
    steps = np.array([int(r[0]) for r in rows], dtype=int)
    times = np.array([float(r[1]) for r in rows])
    taus = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), L)
    return l_grid, float(meta["sigma0"]), steps, times, taus, _hyper_from_meta(meta)


def _atomic_write(path, text: str):
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
