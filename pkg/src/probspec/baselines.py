"""Ground truths and comparison baselines.

* ``analytic_diffusion``: exact per-mode decay for the heat equation.
* ``reference_burgers``: dealiased pseudo-spectral RK4 at a fine resolution.
* ``trapezoidal_step``: implicit trapezoidal rule with spectral derivatives.
* ``spectrum_from_truth``: MAP log-spectrum of an observed true transition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, CoverageError, DimensionError, NumericalError
from .grid import FourierField, analyze, derivative_factors, half_weights, synthesize
from .optim import OptimizeResult, lbfgs
from .pde import PdeModel
from .prior import iwp_covariance
from .spectrum import (FactoredCovariance, LogSpectrum, SpectrumHyper, excitation_map, geometry_for,
                       temporal_update)

__all__ = [
    "analytic_diffusion",
    "ReferenceSolution",
    "reference_burgers",
    "trapezoidal_step",
    "TruthTransition",
    "TruthSpectrumFit",
    "truth_state",
    "truth_transition",
    "spectrum_from_truth",
    "restrict_values",
]


# -- analytic diffusion ---------------------------------------------------------

def analytic_diffusion(initial, nu: float, t: float):
    """Heat-equation solution ``c_k(t) = c_k(0) exp(-nu (2 pi k)^2 t)``.

    Accepts a :class:`FourierField` (returns one) or a half-spectrum array of
    shape ``(K/2+1, ...)`` together with ``K`` implied by its length.
    """
    if t < 0:
        raise ContractError(f"time must be non-negative, got {t}")
    if isinstance(initial, FourierField):
        k = np.arange(initial.half.shape[0])
        fac = np.exp(-nu * (2 * np.pi * k) ** 2 * t)
        return FourierField(initial.half * fac.reshape((-1,) + (1,) * (initial.half.ndim - 1)),
                            initial.K)
    half = np.asarray(initial, dtype=complex)
    k = np.arange(half.shape[0])
    fac = np.exp(-nu * (2 * np.pi * k) ** 2 * t)
    return half * fac.reshape((-1,) + (1,) * (half.ndim - 1))


# -- grid restriction ---------------------------------------------------------

def restrict_values(values: np.ndarray, K: int) -> np.ndarray:
    """Subsample fine grid values (last axis) onto the ``K``-point grid."""
    values = np.asarray(values)
    K_ref = values.shape[-1]
    if K_ref % K:
        raise DimensionError(f"fine resolution {K_ref} is not a multiple of {K}")
    return values[..., :: K_ref // K]


# -- Burgers reference ----------------------------------------------------------

@dataclass
class ReferenceSolution:
    """Fine-grid reference trajectory.

    ``values[j]`` holds the grid values at ``times[j]`` on ``K_ref`` points.
    """

    times: np.ndarray
    values: np.ndarray
    K_ref: int
    dt_ref: float
    nu: float
    dealias: bool = True
    meta: dict = field(default_factory=dict)

    def at(self, j: int, K: int | None = None) -> np.ndarray:
        """Grid values at output index ``j``, restricted to ``K`` points if given."""
        v = self.values[j]
        return v if K is None else restrict_values(v, K)


def _burgers_rhs(c: np.ndarray, nu: float, ik: np.ndarray, lap: np.ndarray, mask: np.ndarray, K: int):
    """Fourier-space Burgers tendency in conservative form ``-(s^2/2)_x + nu s_xx``."""
    s = synthesize(c * mask, K)
    nl = analyze(0.5 * s * s, K) * mask
    return -ik * nl + nu * lap * c


def _rk4(c0: np.ndarray, nu: float, t_out: np.ndarray, dt_ref: float, K: int, dealias: bool):
    k = np.arange(K // 2 + 1)
    ik = 2j * np.pi * k
    ik[-1] = 0.0
    lap = -(2 * np.pi * k) ** 2
    mask = np.ones(k.size)
    if dealias:
        mask[k > K // 3] = 0.0
    c = c0.copy()
    n0 = float(np.linalg.norm(c0))
    out = [c.copy()]
    t = float(t_out[0])
    for t_next in t_out[1:]:
        span = float(t_next) - t
        n_sub = max(1, int(math.ceil(span / dt_ref - 1e-9)))
        h = span / n_sub
        for j in range(n_sub):
            k1 = _burgers_rhs(c, nu, ik, lap, mask, K)
            k2 = _burgers_rhs(c + 0.5 * h * k1, nu, ik, lap, mask, K)
            k3 = _burgers_rhs(c + 0.5 * h * k2, nu, ik, lap, mask, K)
            k4 = _burgers_rhs(c + h * k3, nu, ik, lap, mask, K)
            c = c + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            norm = float(np.linalg.norm(c))
            if not np.isfinite(norm) or norm > 10 * n0:
                raise NumericalError(
                    f"reference solution norm grew from {n0:.3e} to {norm:.3e} by t={t + (j + 1) * h:.6g} "
                    f"(K_ref={K}, dt_ref={dt_ref:.3e}); reduce dt_ref")
        out.append(c.copy())
        t = float(t_next)
    return np.array(out)


def reference_burgers(values0: np.ndarray, nu: float, times, K_ref: int = 1024,
                      dt_ref: float | None = None, delta: float | None = None,
                      dealias: bool = True, self_check: bool = True) -> ReferenceSolution:
    """Viscous Burgers reference by explicit RK4 on the pseudo-spectral semi-discretisation.

    Parameters
    ----------
    values0 : array
        Initial grid values on ``K`` points with ``K_ref / K`` an integer; they
        are interpolated spectrally onto the fine grid.
    times : sequence of float
        Output times, starting at the initial time.
    dt_ref : float, optional
        Internal step; defaults to ``delta / 100`` (``delta`` is the filter step).
    self_check : bool
        Re-run with ``dt_ref / 2`` and require agreement to ``1e-8`` relative at the end.
    """
    values0 = np.asarray(values0, dtype=float)
    K = values0.shape[-1]
    if K_ref % K or K_ref < 4 * K:
        raise ContractError(f"need K_ref >= 4K and K_ref/K integer, got K={K}, K_ref={K_ref}")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ContractError("times must be a strictly increasing sequence")
    if dt_ref is None:
        if delta is None:
            raise ContractError("give dt_ref or the filter step delta")
        dt_ref = delta / 100
    if delta is not None and dt_ref > delta / 50 * (1 + 1e-12):
        raise ContractError(f"dt_ref = {dt_ref} exceeds delta/50 = {delta / 50}")
    coarse = analyze(values0, K)
    c0 = np.zeros(K_ref // 2 + 1, dtype=complex)
    c0[: K // 2 + 1] = coarse
    if K // 2 < K_ref // 2:
        # split the coarse Nyquist mode evenly between +K/2 and -K/2
        c0[K // 2] *= 0.5
    coeffs = _rk4(c0, nu, times, dt_ref, K_ref, dealias)
    meta = {"K_ref": K_ref, "dt_ref": dt_ref, "dealias": dealias}
    if self_check and times.size > 1:
        fine = _rk4(c0, nu, times[[0, -1]], dt_ref / 2, K_ref, dealias)[-1]
        rel = float(np.linalg.norm(fine - coeffs[-1]) / max(np.linalg.norm(coeffs[-1]), 1e-300))
        meta["self_check"] = rel
        if rel >= 1e-8:
            raise NumericalError(
                f"reference not converged in time: halving dt_ref changes the end state by {rel:.2e}")
    values = np.array([synthesize(c, K_ref) for c in coeffs])
    return ReferenceSolution(times, values, K_ref, dt_ref, nu, dealias, meta)


# -- trapezoidal baseline ----------------------------------------------------------

def _derivative_matrices(K: int, order: int) -> np.ndarray:
    """Real ``(order+1, K, K)`` spectral differentiation matrices on the grid."""
    eye = np.eye(K)
    modes = analyze(eye, K)  # (nh, K): column j is the spectrum of e_j
    return np.stack([synthesize(derivative_factors(K, c)[:, None] * modes, K) for c in range(order + 1)])


def _fields(values: np.ndarray, K: int, order: int) -> np.ndarray:
    c = analyze(values, K)
    return np.stack([synthesize(derivative_factors(K, j) * c, K) for j in range(order + 1)])


def trapezoidal_step(values: np.ndarray, pde: PdeModel, delta: float, tol: float = 1e-12,
                     max_iter: int = 50) -> np.ndarray:
    """One implicit trapezoidal step ``s' = s + delta/2 (F(s) + F(s'))``.

    ``F`` evaluates the PDE right-hand side with spectral derivatives.  The
    implicit equation is solved by damped Newton iteration on the grid values.
    """
    values = np.asarray(values, dtype=float)
    K = values.size
    o = pde.order
    F0 = pde.rhs(_fields(values, K, o))
    Dm = _derivative_matrices(K, o)
    base = values + 0.5 * delta * F0
    s = values + delta * F0

    def residual(x):
        return x - base - 0.5 * delta * pde.rhs(_fields(x, K, o))

    r = residual(s)
    scale = max(float(np.linalg.norm(values)), 1e-300)
    # stiff steps stall at the roundoff level of the equation's terms
    floor = 64 * np.finfo(float).eps * (scale + delta * float(np.linalg.norm(F0)))
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * scale:
            return s
        p = pde.partials(_fields(s, K, o))  # (o+1, K)
        J = np.eye(K) - 0.5 * delta * np.einsum("cj,cjk->jk", p, Dm)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"trapezoidal Newton system singular: {exc}") from None
        lam = 1.0
        n0 = np.linalg.norm(r)
        while True:
            s_new = s + lam * step
            r_new = residual(s_new)
            if np.linalg.norm(r_new) < n0 or lam < 1e-8:
                break
            lam *= 0.5
        if not np.all(np.isfinite(r_new)) or np.linalg.norm(r_new) >= n0:
            if n0 <= floor:
                return s
            raise NumericalError("trapezoidal Newton iteration diverged")
        s, r = s_new, r_new
    if np.linalg.norm(r) <= tol * scale:
        return s
    raise NumericalError(f"trapezoidal solve did not reach residual {tol:g} relative "
                         f"(got {np.linalg.norm(r) / scale:.2e})")


# -- spectrum from the true evolution --------------------------------------------------

@dataclass
class TruthTransition:
    """True ``(u, udot)`` at two consecutive times on the ``K``-point grid.

    Each array has shape ``(K/2+1, o+1)``; ``udot[:, 0]`` is the PDE right-hand side.
    """

    u_prev: np.ndarray
    udot_prev: np.ndarray
    u: np.ndarray
    udot: np.ndarray


def truth_state(values: np.ndarray, pde: PdeModel, K: int) -> tuple[np.ndarray, np.ndarray]:
    """``(u, udot)`` on the ``K``-point grid from fine grid values.

    The field and its right-hand side are evaluated at the fine resolution,
    restricted to ``K`` points and differentiated spectrally there.
    """
    values = np.asarray(values, dtype=float)
    K_f = values.size
    o = pde.order
    f_fine = pde.rhs(_fields(values, K_f, o))
    s = analyze(restrict_values(values, K), K)
    f = analyze(restrict_values(f_fine, K), K)
    u = np.stack([derivative_factors(K, c) * s for c in range(o + 1)], axis=1)
    udot = np.stack([derivative_factors(K, c) * f for c in range(o + 1)], axis=1)
    for a in (u, udot):
        a[[0, -1]] = a[[0, -1]].real
    return u, udot


def truth_transition(values_prev: np.ndarray, values: np.ndarray, pde: PdeModel, K: int) -> TruthTransition:
    up, dp = truth_state(values_prev, pde, K)
    u, d = truth_state(values, pde, K)
    return TruthTransition(up, dp, u, d)


@dataclass
class TruthSpectrumFit:
    spectrum: LogSpectrum
    xi: np.ndarray
    objective: float
    iterations: int
    grad_norm: float
    converged: bool
    message: str


class _CoupledMap:
    """``temporal_update(tau_prev, delta, emap(xi))`` as an affine map of ``xi``."""

    def __init__(self, emap, tau_prev: np.ndarray, delta: float):
        if tau_prev.shape != emap.base.shape:
            raise DimensionError("tau_prev does not match the l grid")
        self.base = temporal_update(tau_prev, delta, emap.base)
        self.matrix = delta * emap.matrix

    def __call__(self, xi):
        return self.base + self.matrix @ np.asarray(xi, dtype=float).ravel()


class _TruthObjective:
    """``-log p(u, udot | previous; tau) - log N(xi)`` up to a constant, in ``xi``."""

    def __init__(self, tr: TruthTransition, delta: float, hyper: SpectrumHyper, l_grid, sigma0: float,
                 n_max: int, threshold: float, tau_prev=None):
        u = np.asarray(tr.u)
        self.nh, o1 = u.shape
        self.K = 2 * (self.nh - 1)
        self.o = o1 - 1
        self.w = half_weights(self.K)
        self.emap = excitation_map(hyper, np.asarray(l_grid, dtype=float))
        if tau_prev is not None:
            self.emap = _CoupledMap(self.emap, np.asarray(tau_prev, dtype=float), delta)
        self.template = LogSpectrum(np.asarray(l_grid, dtype=float), self.emap.base, sigma0)
        self.geom = geometry_for(self.template, n_max, self.K)
        self.eps = threshold
        r_u = u - (tr.u_prev + delta * tr.udot_prev)
        r_d = tr.udot - tr.udot_prev
        C = np.linalg.cholesky(iwp_covariance(delta))
        # decorrelate the (u, udot) pair; each part then has covariance D per mode
        a0 = r_u / C[0, 0]
        a1 = (r_d - C[1, 0] * a0) / C[1, 1]
        self.res = (a0, a1)
        self.L = self.template.L
        self.pre = None

    def spectrum(self, xi):
        return self.template.with_tau(self.emap(np.asarray(xi).reshape(self.L, 2)))

    def factor(self, xi) -> FactoredCovariance:
        return FactoredCovariance(self.geom, self.spectrum(xi), self.o, self.eps)

    def __call__(self, xi):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                fac = self.factor(xi)
            except (CoverageError, NumericalError, np.linalg.LinAlgError):
                return np.inf, np.zeros_like(xi)
            piv = np.real(np.diagonal(fac.L, axis1=-2, axis2=-1))
            if not np.all(piv > 0) or not np.all(np.isfinite(fac.L)):
                return np.inf, np.zeros_like(xi)
            ys = [fac.whiten(r) for r in self.res]
            per_mode = 2 * fac.logdet + sum(np.sum(np.abs(y) ** 2, axis=1) for y in ys)
            F = 0.5 * float(np.sum(self.w * per_mode)) + 0.5 * float(np.sum(xi ** 2))
            gtau = fac.tau_gradient(self.w, 2.0, ys, [1.0, 1.0])
            g = self.emap.matrix.T @ gtau + xi
        if not np.isfinite(F) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(xi)
        return F, g

    def set_reference(self, xi):
        """Fisher preconditioner at ``xi``; identity where the covariance is not representable."""
        self.pre = None
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                fac = self.factor(xi)
                F = fac.fisher_nodes(self.w, copies=2.0)
                Bm = self.emap.matrix
                H = np.eye(2 * self.L) + Bm.T @ F @ Bm
                if np.all(np.isfinite(H)):
                    self.pre = cho_factor(H, lower=True)
            except (CoverageError, NumericalError, np.linalg.LinAlgError):
                pass

    def precondition(self, g):
        return g if self.pre is None else cho_solve(self.pre, g)


def spectrum_from_truth(tr: TruthTransition, delta: float, hyper: SpectrumHyper, l_grid,
                        sigma0: float = 1.0, *, n_max: int = 100, threshold: float = 1e-12,
                        gtol: float = 1e-9, max_iter: int = 500, memory: int = 20,
                        ftol: float = 1e-13, rebase_every: int = 50,
                        xi0: np.ndarray | None = None, tau_prev=None) -> TruthSpectrumFit:
    """MAP log-spectrum explaining one true transition under the Markov prior.

    The true pair ``(u, udot)`` is scored against the integrated Wiener
    transition from the previous true pair with covariance
    ``iwp_covariance(delta) (x) D(tau)``; ``tau`` is parametrised by
    standard-normal excitations under ``hyper``.  The ``k = 0`` variance
    ``sigma0**2`` is held fixed.

    With ``tau_prev`` (values on ``l_grid``) the fit is temporally coupled:
    ``tau = temporal_update(tau_prev, delta, tau_tilde)`` where the increment
    ``tau_tilde`` is generated from the excitations under ``hyper``.
    """
    if not delta > 0:
        raise ContractError(f"time step must be positive, got {delta}")
    obj = _TruthObjective(tr, delta, hyper, l_grid, sigma0, n_max, threshold, tau_prev)
    x = np.zeros(2 * obj.L) if xi0 is None else np.asarray(xi0, dtype=float).ravel().copy()
    used = 0
    f0 = None
    while True:
        obj.set_reference(x)
        budget = max_iter - used
        if rebase_every:
            budget = min(budget, rebase_every)
        res: OptimizeResult = lbfgs(obj, x, precond=obj.precondition, gtol=gtol, max_iter=budget,
                                    memory=memory, ftol=ftol)
        f0 = res.f0 if f0 is None else f0
        used += res.iterations
        x = res.x
        if res.converged or used >= max_iter or res.iterations == 0:
            break
        if res.message != "maximum iterations reached" and res.decrease <= 0:
            break
    spec = obj.spectrum(x)
    return TruthSpectrumFit(spec, x.reshape(obj.L, 2), res.fun, used, res.grad_norm,
                            res.converged, res.message)
