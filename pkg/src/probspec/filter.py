"""Per-step Bayesian filtering: MAP over the next state and, optionally, the spectrum.

One filtering step maximises

    p(udot^(0) = g(u) | u, prev) * p(u | prev) [* p(xi)]

over ``u`` (the field modes and their spatial derivatives) and, in adaptive
mode, the standard-normal excitations ``xi`` that drive the spectrum
increment ``tau^i = tau^{i-1} + delta * tau_tilde(xi)``.  The auxiliary
state ``v`` is then drawn from its Gaussian conditional.

Optimisation runs in whitened real coordinates ``u = m + S z`` where
``S S^H = (delta^3/3) D_ref`` per mode, so the prior term is ``|z|^2 / 2``;
a per-mode Gauss-Newton block of the linearised likelihood serves as the
initial inverse Hessian of L-BFGS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, CoverageError, DimensionError, NumericalError
from .grid import SpatialGrid, analyze, derivative_factors, half_weights, synthesize
from .optim import OptimizeResult, lbfgs
from .pde import PdeModel, g_eval, g_jvp, g_vjp
from .prior import GaussianBlock, SimState, block_condition
from .spectrum import (FactoredCovariance, LogSpectrum, SpectrumHyper, excitation_map,
                       geometry_for, sigma_sq_at)

__all__ = [
    "StepOptions",
    "StepProblem",
    "StepResult",
    "LinearStepPosterior",
    "EmpiricalBayesPosterior",
    "GaussianProfile",
    "step_nll",
    "solve_step_fixed",
    "solve_step_adaptive",
    "linear_step_closed_form",
    "empirical_bayes_posterior",
    "initial_state_from_profile",
    "conditional_v_batch",
    "stream",
    "total_power",
    "run_simulation",
    "StepFailure",
]

_SQRT2 = math.sqrt(2.0)

# named random streams
PURPOSES = {"v": 1, "samples": 2, "synthetic": 3}


def stream(seed: int, step: int, purpose: str) -> np.random.Generator:
    """Counter-based generator for one ``(seed, step, purpose)`` triple."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(step), PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(ss))


class StepFailure(NumericalError):
    """A filtering step did not meet its convergence contract."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class StepOptions:
    """Solver settings for one filtering step.

    ``increment`` is the log-frequency IWP prior on the spectrum increment
    ``tau_tilde`` (adaptive mode only); ``threshold`` is the relative ridge
    added to the diagonal of every mode covariance; ``max_step`` caps the
    infinity norm of adaptive-mode trial steps in whitened coordinates.
    """

    gtol: float = 1e-9
    max_iter: int = 500
    memory: int = 20
    ftol: float = 1e-13
    threshold: float = 1e-12
    n_max: int = 100
    v_mode: str = "sample"
    increment: SpectrumHyper = field(default_factory=lambda: SpectrumHyper(
        sigma_tau=1.0, offset=0.0, slope=0.0))
    precondition: bool = True
    warn_coverage: bool = True
    rebase_every: int = 50
    max_step: float | None = 20.0

    def __post_init__(self):
        if self.v_mode not in ("sample", "mean"):
            raise ContractError(f"v_mode must be 'sample' or 'mean', got {self.v_mode!r}")
        if not self.gtol > 0 or self.max_iter < 0 or self.threshold < 0:
            raise ContractError("invalid solver tolerances")


# -- small batched linear algebra ---------------------------------------------

def _matvec(A, x):
    return np.einsum("kij,kj->ki", A, x)


def _rmatvec_h(A, x):
    """``A^H x`` per mode."""
    return np.einsum("kji,kj->ki", np.conj(A), x)


def total_power(spec: LogSpectrum, K: int) -> float:
    """``sum_{k=1}^{K/2} |sigma(k)|^2`` over the resolved modes."""
    return float(np.sum(sigma_sq_at(np.arange(1, K // 2 + 1), spec)))


# -- the step objective --------------------------------------------------------

class StepProblem:
    """Negative log posterior of one filtering step and its whitened parametrisation.

    Parameters
    ----------
    prev : SimState
        Previous state ``(u, v, tau)``.
    pde : PdeModel
    delta : float
        Time step.
    opts : StepOptions
    spectrum : LogSpectrum, optional
        Spectrum for fixed mode; defaults to ``prev.spectrum``.
    adaptive : bool
        Optimise the spectrum increment jointly with ``u``.
    """

    def __init__(self, prev: SimState, pde: PdeModel, delta: float, opts: StepOptions,
                 spectrum: LogSpectrum | None = None, adaptive: bool = False):
        if not delta > 0:
            raise ContractError(f"time step must be positive, got {delta}")
        if pde.order != prev.order:
            raise DimensionError(f"state order {prev.order} does not match pde order {pde.order}")
        K, o = prev.K, prev.order
        self.prev, self.pde, self.delta, self.opts = prev, pde, float(delta), opts
        self.adaptive = adaptive
        self.K, self.o, self.nh = K, o, K // 2 + 1
        self.w = half_weights(K)
        self.real_rows = np.zeros(self.nh, dtype=bool)
        self.real_rows[[0, -1]] = True
        self.c3 = delta ** 3 / 3
        self.cq = delta / 4
        self.gain = 1.5 / delta
        self.g_prev = g_eval(prev.u, pde, K)
        self.udot_prev = np.concatenate([self.g_prev[:, None], prev.v], axis=1)
        self.mean = prev.u + delta * self.udot_prev
        base = spectrum if spectrum is not None else prev.spectrum
        if adaptive and spectrum is not None:
            raise ContractError("adaptive mode starts from the previous state's spectrum")
        self.geom = geometry_for(base, opts.n_max, K)
        if adaptive:
            self.emap = excitation_map(opts.increment, base.l_grid)
            self.tau_prev = base.tau.copy()
            ref = base.with_tau(self.tau_prev + delta * self.emap.base)
        else:
            ref = base
        self.n_u = (o + 1) * K
        self.n_xi = 2 * base.L if adaptive else 0
        self.L = base.L
        fac = self.covariance(ref, warn=opts.warn_coverage)
        if not adaptive:
            self.fac_fixed = fac
        self.set_reference(ref, self.mean, fac)

    def set_reference(self, spec: LogSpectrum, u_lin: np.ndarray, fac: FactoredCovariance | None = None):
        """Whitening and preconditioning around spectrum ``spec`` and linearisation point ``u_lin``.

        Changing the reference changes the ``u`` coordinates (not the ``xi``
        coordinates); callers must map their iterate through ``x_from_u``.
        """
        self.ref_spec = spec
        self.fac_ref = fac if fac is not None else self.covariance(spec)
        self.D_ref = self._dense(self.fac_ref)
        self.S = math.sqrt(self.c3) * self.fac_ref.L
        self.V_ref = self.cq * self.fac_ref.diag[:, 0]
        self._pre = None
        self._pre_xi = None
        if self.opts.precondition:
            self._pre = self._gn_factor(u_lin, self.S, self.V_ref)
            if self.adaptive:
                self._pre_xi = self._xi_precond()

    def _xi_precond(self):
        """Cholesky factor of ``I + delta^2 B^T F B`` with ``F`` the Fisher information of ``tau``."""
        fac = self.fac_ref
        F = fac.fisher_nodes(self.w)
        # Fisher information of the likelihood variance V = delta/4 D_00
        for k in range(self.nh):
            act = fac.active[k]
            y = fac.node_matrix(k)[act].T @ (2.0 * fac.s2[k, act] / fac.diag[k, 0])
            F += 0.25 * self.w[k] * np.outer(y, y)
        Bm = self.emap.matrix
        H = np.eye(self.n_xi) + self.delta ** 2 * (Bm.T @ F @ Bm)
        return cho_factor(H, lower=True)

    # covariance at a given spectrum, regularised and factored
    def covariance(self, spec: LogSpectrum, warn: bool = False) -> FactoredCovariance:
        if warn:
            self.geom.moments(spec, self.o, warn=True)
        return FactoredCovariance(self.geom, spec, self.o, self.opts.threshold)

    def _dense(self, fac: FactoredCovariance) -> np.ndarray:
        D = fac.cov()
        D[self.real_rows] = D[self.real_rows].real
        return D

    # -- coordinates --------------------------------------------------------
    @property
    def size(self) -> int:
        return self.n_u + self.n_xi

    def z_from_x(self, x: np.ndarray) -> np.ndarray:
        """Whitened complex modes from real coordinates; leading axes of ``x`` are batch axes."""
        o1, nh = self.o + 1, self.nh
        xu = x[..., :self.n_u]
        z = np.empty(xu.shape[:-1] + (nh, o1), dtype=complex)
        z[..., 0, :] = xu[..., :o1]
        inner = xu[..., o1:o1 + 2 * o1 * (nh - 2)].reshape(xu.shape[:-1] + (nh - 2, 2, o1))
        z[..., 1:-1, :] = (inner[..., 0, :] + 1j * inner[..., 1, :]) / _SQRT2
        z[..., -1, :] = xu[..., self.n_u - o1:]
        return z

    def u_from_x(self, x: np.ndarray) -> np.ndarray:
        return self.mean + _matvec(self.S, self.z_from_x(x))

    def x_from_u(self, u: np.ndarray, xi: np.ndarray | None = None) -> np.ndarray:
        z = np.linalg.solve(self.S, (np.asarray(u) - self.mean)[..., None])[..., 0]
        o1 = self.o + 1
        parts = [z[0].real]
        inner = np.stack([z[1:-1].real, z[1:-1].imag], axis=1) * _SQRT2
        parts.append(inner.ravel())
        parts.append(z[-1].real)
        if self.adaptive:
            parts.append(np.zeros(self.n_xi) if xi is None else np.asarray(xi, float).ravel())
        return np.concatenate(parts)

    def grad_x_from_u(self, G: np.ndarray) -> np.ndarray:
        return self._pack(_rmatvec_h(self.S, G))

    def _pack(self, h: np.ndarray) -> np.ndarray:
        inner = np.stack([h[1:-1].real, h[1:-1].imag], axis=1) / _SQRT2
        return np.concatenate([h[0].real, inner.ravel(), h[-1].real])

    # -- objective in u coordinates ----------------------------------------
    def nll_u(self, u: np.ndarray, xi: np.ndarray | None = None, strict: bool = True):
        """Objective value with gradients ``(dF/du, dF/dxi)``.

        ``dF/du`` uses the ``d/dRe + i d/dIm`` convention per half-spectrum entry.
        """
        F, Gu, gxi, _ = self._evaluate(np.asarray(u, dtype=complex), xi, None, strict)
        return F, Gu, gxi

    def _evaluate(self, u, xi, z, strict):
        """Shared evaluation.  With whitened ``z`` given, the prior gradient is
        returned separately in whitened form and left out of ``Gu``."""
        w, o1 = self.w, self.o + 1
        fail = (np.inf, None, None, None)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.adaptive:
                xi = np.zeros((self.L, 2)) if xi is None else np.asarray(xi, float).reshape(self.L, 2)
                tau = self.tau_prev + self.delta * self.emap(xi)
                if not np.all(np.isfinite(tau)):
                    return self._fail(strict, "non-finite tau", tau=tau) or fail
                try:
                    fac = self.covariance(self.ref_spec.with_tau(tau))
                except (CoverageError, NumericalError, np.linalg.LinAlgError):
                    if strict:
                        raise
                    return fail
                piv = np.real(np.diagonal(fac.L, axis1=-2, axis2=-1))
                if not np.all(np.isfinite(fac.L)) or not np.all(piv > 0):
                    return self._fail(strict, "singular mode covariance", L=np.where(piv > 0, piv, np.nan),
                                      tau=tau) or fail
            else:
                fac = self.fac_fixed
            Li = fac.inv / math.sqrt(self.c3)
            r = u - self.mean
            if z is None:
                y = _matvec(Li, r)
            elif self.adaptive:
                W = Li @ self.S
                y = _matvec(W, z)
            else:
                y = z
            beta = _rmatvec_h(Li, y)
            quad = np.sum(np.abs(y) ** 2, axis=1)
            g = g_eval(u, self.pde, self.K)
            e = g - self.g_prev - self.gain * r[:, 0]
            V = self.cq * fac.diag[:, 0]
            per_mode = quad + np.abs(e) ** 2 / V
            if self.adaptive:
                logdetP = o1 * math.log(self.c3) + fac.logdet
                per_mode = per_mode + logdetP + np.log(V)
            F = 0.5 * float(np.sum(w * per_mode))
            if self.adaptive:
                F += 0.5 * float(np.sum(xi ** 2))
            if not np.isfinite(F):
                return self._fail(strict, "non-finite objective", per_mode=per_mode) or fail
            Ge = w * e / V
            Gu = g_vjp(u, Ge, self.pde, self.K)
            Gu[:, 0] -= self.gain * Ge
            hz = None
            if z is None:
                Gu += w[:, None] * beta
            elif self.adaptive:
                hz = w[:, None] * _rmatvec_h(W, y)
            else:
                hz = w[:, None] * y
            gxi = None
            if self.adaptive:
                # log det P + r^H P^{-1} r with P = c3 D, plus log V + |e|^2/V with V = cq D_00
                gtau = fac.tau_gradient(w, 1.0, [math.sqrt(self.c3) * y], [1.0 / self.c3])
                dv = (1 + self.opts.threshold) * self.cq * fac.s2 * (1.0 / V - np.abs(e) ** 2 / V ** 2)[:, None]
                gtau += fac.to_nodes(w[:, None] * dv)
                gxi = self.delta * self.emap.adjoint(gtau) + xi
                if not np.all(np.isfinite(gxi)):
                    return self._fail(strict, "non-finite spectrum gradient", gtau=gtau) or fail
        return F, Gu, gxi, hz

    def _fail(self, strict, what, **arrays):
        if not strict:
            return None
        detail = []
        for name, arr in arrays.items():
            bad = np.argwhere(~np.isfinite(np.asarray(arr)))
            if bad.size:
                loc = "tau node" if name in ("tau", "gtau") else "mode k"
                detail.append(f"{name}: first offending {loc}={int(bad[0][0])}")
        raise NumericalError(f"{what} ({'; '.join(detail) or 'no location found'})")

    def __call__(self, x: np.ndarray):
        z = self.z_from_x(x)
        u = self.mean + _matvec(self.S, z)
        xi = x[self.n_u:] if self.adaptive else None
        F, Gu, gxi, hz = self._evaluate(u, xi, z, strict=False)
        if Gu is None:
            return np.inf, np.zeros_like(x)
        gx = self._pack(_rmatvec_h(self.S, Gu) + hz)
        if self.adaptive:
            gx = np.concatenate([gx, gxi.ravel()])
        return F, gx

    # -- preconditioner ----------------------------------------------------
    def _directions(self, S: np.ndarray) -> np.ndarray:
        """``du/dx`` for every whitened ``u`` coordinate, shape ``(n_u, K/2+1, o+1)``."""
        return np.einsum("kij,nkj->nki", S, self.z_from_x(np.eye(self.n_u)))

    def residual_jacobian(self, u_lin: np.ndarray, S: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Real Jacobian ``(K, n_u)`` of the scaled likelihood residuals ``sqrt(w/V) e``.

        Interior modes contribute their real and imaginary parts, each scaled so
        that the squared residuals sum to ``sum_k w_k |e_k|^2 / V_k``.
        """
        dU = self._directions(S)
        de = g_jvp(u_lin, dU, self.pde, self.K) - self.gain * dU[:, :, 0]
        sc = np.sqrt(self.w / V)
        de = de * sc[None, :]
        inner = np.stack([de[:, 1:-1].real, de[:, 1:-1].imag], axis=2) / _SQRT2
        rows = np.concatenate([de[:, :1].real, inner.reshape(self.n_u, -1), de[:, -1:].real], axis=1)
        return rows.T

    def gauss_newton_hessian(self, u_lin: np.ndarray, S: np.ndarray, V: np.ndarray) -> np.ndarray:
        """``I + J^T J`` in whitened ``u`` coordinates, linearised at ``u_lin``."""
        J = self.residual_jacobian(u_lin, S, V)
        return np.eye(self.n_u) + J.T @ J

    def mode_blocks(self, S: np.ndarray, V: np.ndarray):
        """Per-mode blocks of ``I + J^T J`` for a linear pde, whose Jacobian is mode-diagonal.

        Returns ``(H_real, H_inner)`` of shapes ``(2, o+1, o+1)`` (modes ``0``,
        ``K/2``) and ``(K/2-1, 2(o+1), 2(o+1))`` (interior, real/imag parts).
        """
        o1 = self.o + 1
        h = np.asarray(self.pde.linear_coeffs, dtype=float).copy()
        h[0] -= self.gain
        q = np.einsum("c,kcj->kj", h, S)
        qr = q[[0, -1]].real
        H_real = np.eye(o1)[None] + qr[:, :, None] * qr[:, None, :] / V[[0, -1], None, None]
        qi = q[1:-1]
        u1 = np.concatenate([qi.real, -qi.imag], axis=1)
        u2 = np.concatenate([qi.imag, qi.real], axis=1)
        Vi = V[1:-1, None, None]
        H_inner = (np.eye(2 * o1)[None]
                   + (u1[:, :, None] * u1[:, None, :] + u2[:, :, None] * u2[:, None, :]) / Vi)
        return H_real, H_inner

    def _gn_factor(self, u_lin, S, V):
        if self.pde.is_linear:
            H_real, H_inner = self.mode_blocks(S, V)
            return ("blocks", np.linalg.inv(H_real), np.linalg.inv(H_inner))
        H = self.gauss_newton_hessian(u_lin, S, V)
        if not np.all(np.isfinite(H)):
            raise NumericalError("Gauss-Newton Hessian is not finite")
        try:
            return ("dense", cho_factor(H, lower=True))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Gauss-Newton Hessian not positive definite: {exc}") from None

    def _gn_solve(self, pre, gx: np.ndarray) -> np.ndarray:
        """Apply the inverse Gauss-Newton Hessian to ``gx`` of shape ``(n_u,)`` or ``(n_u, m)``."""
        if pre[0] == "dense":
            return cho_solve(pre[1], gx)
        _, Ar, Ai = pre
        o1, nh = self.o + 1, self.nh
        end = o1 + 2 * o1 * (nh - 2)
        out = np.empty_like(gx)
        out[:o1] = np.tensordot(Ar[0], gx[:o1], axes=1)
        inner = gx[o1:end].reshape((nh - 2, 2 * o1) + gx.shape[1:])
        out[o1:end] = np.einsum("kij,kj...->ki...", Ai, inner).reshape(out[o1:end].shape)
        out[end:] = np.tensordot(Ar[1], gx[end:], axes=1)
        return out

    def precondition(self, gx: np.ndarray) -> np.ndarray:
        if self._pre is None:
            return gx
        out = gx.copy()
        out[:self.n_u] = self._gn_solve(self._pre, gx[:self.n_u])
        if self._pre_xi is not None:
            out[self.n_u:] = cho_solve(self._pre_xi, gx[self.n_u:])
        return out

    def field_variance(self, u: np.ndarray, fac: FactoredCovariance) -> np.ndarray:
        """Per-mode ``E|u^(0)_k - mean|^2`` of the linearised (Gauss-Newton) posterior."""
        S = math.sqrt(self.c3) * fac.L
        V = self.cq * fac.diag[:, 0]
        pre = self._gn_factor(u, S, V)
        if pre[0] == "blocks":
            _, Cr, Ci = pre
            out = np.empty(self.nh)
            for j, k in enumerate((0, self.nh - 1)):
                sk = S[k, 0].real
                out[k] = sk @ Cr[j] @ sk
            sk = S[1:-1, 0]
            A = np.concatenate([
                np.concatenate([sk.real, -sk.imag], axis=1)[:, None, :],
                np.concatenate([sk.imag, sk.real], axis=1)[:, None, :]], axis=1)
            out[1:-1] = 0.5 * np.einsum("kai,kij,kaj->k", A, Ci, A)
            return out
        A = self._directions(S)[:, :, 0].T  # (nh, n_u)
        Ar, Ai = A.real, A.imag
        return (np.einsum("kn,nk->k", Ar, self._gn_solve(pre, Ar.T))
                + np.einsum("kn,nk->k", Ai, self._gn_solve(pre, Ai.T)))


def conditional_v_batch(udot_prev: np.ndarray, u: np.ndarray, pred_mean: np.ndarray,
                        g_new: np.ndarray, delta: float, D: np.ndarray):
    """Mean and covariance of ``v`` for all modes.

    ``udot | u`` is Gaussian with mean ``udot_prev + 3/(2 delta)(u - pred_mean)``
    and covariance ``Q = delta/4 D``; condition on ``udot^(0) = g_new``.
    """
    Q = delta / 4 * D
    a = udot_prev + 1.5 / delta * (u - pred_mean)
    q00 = np.real(Q[:, 0, 0])
    safe = np.where(q00 > 0, q00, 1.0)
    kgain = np.where(q00[:, None] > 0, Q[:, 1:, 0] / safe[:, None], 0.0)
    mean = a[:, 1:] + kgain * (g_new - a[:, 0])[:, None]
    cov = Q[:, 1:, 1:] - kgain[:, :, None] * Q[:, None, 0, 1:]
    cov = 0.5 * (cov + np.conj(np.swapaxes(cov, -1, -2)))
    return mean, cov


def _sample_v(mean, cov, rng, real_rows):
    nh, o = mean.shape
    v = mean.copy()
    for k in range(nh):
        C = cov[k].real if real_rows[k] else cov[k]
        lam, U = np.linalg.eigh(C)
        F = U * np.sqrt(np.clip(lam, 0.0, None))[None, :]
        if real_rows[k]:
            r = rng.standard_normal(o)
            v[k] = mean[k].real + F.real @ r
        else:
            r = (rng.standard_normal(o) + 1j * rng.standard_normal(o)) / _SQRT2
            v[k] = mean[k] + F @ r
    v[real_rows] = v[real_rows].real
    return v


@dataclass
class StepResult:
    """Outcome of one filtering step.

    ``mode_std`` holds per-mode standard deviations of the field modes under
    the linearised posterior; ``field_std`` is the implied pointwise standard
    deviation of the field.
    """

    state: SimState
    step: int
    tau: np.ndarray | None
    mode_std: np.ndarray
    field_std: float
    iterations: int
    evaluations: int
    grad_norm: float
    objective: float
    decrease: float
    converged: bool
    message: str
    seed: int
    v_mean: np.ndarray | None = None

    @property
    def u(self) -> np.ndarray:
        return self.state.u

    @property
    def v(self) -> np.ndarray:
        return self.state.v


def step_nll(prev: SimState, pde: PdeModel, delta: float, u, xi=None,
             opts: StepOptions | None = None, spectrum: LogSpectrum | None = None):
    """Step objective and gradients at ``(u, xi)``; adaptive when ``xi`` is given.

    Returns ``(value, dF/du, dF/dxi)`` with ``dF/dxi`` ``None`` in fixed mode.
    """
    opts = opts or StepOptions()
    prob = StepProblem(prev, pde, delta, opts, spectrum=spectrum, adaptive=xi is not None)
    return prob.nll_u(u, xi, strict=True)


def _solve(prob: StepProblem, step: int, seed: int, rng=None) -> StepResult:
    opts = prob.opts
    x = np.zeros(prob.size)
    f0 = None
    used = nfev = 0
    while True:
        # re-linearise (and in adaptive mode re-whiten) every `rebase_every` iterations
        budget = opts.max_iter - used
        if opts.rebase_every:
            budget = min(budget, opts.rebase_every)
        res: OptimizeResult = lbfgs(prob, x, precond=prob.precondition if opts.precondition else None,
                                    gtol=opts.gtol, max_iter=budget, memory=opts.memory,
                                    ftol=opts.ftol,
                                    max_step=opts.max_step if prob.adaptive else None)
        f0 = res.f0 if f0 is None else f0
        used += res.iterations
        nfev += res.evaluations
        if res.converged or used >= opts.max_iter or res.iterations == 0:
            break
        if res.message != "maximum iterations reached" and res.decrease <= 0:
            break
        u_c = prob.u_from_x(res.x)
        saved = (prob.ref_spec, prob.fac_ref, prob.D_ref, prob.S, prob.V_ref, prob._pre, prob._pre_xi)
        try:
            if prob.adaptive:
                xi_c = res.x[prob.n_u:]
                prob.set_reference(prob.ref_spec.with_tau(prob.tau_prev + prob.delta * prob.emap(
                    xi_c.reshape(prob.L, 2))), u_c)
                x = prob.x_from_u(u_c, xi_c)
            else:
                prob.set_reference(prob.ref_spec, u_c, prob.fac_fixed)
                x = res.x
        except (NumericalError, CoverageError, np.linalg.LinAlgError) as exc:
            # keep the last iterate in the coordinates it was found in
            (prob.ref_spec, prob.fac_ref, prob.D_ref, prob.S, prob.V_ref,
             prob._pre, prob._pre_xi) = saved
            res.message = f"re-linearisation failed: {exc}"
            break
    res = OptimizeResult(res.x, res.fun, res.grad, used, nfev, res.converged, res.message, f0)
    u = prob.u_from_x(res.x)
    u[prob.real_rows] = u[prob.real_rows].real
    if prob.adaptive:
        xi = res.x[prob.n_u:].reshape(prob.L, 2)
        tau = prob.tau_prev + prob.delta * prob.emap(xi)
        spec = prob.ref_spec.with_tau(tau)
        fac = prob.covariance(spec, warn=opts.warn_coverage)
    else:
        tau, spec, fac = None, prob.ref_spec, prob.fac_ref
    D = prob._dense(fac)
    g_new = g_eval(u, prob.pde, prob.K)
    vmean, vcov = conditional_v_batch(prob.udot_prev, u, prob.mean, g_new, prob.delta, D)
    if opts.v_mode == "mean":
        v = vmean.copy()
        v[prob.real_rows] = v[prob.real_rows].real
    else:
        rng = rng if rng is not None else stream(seed, step, "v")
        v = _sample_v(vmean, vcov, rng, prob.real_rows)
    try:
        var = prob.field_variance(u, fac)
    except NumericalError:
        # a diverged iterate can leave the linearised posterior undefined
        var = np.full(prob.nh, np.nan)
    state = SimState(prob.prev.time + prob.delta, u, v, spec,
                     lineage=f"{seed}:{step}")
    return StepResult(state=state, step=step, tau=None if tau is None else tau.copy(),
                      mode_std=np.sqrt(np.clip(var, 0.0, None)),
                      field_std=float(np.sqrt(np.sum(prob.w * np.clip(var, 0.0, None)))),
                      iterations=res.iterations, evaluations=res.evaluations,
                      grad_norm=res.grad_norm, objective=res.fun, decrease=res.decrease,
                      converged=res.converged, message=res.message, seed=int(seed), v_mean=vmean)


def solve_step_fixed(prev: SimState, pde: PdeModel, delta: float, opts: StepOptions | None = None,
                     *, spectrum: LogSpectrum | None = None, step: int = 1, seed: int = 0,
                     rng: np.random.Generator | None = None) -> StepResult:
    """MAP step with a fixed spectrum (``prev.spectrum`` unless ``spectrum`` is given)."""
    opts = opts or StepOptions()
    return _solve(StepProblem(prev, pde, delta, opts, spectrum=spectrum, adaptive=False),
                  step, seed, rng)


def solve_step_adaptive(prev: SimState, pde: PdeModel, delta: float, opts: StepOptions | None = None,
                        *, step: int = 1, seed: int = 0,
                        rng: np.random.Generator | None = None) -> StepResult:
    """Joint MAP over the next state and the spectrum increment."""
    opts = opts or StepOptions()
    return _solve(StepProblem(prev, pde, delta, opts, adaptive=True), step, seed, rng)


# -- closed form for linear PDEs -----------------------------------------------

@dataclass
class LinearStepPosterior:
    """Per-mode Gaussian posterior of ``u^i`` and the exact log evidence."""

    mean: np.ndarray
    cov: np.ndarray
    log_evidence: float
    spectrum: LogSpectrum

    def block(self, k: int) -> GaussianBlock:
        return GaussianBlock(self.mean[k], self.cov[k])


def linear_step_closed_form(prev: SimState, pde: PdeModel, delta: float,
                            opts: StepOptions | None = None,
                            spectrum: LogSpectrum | None = None) -> LinearStepPosterior:
    """Exact Gaussian step for a PDE ``f = sum_c a_c s^(c)``.

    The constraint ``udot^(0) = sum_c a_c u_c`` is imposed per mode by
    conditioning the joint of ``u`` and ``z = udot^(0) - a.u`` on ``z = 0``.
    """
    if not pde.is_linear:
        raise ContractError(f"closed form requires a linear pde, got '{pde.name}'")
    opts = opts or StepOptions()
    prob = StepProblem(prev, pde, delta, replace(opts, precondition=False), spectrum=spectrum)
    a = np.asarray(pde.linear_coeffs, dtype=float)
    o1 = prob.o + 1
    P = prob.c3 * prob.D_ref
    V = prob.V_ref
    h = -a.copy()
    h[0] += prob.gain
    mean = np.empty((prob.nh, o1), dtype=complex)
    cov = np.empty((prob.nh, o1, o1), dtype=complex)
    logev = 0.0
    for k in range(prob.nh):
        Pk = P[k].real if prob.real_rows[k] else P[k]
        m = prob.mean[k]
        Ph = Pk @ h
        vz = float(np.real(h @ Ph)) + V[k]
        ez = prob.g_prev[k] - a @ m
        jm = np.concatenate([m, [ez]])
        jc = np.zeros((o1 + 1, o1 + 1), dtype=complex)
        jc[:o1, :o1] = Pk
        jc[:o1, o1] = Ph
        jc[o1, :o1] = np.conj(Ph)
        jc[o1, o1] = vz
        post = block_condition(GaussianBlock(jm, jc), [o1], [0.0]).marginal(np.arange(o1))
        mean[k], cov[k] = post.mean, post.cov
        if prob.real_rows[k]:
            logev += -0.5 * ez.real ** 2 / vz - 0.5 * math.log(2 * math.pi * vz)
        else:
            logev += -abs(ez) ** 2 / vz - math.log(math.pi * vz)
    mean[prob.real_rows] = mean[prob.real_rows].real
    return LinearStepPosterior(mean, cov, float(logev), prob.ref_spec)


@dataclass
class EmpiricalBayesPosterior:
    mean_field: np.ndarray
    std_field: np.ndarray
    samples: np.ndarray
    modes: LinearStepPosterior


def empirical_bayes_posterior(prev: SimState, pde: PdeModel, delta: float, tau_star,
                              n_samples: int = 0, rng: np.random.Generator | None = None,
                              opts: StepOptions | None = None) -> EmpiricalBayesPosterior:
    """Grid-space posterior of the field with the spectrum fixed at ``tau_star``."""
    spec = prev.spectrum.with_tau(np.asarray(tau_star, dtype=float))
    post = linear_step_closed_form(prev, pde, delta, opts, spectrum=spec)
    K = prev.K
    nh = K // 2 + 1
    x = np.arange(K) / K
    mean_field = synthesize(post.mean[:, 0], K)
    # real-linear map from (Re, Im) of every half mode to the grid
    k = np.arange(nh)
    ph = 2 * np.pi * np.outer(x, k)
    w = half_weights(K)
    Ar = w[None, :] * np.cos(ph)
    Ai = -w[None, :] * np.sin(ph)
    c00 = np.real(post.cov[:, 0, 0])
    var_re = np.where(np.isin(k, [0, nh - 1]), c00, 0.5 * c00)
    var_im = np.where(np.isin(k, [0, nh - 1]), 0.0, 0.5 * c00)
    var = Ar ** 2 @ var_re + Ai ** 2 @ var_im
    std = np.sqrt(np.clip(var, 0.0, None))
    samples = np.empty((n_samples, K))
    if n_samples:
        rng = rng if rng is not None else np.random.default_rng(0)
        sd = np.sqrt(np.clip(c00, 0.0, None))
        for j in range(n_samples):
            zr = rng.standard_normal(nh)
            zi = rng.standard_normal(nh)
            noise = np.where(np.isin(k, [0, nh - 1]), sd * zr, sd * (zr + 1j * zi) / _SQRT2)
            samples[j] = synthesize(post.mean[:, 0] + noise, K)
    return EmpiricalBayesPosterior(mean_field, std, samples, post)


# -- initial state ---------------------------------------------------------------

@dataclass(frozen=True)
class GaussianProfile:
    amplitude: float = 1.0
    width: float = 0.05
    center: float = 0.5

    def __post_init__(self):
        if not self.width > 0:
            raise ContractError(f"profile width must be positive, got {self.width}")

    def derivatives(self, x: np.ndarray, order: int) -> np.ndarray:
        """Periodised profile and its analytic derivatives, shape ``(order+1, len(x))``."""
        from numpy.polynomial.hermite_e import hermeval

        A, w, x0 = self.amplitude, self.width, self.center
        x = np.asarray(x, dtype=float)
        out = np.zeros((order + 1, x.size))
        if order * math.log(1.0 / w) > math.log(np.finfo(float).max):
            raise ContractError(f"profile width {w} too small: derivatives overflow")
        m = 0
        while True:
            shifts = [0] if m == 0 else [m, -m]
            sup = 0.0
            for sh in shifts:
                t = (x - x0 - sh) / w
                base = np.exp(-0.5 * t ** 2)
                # closest approach of this image to the unit interval
                lo = min(abs(0 - x0 - sh), abs(1 - x0 - sh))
                if 0 <= x0 + sh <= 1:
                    lo = 0.0
                sup = max(sup, math.exp(-0.5 * (lo / w) ** 2))
                for c in range(order + 1):
                    coef = np.zeros(c + 1)
                    coef[c] = 1.0
                    out[c] += A * (-1.0 / w) ** c * hermeval(t, coef) * base
            if m > 0 and sup < 1e-16:
                break
            m += 1
            if m > 10_000:
                raise ContractError("periodised profile sum did not converge")
        if not np.all(np.isfinite(out)):
            raise ContractError(f"profile width {w} too small: derivatives overflow")
        return out


def initial_state_from_profile(profile: GaussianProfile, tau0: LogSpectrum, grid: SpatialGrid | int,
                               order: int, pde: PdeModel | None = None) -> SimState:
    """State at ``t = 0`` from an analytic profile.

    ``v`` holds the time derivatives of the spatial derivatives, obtained by
    differentiating the PDE right-hand side spectrally; without a PDE it is 0.
    """
    grid = grid if isinstance(grid, SpatialGrid) else SpatialGrid(int(grid))
    K = grid.K
    vals = profile.derivatives(grid.x, order)
    u = analyze(vals.T, K)
    u[[0, -1]] = u[[0, -1]].real
    v = np.zeros((K // 2 + 1, order), dtype=complex)
    if pde is not None:
        if pde.order != order:
            raise DimensionError(f"pde order {pde.order} does not match state order {order}")
        g = g_eval(u, pde, K)
        for c in range(1, order + 1):
            v[:, c - 1] = derivative_factors(K, c) * g
        v[[0, -1]] = v[[0, -1]].real
    return SimState(0.0, u, v, tau0, lineage="init")


# -- trajectory driver -----------------------------------------------------------

def run_simulation(initial: SimState, pde: PdeModel, deltas: Sequence[float], *,
                   mode: str = "fixed", opts: StepOptions | None = None, seed: int = 0,
                   spectra: Callable[[int, SimState], LogSpectrum] | None = None,
                   on_step: Callable[[StepResult], None] | None = None,
                   policy: str = "abort", propagate: str = "mean") -> list[StepResult]:
    """Run ``len(deltas)`` filtering steps, chaining each full state into the next.

    Parameters
    ----------
    mode : {'fixed', 'adaptive'}
    spectra : callable, optional
        ``spectra(step, prev)`` returns the spectrum for the transition into
        ``step`` (fixed mode only); defaults to the previous state's spectrum.
    on_step : callable, optional
        Called after each step, e.g. to persist it.
    policy : {'abort', 'continue'}
        What to do when a step misses its convergence contract.
    propagate : {'mean', 'sample'}
        Only 'mean' is supported for ``u``: the MAP is carried forward.
    """
    if mode not in ("fixed", "adaptive"):
        raise ContractError(f"unknown spectrum mode {mode!r}")
    if policy not in ("abort", "continue"):
        raise ContractError(f"unknown step policy {policy!r}")
    if propagate != "mean":
        raise ContractError("only MAP propagation of u is implemented")
    opts = opts or StepOptions()
    out: list[StepResult] = []
    state = initial
    for i, delta in enumerate(deltas, start=1):
        try:
            if mode == "fixed":
                spec = spectra(i, state) if spectra is not None else None
                res = solve_step_fixed(state, pde, delta, opts, spectrum=spec, step=i, seed=seed)
            else:
                res = solve_step_adaptive(state, pde, delta, opts, step=i, seed=seed)
        except StepFailure:
            raise
        except (NumericalError, CoverageError, np.linalg.LinAlgError) as exc:
            raise StepFailure(f"step {i} failed: {exc}") from exc
        out.append(res)
        if on_step is not None:
            on_step(res)
        if not res.converged and policy == "abort":
            raise StepFailure(f"step {i} did not converge: {res.message} "
                              f"(grad norm {res.grad_norm:.3e})", res)
        state = res.state
    return out
