"""Discrete space-time Markov prior for the Fourier-mode state.

Each half-spectrum mode ``k`` carries ``u_k`` (field and spatial derivatives,
``o + 1`` components) and ``v_k`` (time derivatives of the spatial derivatives
``c = 1..o``).  The time derivative of the field itself is never stored; it is
pinned to the PDE right-hand side ``g``.  Between steps the pair
``(u, udot)`` follows the integrated Wiener process transition

    mean = [[1, delta], [0, 1]] (x) I  applied to the previous pair
    cov  = [[delta^3/3, delta^2/2], [delta^2/2, delta]] (x) D^k

Interior modes are circularly-symmetric complex Gaussians with
``E[z z^H] = D``; modes ``0`` and ``K/2`` are real Gaussians with the same
covariance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericalError
from .spectrum import LogSpectrum

__all__ = [
    "ModeState",
    "SimState",
    "GaussianBlock",
    "TruncatedFactor",
    "Transition",
    "iwp_covariance",
    "transition_params",
    "block_condition",
    "predictive_u",
    "likelihood_params",
    "conditional_v",
    "eig_truncate",
    "mode_factors",
    "draw_excitations",
    "generative_step",
    "regularized",
]


@dataclass
class ModeState:
    """State of one Fourier mode: ``u`` (length o+1) and ``v`` (length o)."""

    u: np.ndarray
    v: np.ndarray

    def conj(self) -> "ModeState":
        return ModeState(np.conj(self.u), np.conj(self.v))


@dataclass
class SimState:
    """Full filter state ``(u, v, tau)`` on the half spectrum.

    ``u`` has shape ``(K/2+1, o+1)``, ``v`` has shape ``(K/2+1, o)``.
    """

    time: float
    u: np.ndarray
    v: np.ndarray
    spectrum: LogSpectrum
    lineage: str = "0"

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=complex)
        self.v = np.asarray(self.v, dtype=complex)
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise DimensionError("u and v must be 2-d (modes, components)")
        if self.v.shape != (self.u.shape[0], self.u.shape[1] - 1):
            raise DimensionError(f"v shape {self.v.shape} inconsistent with u shape {self.u.shape}")

    @property
    def K(self) -> int:
        return 2 * (self.u.shape[0] - 1)

    @property
    def order(self) -> int:
        return self.u.shape[1] - 1

    def mode(self, k: int) -> ModeState:
        K = self.K
        if not -K // 2 < k <= K // 2:
            raise DimensionError(f"mode {k} outside the range of K={K}")
        m = ModeState(self.u[abs(k)].copy(), self.v[abs(k)].copy())
        return m.conj() if k < 0 else m


@dataclass
class GaussianBlock:
    """Finite-dimensional Gaussian ``G(x - mean, cov)`` with optional component tags."""

    mean: np.ndarray
    cov: np.ndarray
    tags: tuple = ()

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.cov = np.asarray(self.cov)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise DimensionError(f"covariance shape {self.cov.shape} does not match mean length {n}")

    def marginal(self, idx) -> "GaussianBlock":
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        tags = tuple(self.tags[i] for i in idx) if self.tags else ()
        return GaussianBlock(self.mean[idx], self.cov[np.ix_(idx, idx)], tags)


@dataclass
class TruncatedFactor:
    """Eigen-factor ``U diag(lam) U^H`` keeping eigenvalues ``>= threshold * lam_max``."""

    U: np.ndarray
    lam: np.ndarray
    rank: int
    threshold: float

    @property
    def sqrt_factor(self) -> np.ndarray:
        """``U Lambda^{1/2}``, shape ``(n, rank)``."""
        return self.U * np.sqrt(self.lam)[None, :]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.lam[None, :]) @ np.conj(self.U.T)


def iwp_covariance(delta: float) -> np.ndarray:
    return np.array([[delta ** 3 / 3, delta ** 2 / 2], [delta ** 2 / 2, delta]])


@dataclass
class Transition:
    """IWP transition for one mode: ``x_i ~ G(x_i - drift x_{i-1}, cov)`` with ``x = (u, udot)``."""

    drift: np.ndarray
    cov: np.ndarray

    def apply(self, u_prev, udot_prev) -> GaussianBlock:
        u_prev, udot_prev = np.asarray(u_prev), np.asarray(udot_prev)
        n = u_prev.size
        tags = tuple(("u", c) for c in range(n)) + tuple(("udot", c) for c in range(n))
        # drift applied elementwise rather than as a matmul, so the means are exact
        delta = self.drift[0, n]
        mean = np.concatenate([u_prev + delta * udot_prev, udot_prev])
        return GaussianBlock(mean, self.cov, tags)


def transition_params(delta: float, D_k) -> Transition:
    if not delta > 0:
        raise ContractError(f"time step must be positive, got {delta}")
    D_k = np.atleast_2d(np.asarray(D_k))
    n = D_k.shape[0]
    drift = np.kron(np.array([[1.0, delta], [0.0, 1.0]]), np.eye(n))
    return Transition(drift, np.kron(iwp_covariance(delta), D_k))


def _pinv_hermitian(S: np.ndarray, rcond: float):
    lam, U = np.linalg.eigh(S)
    lam_max = max(float(lam.max(initial=0.0)), 0.0)
    keep = lam > rcond * lam_max if lam_max > 0 else np.zeros(lam.shape, dtype=bool)
    return U, lam, keep


def block_condition(joint: GaussianBlock, observed_idx, observed_values, rcond: float = 1e-12,
                    atol: float = 1e-8) -> GaussianBlock:
    """Condition a Gaussian on ``x[observed_idx] = observed_values``.

    Returns the Gaussian over all coordinates: observed ones are pinned (zero
    variance), the rest follow the Schur complement.  Near-singular observed
    blocks use an eigen pseudo-inverse with relative cutoff ``rcond``; if the
    observation has a component outside the support of the prior beyond
    ``atol`` (relative), a ``NumericalError`` is raised.
    """
    mean = np.asarray(joint.mean)
    cov = np.asarray(joint.cov)
    n = mean.shape[0]
    obs = np.atleast_1d(np.asarray(observed_idx, dtype=int))
    y = np.atleast_1d(np.asarray(observed_values))
    if obs.size != y.size:
        raise DimensionError("observed_idx and observed_values differ in length")
    if obs.size and (obs.min() < 0 or obs.max() >= n or np.unique(obs).size != obs.size):
        raise DimensionError("observed indices must be distinct and inside the joint")
    dtype = np.result_type(mean, cov, y, float)
    if obs.size == 0:
        return GaussianBlock(mean.astype(dtype), cov.astype(dtype), joint.tags)
    S = cov[np.ix_(obs, obs)]
    U, lam, keep = _pinv_hermitian(0.5 * (S + np.conj(S.T)), rcond)
    resid = y - mean[obs]
    proj = np.conj(U.T) @ resid
    scale = max(float(np.linalg.norm(resid)), float(np.linalg.norm(y)), 1e-300)
    if np.any(~keep) and np.linalg.norm(proj[~keep]) > atol * scale:
        raise NumericalError(
            "observation lies outside the support of the prior: "
            f"eigenvalues {lam[~keep]} carry residual {np.abs(proj[~keep])}"
        )
    inv_lam = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    C_xo = cov[:, obs]
    gain = (C_xo @ U) * inv_lam[None, :] @ np.conj(U.T)
    new_mean = (mean + gain @ resid).astype(dtype)
    new_cov = cov - gain @ np.conj(C_xo.T)
    new_cov = 0.5 * (new_cov + np.conj(new_cov.T))
    new_mean[obs] = y
    new_cov[obs, :] = 0
    new_cov[:, obs] = 0
    return GaussianBlock(new_mean, new_cov.astype(dtype), joint.tags)


def _prev_udot(g_prev_k, v_prev_k):
    return np.concatenate([[g_prev_k], np.atleast_1d(v_prev_k)])


def predictive_u(prev: ModeState, g_prev_k, delta: float, D_k) -> GaussianBlock:
    """Prior for ``u^i_k`` given the previous state with ``udot^(0) = g_prev``."""
    if not delta > 0:
        raise ContractError(f"time step must be positive, got {delta}")
    mean = np.asarray(prev.u) + delta * _prev_udot(g_prev_k, prev.v)
    return GaussianBlock(mean, delta ** 3 / 3 * np.asarray(D_k))


def likelihood_params(prev: ModeState, u_i_k, g_prev_k, delta: float, D_k):
    """Mean and variance of ``udot^(0),i_k`` given ``u^i_k`` and the previous state.

    The IWP gain ``(delta^2/2 D)(delta^3/3 D)^{-1} = 3/(2 delta)`` is the same
    for every component, so only the field component of ``u`` enters.
    """
    if not delta > 0:
        raise ContractError(f"time step must be positive, got {delta}")
    D00 = float(np.real(np.asarray(D_k)[0, 0]))
    u_i_k = np.asarray(u_i_k)
    mean = g_prev_k + 1.5 / delta * (u_i_k[0] - prev.u[0] - delta * g_prev_k)
    return mean, delta / 4 * D00


def conditional_v(prev: ModeState, u_i_k, g_i_k, g_prev_k, delta: float, D_k,
                  rcond: float = 1e-12) -> GaussianBlock:
    """Gaussian of ``v^i_k`` given ``u^i_k``, ``udot^(0),i_k = g_i_k`` and the previous state."""
    if not delta > 0:
        raise ContractError(f"time step must be positive, got {delta}")
    D_k = np.asarray(D_k)
    pred = predictive_u(prev, g_prev_k, delta, D_k)
    udot_prev = _prev_udot(g_prev_k, prev.v)
    mean = udot_prev + 1.5 / delta * (np.asarray(u_i_k) - pred.mean)
    joint = GaussianBlock(mean, delta / 4 * D_k)
    post = block_condition(joint, [0], [g_i_k], rcond=rcond, atol=np.inf)
    return post.marginal(np.arange(1, D_k.shape[0]))


def eig_truncate(D_k, threshold: float) -> TruncatedFactor:
    """Eigen-decomposition with eigenvalues below ``threshold * lam_max`` dropped."""
    if threshold < 0:
        raise ContractError("threshold must be non-negative")
    D_k = np.asarray(D_k)
    lam, U = np.linalg.eigh(0.5 * (D_k + np.conj(D_k.T)))
    lam = np.clip(lam[::-1], 0.0, None)
    U = U[:, ::-1]
    lam_max = lam[0] if lam.size else 0.0
    if lam_max <= 0:
        return TruncatedFactor(U[:, :0], lam[:0], 0, threshold)
    keep = lam >= threshold * lam_max
    if threshold == 0:
        keep = lam > 0
    r = int(np.count_nonzero(keep))
    return TruncatedFactor(U[:, :r], lam[:r], r, threshold)


def mode_factors(D_stack: np.ndarray, threshold: float) -> list[TruncatedFactor]:
    """Truncated factors for every half-spectrum mode; modes 0 and K/2 kept real."""
    out = []
    last = D_stack.shape[0] - 1
    for k, D in enumerate(D_stack):
        if k in (0, last):
            f = eig_truncate(np.real(D), threshold)
            f = TruncatedFactor(np.real(f.U), f.lam, f.rank, threshold)
        else:
            f = eig_truncate(D, threshold)
        out.append(f)
    return out


def draw_excitations(factors, rng: np.random.Generator) -> list[np.ndarray]:
    """Standard-normal excitations: real at modes 0 and K/2, circular complex elsewhere."""
    last = len(factors) - 1
    out = []
    for k, f in enumerate(factors):
        if k in (0, last):
            out.append(rng.standard_normal(f.rank).astype(complex))
        else:
            out.append((rng.standard_normal(f.rank) + 1j * rng.standard_normal(f.rank)) / np.sqrt(2))
    return out


def generative_step(prev: SimState, g_prev: np.ndarray, excitations, delta: float, factors):
    """Sample of ``u^i`` from the predictive prior in generative form.

    ``u^i = u^{i-1} + delta (g(u^{i-1}); v^{i-1}) + sqrt(delta^3/3) U Lambda^{1/2} r``.
    """
    if not delta > 0:
        raise ContractError(f"time step must be positive, got {delta}")
    if len(excitations) != len(factors) or len(factors) != prev.u.shape[0]:
        raise DimensionError("need one excitation vector and one factor per half-spectrum mode")
    mean = prev.u + delta * np.concatenate([np.asarray(g_prev)[:, None], prev.v], axis=1)
    out = mean.copy()
    last = len(factors) - 1
    scale = np.sqrt(delta ** 3 / 3)
    for k, (f, r) in enumerate(zip(factors, excitations)):
        r = np.asarray(r)
        if r.shape != (f.rank,):
            raise DimensionError(f"mode {k}: excitation length {r.shape} != retained rank {f.rank}")
        if k in (0, last):
            r = r.real
        out[k] = mean[k] + scale * (f.sqrt_factor @ r)
    out[[0, last]] = out[[0, last]].real
    return out


def regularized(D: np.ndarray, eps: float) -> np.ndarray:
    """``D + eps * diag(D)`` (batched); keeps near-singular mode covariances invertible."""
    diag = np.real(np.diagonal(D, axis1=-2, axis2=-1))
    return D + eps * np.einsum("...i,ij->...ij", diag, np.eye(D.shape[-1]))
