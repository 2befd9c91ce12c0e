"""Limited-memory BFGS with backtracking line search.

Written for the per-step MAP problems: smooth objectives of a few hundred to
a few thousand real variables, an optional block preconditioner used as the
initial inverse Hessian, and a gradient-norm stopping rule relative to the
objective value.

Close to a minimiser of an ill-conditioned objective the Armijo test can no
longer be decided because the expected decrease is below the rounding error
of ``f``.  Inside a band of ``noise * max(1, |f|)`` the line search then falls
back to the approximate Wolfe test of Hager and Zhang, which uses the
directional derivative instead.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError

__all__ = ["OptimizeResult", "lbfgs"]


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str
    f0: float

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0

    @property
    def decrease(self) -> float:
        return self.f0 - self.fun


def lbfgs(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray, *,
          precond: Callable[[np.ndarray], np.ndarray] | None = None,
          gtol: float = 1e-9, max_iter: int = 500, memory: int = 20,
          ftol: float = 1e-13, c1: float = 1e-4, max_backtrack: int = 60,
          noise: float = 1e-13, max_step: float | None = None) -> OptimizeResult:
    """Minimise ``fun`` (returning value and gradient) from ``x0``.

    Stops when ``max|grad| <= gtol * max(1, |f|)``.  After three consecutive
    iterations that neither decrease the objective by more than ``ftol``
    relative nor halve the gradient norm, the iteration stops and reports
    stagnation.  ``max_step`` bounds the infinity norm of each trial step.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("objective or gradient not finite at the starting point")
    f0 = f
    nfev = 1
    hist: deque = deque(maxlen=memory)
    apply_h0 = precond if precond is not None else (lambda v: v)

    def tol(fv):
        return gtol * max(1.0, abs(fv))

    it = 0
    stalls = 0
    message = "maximum iterations reached"
    converged = False
    while True:
        if np.max(np.abs(g), initial=0.0) <= tol(f):
            converged, message = True, "gradient tolerance reached"
            break
        if it >= max_iter:
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(hist):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        r = apply_h0(q)
        if precond is None and hist:
            s, y, _ = hist[-1]
            r *= np.dot(s, y) / np.dot(y, y)
        for (s, y, rho), a in zip(hist, reversed(alphas)):
            b = rho * np.dot(y, r)
            r += (a - b) * s
        d = -r
        slope = np.dot(g, d)
        if not slope < 0:
            hist.clear()
            d = -apply_h0(g)
            slope = np.dot(g, d)
            if not slope < 0:
                d = -g
                slope = -np.dot(g, g)
        step = 1.0
        if max_step is not None:
            dmax = np.max(np.abs(d), initial=0.0)
            if dmax > max_step:
                step = max_step / dmax
        accepted = False
        for _ in range(max_backtrack):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            nfev += 1
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                accepted = True
                break
            if (np.isfinite(f_new) and f_new <= f + noise * max(1.0, abs(f))
                    and np.all(np.isfinite(g_new))
                    and np.dot(g_new, d) <= (2 * c1 - 1) * slope):
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            message = "line search failed"
            break
        s = x_new - x
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            hist.append((s, y, 1.0 / sy))
        gmax_old = np.max(np.abs(g), initial=0.0)
        gmax_new = np.max(np.abs(g_new), initial=0.0)
        stalled = f - f_new <= ftol * max(1.0, abs(f)) and gmax_new > 0.5 * gmax_old
        stalls = stalls + 1 if stalled else 0
        x, f, g = x_new, f_new, g_new
        if stalls >= 3 and np.max(np.abs(g), initial=0.0) > tol(f):
            message = "objective stagnated"
            break
    return OptimizeResult(x, float(f), g, it, nfev, converged, message, float(f0))
