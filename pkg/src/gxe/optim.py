"""BFGS minimizer with Armijo backtracking, shared by all REML fits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int
    trace: list[float] = field(default_factory=list)


def minimize_bfgs(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 500,
    max_step: float = 4.0,
    gtol: float = 1e-6,
) -> OptResult:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Stops when the relative decrease stays below ``tol`` on two consecutive
    iterations with the gradient infinity-norm under ``sqrt(tol)``, or when
    that norm drops below ``gtol``. Points where
    ``fun`` raises ArithmeticError or returns non-finite values are treated as
    +inf by the line search, so the accepted sequence is strictly descending.
    """

    def safe(x):
        try:
            f, g = fun(x)
        except (ArithmeticError, np.linalg.LinAlgError):
            return np.inf, None
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return np.inf, None
        return f, g

    x = np.array(x0, dtype=np.float64)
    f, g = safe(x)
    if g is None:
        raise ArithmeticError("objective is not finite at the starting point")
    n = x.size
    H = np.eye(n)
    trace = [f]
    small = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        p = -H @ g
        slope = g @ p
        if slope >= 0:
            H = np.eye(n)
            p = -g
            slope = g @ p
        big = np.max(np.abs(p))
        if big > max_step:
            p *= max_step / big
            slope = g @ p
        alpha = 1.0
        for _ in range(50):
            f_new, g_new = safe(x + alpha * p)
            if f_new <= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            log.debug("line search failed at iteration %d", it)
            break
        s = alpha * p
        yv = g_new - g
        sy = s @ yv
        if it == 1 and sy > 0:
            H = np.eye(n) * (sy / (yv @ yv))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            Hy = H @ yv
            H += (rho * rho * (yv @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        rel = (f - f_new) / max(abs(f_new), 1.0)
        x, f, g = x + s, f_new, g_new
        trace.append(f)
        # a crawl along a flat log-variance direction also shows tiny
        # decreases, so a stall only counts once the gradient is small too
        small = small + 1 if rel < tol and np.max(np.abs(g)) < math.sqrt(tol) else 0
        if small >= 2:
            converged = True
            break
    return OptResult(x, f, converged, it, trace)
