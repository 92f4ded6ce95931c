"""Scaled conjugate gradient minimization (Moller's algorithm).

Follows the classic netlab formulation: a Levenberg-Marquardt style scale
``beta`` replaces the line search, the step is accepted only when it lowers
the function, and the search direction restarts along the steepest descent
after ``n`` consecutive successes or whenever it stops being a descent
direction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError

log = logging.getLogger(__name__)

BETA_MIN = 1e-15
BETA_MAX = 1e100
SIGMA0 = 1e-4


@dataclass
class ScgResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_fev: int
    message: str

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def _safe(f, x):
    try:
        value = f(x)
    except NumericError as exc:
        log.debug("evaluation failed inside SCG: %s", exc)
        return None
    return value


def scg_minimize(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iters: int = 50,
    gtol: float = 1e-4,
    xtol: float = 1e-10,
    ftol: float = 1e-10,
) -> ScgResult:
    """Minimize ``f`` starting at ``x0``.

    ``f`` and ``grad`` may raise :class:`NumericError`; a failed trial point
    is treated as a rejected step.  The function value never increases from
    one accepted iterate to the next.

    Parameters
    ----------
    max_iters
        Cap on SCG iterations (accepted plus rejected steps).
    gtol
        Stop once the Euclidean gradient norm falls below this.
    xtol, ftol
        Stop when an accepted step moves every coordinate by less than
        ``xtol`` and changes ``f`` by less than ``ftol``.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    fold = f(x)
    g = np.asarray(grad(x), dtype=float)
    n_fev = 1
    if not (math.isfinite(fold) and np.all(np.isfinite(g))):
        raise NumericError("SCG starting point has a non-finite value or gradient")
    if np.linalg.norm(g) < gtol:
        return ScgResult(x, fold, g, 0, n_fev, "gradient norm below tolerance")

    d = -g
    success = True
    n_success = 0
    beta = 1.0
    mu = kappa = theta = 0.0
    message = "maximum iterations reached"
    it = 0
    while it < max_iters:
        it += 1
        if success:
            mu = float(d @ g)
            if mu >= 0:
                d = -g
                mu = float(d @ g)
            kappa = float(d @ d)
            if kappa < np.finfo(float).eps:
                message = "search direction vanished"
                break
            sigma = SIGMA0 / math.sqrt(kappa)
            g_plus = _safe(grad, x + sigma * d)
            n_fev += 1
            if g_plus is None or not np.all(np.isfinite(g_plus)):
                theta = 0.0
            else:
                theta = float(d @ (np.asarray(g_plus) - g)) / sigma

        delta = theta + beta * kappa
        if delta <= 0:
            delta = beta * kappa
            beta = beta - theta / kappa
        alpha = -mu / delta

        x_new = x + alpha * d
        f_new = _safe(f, x_new)
        n_fev += 1
        if f_new is None or not math.isfinite(f_new):
            Delta = -math.inf
        else:
            Delta = 2.0 * (f_new - fold) / (alpha * mu)

        if Delta >= 0:
            g_new = _safe(grad, x_new)
            if g_new is None or not np.all(np.isfinite(g_new)):
                Delta = -math.inf
                success = False
            else:
                success = True
                n_success += 1
                step = alpha * d
                x = x_new
                f_prev, fold = fold, f_new
                g_old, g = g, np.asarray(g_new, dtype=float)
                if np.max(np.abs(step)) < xtol and abs(f_new - f_prev) < ftol:
                    message = "step and function change below tolerance"
                    break
                if np.linalg.norm(g) < gtol:
                    message = "gradient norm below tolerance"
                    break
        else:
            success = False

        if Delta < 0.25:
            beta = min(4.0 * beta, BETA_MAX)
        if Delta > 0.75:
            beta = max(0.5 * beta, BETA_MIN)

        if n_success == n:
            d = -g
            n_success = 0
        elif success:
            gamma = float((g_old - g) @ g) / mu
            d = gamma * d - g
        if beta >= BETA_MAX:
            message = "scale parameter saturated"
            break

    return ScgResult(x, float(fold), g, it, n_fev, message)
