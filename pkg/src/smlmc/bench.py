"""Timing of the training objective and its gradients.

Each benchmark row times one objective-plus-gradient evaluation on a
synthetic problem of ``T`` observations, split into Gram assembly,
factorization/inversion and the gradient reduction.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from . import shrinkage as shr
from .errors import DomainError
from .kernel import CoregionalizationWeights, StructuredKernel, cholesky_jitter, gram_matrix, params_from_features
from .trainer import _Factor, _inverse_from_factor, _lml_grad, LOG_2PI


@dataclass
class BenchRow:
    T: int
    workers: int
    gram_s: float
    inversion_s: float
    gradients_s: float
    total_s: float
    objective: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchReport:
    rows: list[BenchRow]
    max_objective_diff: float
    max_gradient_diff: float

    @property
    def agree(self) -> bool:
        return self.max_objective_diff <= 1e-8 and self.max_gradient_diff <= 1e-8


def bench_problem(T: int, Q: int = 5, D: int = 24, R: int = 8, seed=0):
    """A random kernel and ``T`` observations spread over ``D`` covariates.

    Observation times are uniform over ``T / D`` hours per covariate, so the
    sampling density does not depend on ``T``.
    """
    if T < 1:
        raise DomainError("T must be positive")
    rng = np.random.default_rng(seed)
    basis = [params_from_features(rng.uniform(24.0, 72.0), rng.uniform(6.0, 72.0)) for _ in range(Q)]
    weights = [CoregionalizationWeights(rng.uniform(-1.0, 1.0, (D, R)) / np.sqrt(R), np.full(D, 0.01)) for _ in range(Q)]
    k = StructuredKernel(basis, weights, np.full(D, 0.1))
    c = rng.integers(0, D, T)
    t = rng.uniform(0.0, max(T / D, 1.0), T)
    y = rng.standard_normal(T)
    return c, t, y, k


def time_evaluation(c, t, y, k: StructuredKernel, workers: int = 1, method: str = "per_parameter"):
    """One timed evaluation.  Returns ``(BenchRow, gradient)``."""
    state = shr.init_state(k)
    prior = shr.PriorConfig()
    t0 = time.perf_counter()
    K = gram_matrix((c, t), k, with_noise=True, workers=workers)
    t1 = time.perf_counter()
    L, _ = cholesky_jitter(K)
    alpha = scipy.linalg.cho_solve((L, True), y)
    _inverse_from_factor(L)
    t2 = time.perf_counter()
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * c.size * LOG_2PI
    f = _Factor(L, alpha, lml)
    g = _lml_grad(c, t, k, f, method=method, workers=workers) + shr.log_prior_grad(k, state, prior)
    t3 = time.perf_counter()
    obj = lml + shr.log_prior(k, state, prior)
    row = BenchRow(c.size, workers, t1 - t0, t2 - t1, t3 - t2, t3 - t0, obj)
    return row, g


def run_bench(
    sizes=(500, 1000, 2000, 3000),
    workers=(1, 4),
    Q: int = 5,
    D: int = 24,
    R: int = 8,
    method: str = "per_parameter",
    seed=0,
) -> BenchReport:
    """Benchmark every size at every worker count and check they agree."""
    rows, obj_diff, grad_diff = [], 0.0, 0.0
    for T in sizes:
        c, t, y, k = bench_problem(T, Q, D, R, seed)
        ref = None
        for w in workers:
            row, g = time_evaluation(c, t, y, k, w, method)
            rows.append(row)
            if ref is None:
                ref = (row.objective, g)
            else:
                obj_diff = max(obj_diff, abs(row.objective - ref[0]))
                grad_diff = max(grad_diff, float(np.max(np.abs(g - ref[1]))))
    return BenchReport(rows, obj_diff, grad_diff)


def inversion_scaling(sizes=(500, 1000, 2000), repeats: int = 3, seed=0) -> tuple[float, list[float]]:
    """Log-log slope of factorization plus inversion time against ``T``.

    Uses the minimum over ``repeats`` runs for each size.
    """
    times = []
    for T in sizes:
        c, t, y, k = bench_problem(T, 2, 4, 2, seed)
        K = gram_matrix((c, t), k)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            L, _ = cholesky_jitter(K)
            _inverse_from_factor(L)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    return slope, times


def format_table(rows) -> str:
    head = f"{'T':>6} {'workers':>7} {'gram_s':>9} {'inversion_s':>11} {'gradients_s':>11} {'total_s':>9} {'objective':>18}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r.T:>6} {r.workers:>7} {r.gram_s:>9.3f} {r.inversion_s:>11.3f} {r.gradients_s:>11.3f} {r.total_s:>9.3f} {r.objective:>18.10g}"
        )
    return "\n".join(lines)
