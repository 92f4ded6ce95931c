"""Spectral-mixture basis kernels and the block-structured multi-output kernel.

The covariance between observation ``i`` of covariate ``c_i`` at time ``t_i``
and observation ``j`` is

    k(i, j) = sum_q B_q[c_i, c_j] * exp(-2 pi^2 tau^2 v_q) * cos(2 pi tau mu_q),
    tau = |t_i - t_j|,

with ``B_q = A_q A_q^T + diag(lambda_q)``.  Times are in hours everywhere.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import DomainError, NumericError

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
TWO_PI_SQ = 2.0 * math.pi**2

# Row-block size for Gram assembly.  Fixed (not derived from the worker
# count) so every entry is computed by the same code path in sequential and
# threaded runs.
GRAM_BLOCK_ROWS = 256

JITTER_REL = 1e-8
JITTER_TRIES = 3


@dataclass(frozen=True)
class BasisKernelParams:
    """Frequency ``mu`` (1/h) and spectral variance ``v`` (1/h^2) of one basis kernel."""

    mu: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.v)):
            raise DomainError("basis kernel parameters must be finite")


@dataclass(frozen=True, eq=False)
class CoregionalizationWeights:
    A: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        lam = np.asarray(self.lam, dtype=float).reshape(-1)
        if A.shape[0] != lam.shape[0]:
            raise DomainError(f"A has {A.shape[0]} rows but lambda has {lam.shape[0]} entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "lam", lam)

    @property
    def D(self) -> int:
        return self.A.shape[0]

    @property
    def R(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class IndexedInput:
    covariate: int
    time: float


@dataclass(eq=False)
class StructuredKernel:
    """Q basis kernels, their coregionalization weights and per-covariate noise."""

    basis: list[BasisKernelParams]
    weights: list[CoregionalizationWeights]
    noise_var: np.ndarray = field(default=None)

    def __post_init__(self):
        self.basis = list(self.basis)
        self.weights = list(self.weights)
        if len(self.basis) != len(self.weights):
            raise DomainError("basis and weights must have the same length Q")
        if not self.basis:
            raise DomainError("a structured kernel needs at least one basis kernel")
        D = self.weights[0].D
        if any(w.D != D for w in self.weights):
            raise DomainError("every A_q must have D rows")
        if self.noise_var is None:
            self.noise_var = np.full(D, 1e-2)
        self.noise_var = np.asarray(self.noise_var, dtype=float).reshape(-1)
        if self.noise_var.shape != (D,):
            raise DomainError(f"noise_var must have length D={D}")
        if np.any(~(self.noise_var > 0)):
            raise DomainError("noise variances must be positive")

    @property
    def Q(self) -> int:
        return len(self.basis)

    @property
    def D(self) -> int:
        return self.weights[0].D

    @property
    def ranks(self) -> list[int]:
        return [w.R for w in self.weights]

    @property
    def mu(self) -> np.ndarray:
        return np.array([b.mu for b in self.basis])

    @property
    def v(self) -> np.ndarray:
        return np.array([b.v for b in self.basis])

    def B(self, q: int) -> np.ndarray:
        return build_B(self.weights[q])

    def B_all(self) -> list[np.ndarray]:
        return [build_B(w) for w in self.weights]

    def copy(self) -> "StructuredKernel":
        return StructuredKernel(
            list(self.basis),
            [CoregionalizationWeights(w.A.copy(), w.lam.copy()) for w in self.weights],
            self.noise_var.copy(),
        )

    # -- parameter vector ----------------------------------------------------
    # Layout: mu (Q) | v (Q) | A_1.ravel() ... A_Q.ravel() (row-major) |
    #         lambda_1 ... lambda_Q (D each) | log noise variance (D).

    @property
    def n_params(self) -> int:
        return 2 * self.Q + sum(w.A.size for w in self.weights) + self.Q * self.D + self.D

    def to_vector(self) -> np.ndarray:
        parts = [self.mu, self.v]
        parts += [w.A.ravel() for w in self.weights]
        parts += [w.lam for w in self.weights]
        parts.append(np.log(self.noise_var))
        return np.concatenate(parts)

    def with_vector(self, theta: np.ndarray) -> "StructuredKernel":
        """A kernel with this kernel's shapes and the parameter values in ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DomainError(f"parameter vector has length {theta.size}, expected {self.n_params}")
        Q, D = self.Q, self.D
        mu, v = theta[:Q], theta[Q : 2 * Q]
        pos = 2 * Q
        As = []
        for w in self.weights:
            As.append(theta[pos : pos + w.A.size].reshape(w.A.shape).copy())
            pos += w.A.size
        lams = []
        for _ in range(Q):
            lams.append(theta[pos : pos + D].copy())
            pos += D
        noise = np.exp(theta[pos : pos + D])
        return StructuredKernel(
            [BasisKernelParams(float(m), float(s)) for m, s in zip(mu, v)],
            [CoregionalizationWeights(A, lam) for A, lam in zip(As, lams)],
            noise,
        )

    def block_slices(self) -> dict[str, slice]:
        """Slices of the parameter vector for each parameter class."""
        Q, D = self.Q, self.D
        n_a = sum(w.A.size for w in self.weights)
        s = {}
        s["mu"] = slice(0, Q)
        s["v"] = slice(Q, 2 * Q)
        s["A"] = slice(2 * Q, 2 * Q + n_a)
        s["lam"] = slice(2 * Q + n_a, 2 * Q + n_a + Q * D)
        s["log_noise"] = slice(2 * Q + n_a + Q * D, 2 * Q + n_a + Q * D + D)
        return s


def _check_positive(name, value):
    if not value > 0:
        raise DomainError(f"{name} must be positive, got {value!r}")


def se_kernel(x, x2, length_scale, scale):
    """Squared-exponential kernel ``scale^2 exp(-|x - x2|^2 / (2 l^2))``."""
    _check_positive("length_scale", length_scale)
    r = np.abs(np.asarray(x, dtype=float) - np.asarray(x2, dtype=float))
    return scale**2 * np.exp(-(r**2) / (2.0 * length_scale**2))


def periodic_kernel(x, x2, length_scale, scale, period):
    _check_positive("length_scale", length_scale)
    _check_positive("period", period)
    r = np.abs(np.asarray(x, dtype=float) - np.asarray(x2, dtype=float))
    return scale**2 * np.exp(-4.0 * np.sin(math.pi * r / period) ** 2 / length_scale**2)


def sm_basis_kernel(tau, params: BasisKernelParams):
    """Spectral-mixture basis kernel evaluated at lag(s) ``tau`` (hours, >= 0)."""
    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)):
        raise DomainError("lags must be finite")
    return np.exp(-TWO_PI_SQ * tau**2 * params.v) * np.cos(TWO_PI * tau * params.mu)


def build_B(weights: CoregionalizationWeights) -> np.ndarray:
    A = weights.A
    return A @ A.T + np.diag(weights.lam)


def characteristic_features(params: BasisKernelParams) -> tuple[float, float]:
    """(period, length scale) in hours; ``inf`` where the parameter is zero."""
    period = 1.0 / abs(params.mu) if params.mu != 0 else math.inf
    length = 1.0 / (TWO_PI * math.sqrt(params.v)) if params.v > 0 else math.inf
    return period, length


def params_from_features(period: float, length_scale: float) -> BasisKernelParams:
    """Inverse of :func:`characteristic_features` (``inf`` maps to zero)."""
    mu = 0.0 if math.isinf(period) else 1.0 / period
    v = 0.0 if math.isinf(length_scale) else 1.0 / (TWO_PI * length_scale) ** 2
    return BasisKernelParams(mu, v)


def cross_cov(d: int, d2: int, t: float, t2: float, k: StructuredKernel) -> float:
    tau = abs(float(t) - float(t2))
    total = 0.0
    for params, w in zip(k.basis, k.weights):
        b = float(w.A[d] @ w.A[d2]) + (w.lam[d] if d == d2 else 0.0)
        total += b * float(sm_basis_kernel(tau, params))
    return total


def as_arrays(inputs) -> tuple[np.ndarray, np.ndarray]:
    """Normalize inputs to ``(covariate_index, time)`` arrays.

    Accepts a sequence of :class:`IndexedInput` or a ``(covariates, times)``
    pair of array-likes.
    """
    if isinstance(inputs, tuple) and len(inputs) == 2 and not isinstance(inputs[0], IndexedInput):
        c, t = inputs
        return np.asarray(c, dtype=np.intp), np.asarray(t, dtype=float)
    inputs = list(inputs)
    c = np.fromiter((x.covariate for x in inputs), dtype=np.intp, count=len(inputs))
    t = np.fromiter((x.time for x in inputs), dtype=float, count=len(inputs))
    return c, t


def _cross_block(c1, t1, c2, t2, mus, vs, Bs):
    tau = np.abs(t1[:, None] - t2[None, :])
    tau2 = tau**2
    out = np.zeros(tau.shape)
    for mu, v, B in zip(mus, vs, Bs):
        kq = np.exp(-TWO_PI_SQ * v * tau2) * np.cos(TWO_PI * mu * tau)
        out += B[np.ix_(c1, c2)] * kq
    return out


def cross_matrix(inputs1, inputs2, k: StructuredKernel) -> np.ndarray:
    """Noise-free covariance between two input sets."""
    c1, t1 = as_arrays(inputs1)
    c2, t2 = as_arrays(inputs2)
    _check_covariates(c1, k.D)
    _check_covariates(c2, k.D)
    return _cross_block(c1, t1, c2, t2, k.mu, k.v, k.B_all())


def _check_covariates(c, D):
    if c.size and (c.min() < 0 or c.max() >= D):
        raise DomainError(f"covariate index outside [0, {D})")


def gram_matrix(inputs, k: StructuredKernel, with_noise: bool = True, workers: int = 1) -> np.ndarray:
    """Gram matrix of the structured kernel over ``inputs``.

    Assembled in fixed row blocks of ``GRAM_BLOCK_ROWS``; ``workers > 1``
    evaluates blocks on a thread pool and gives bitwise-identical results.
    """
    c, t = as_arrays(inputs)
    if c.size == 0:
        raise DomainError("gram_matrix needs at least one input")
    if not np.all(np.isfinite(t)):
        raise DomainError("input times must be finite")
    _check_covariates(c, k.D)
    T = c.size
    mus, vs, Bs = k.mu, k.v, k.B_all()
    K = np.empty((T, T))
    starts = range(0, T, GRAM_BLOCK_ROWS)

    def fill(start):
        stop = min(start + GRAM_BLOCK_ROWS, T)
        K[start:stop] = _cross_block(c[start:stop], t[start:stop], c, t, mus, vs, Bs)

    if workers > 1 and T > GRAM_BLOCK_ROWS:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    # exact symmetry (transcendental SIMD loops may differ by an ulp across lanes)
    K = 0.5 * (K + K.T)
    if with_noise:
        K[np.diag_indices(T)] += k.noise_var[c]
    return K


def cholesky_jitter(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    Jitter starts at ``1e-8 * mean(diag(K))`` and grows tenfold for up to three
    retries.  Returns ``(L, jitter_added)``.
    """
    try:
        return scipy.linalg.cholesky(K, lower=True, check_finite=True), 0.0
    except (np.linalg.LinAlgError, ValueError):
        pass
    base = JITTER_REL * float(np.mean(np.abs(np.diag(K))))
    if not math.isfinite(base) or base <= 0:
        raise NumericError("Gram matrix has a non-finite or zero diagonal")
    jitter = base
    for _ in range(JITTER_TRIES):
        try:
            L = scipy.linalg.cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
            log.debug("Cholesky needed jitter %.3g", jitter)
            return L, jitter
        except (np.linalg.LinAlgError, ValueError):
            jitter *= 10.0
    raise NumericError(f"Cholesky failed after {JITTER_TRIES} jitter retries (last jitter {jitter / 10:.3g})")


def make_kernel(
    periods: Sequence[float],
    length_scales: Sequence[float],
    As: Iterable,
    lams: Iterable,
    noise_var,
) -> StructuredKernel:
    """Convenience constructor from characteristic periods/length scales."""
    basis = [params_from_features(p, l) for p, l in zip(periods, length_scales)]
    weights = [CoregionalizationWeights(A, lam) for A, lam in zip(As, lams)]
    return StructuredKernel(basis, weights, np.asarray(noise_var, dtype=float))
