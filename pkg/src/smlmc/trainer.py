"""Per-patient kernel fitting.

The training objective is the GP log marginal likelihood plus the log prior
of the shrinkage hierarchy.  Fitting alternates a closed-form sweep over the
latent scales with scaled-conjugate-gradient ascent over the kernel
parameters ``{mu, v, A, lambda, log noise}``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import shrinkage as shr
from .data import ObservationSet
from .errors import DomainError, FitError, NumericError
from .kernel import (
    TWO_PI,
    TWO_PI_SQ,
    BasisKernelParams,
    CoregionalizationWeights,
    StructuredKernel,
    cholesky_jitter,
    gram_matrix,
)
from .scg import scg_minimize
from .shrinkage import PriorConfig, ShrinkageState

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
NONZERO_THRESHOLD = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    """Fitting settings.

    ``sparse=False`` drops every prior term (the plain maximum-likelihood
    fit).  ``gradient_method`` selects the blocked reduction (``"blocked"``)
    or one dense derivative matrix per parameter (``"per_parameter"``); both
    give the same numbers up to rounding.
    """

    Q: int = 5
    R: int = 8
    max_outer_iters: int = 30
    convergence_tol: float = 0.005
    n_random_init: int = 1000
    length_scale_init_range: tuple[float, float] = (6.0, 72.0)
    period_init_range: tuple[float, float] = (24.0, 72.0)
    a_init_range: tuple[float, float] = (-1.5, 1.5)
    lam_init: float = 0.01
    noise_init: float = 0.1
    eta_grid: tuple[float, ...] = (0.01, 0.1, 1.0)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sparse: bool = True
    inner_iters: int = 50
    gtol: float = 1e-4
    gradient_method: str = "blocked"
    workers: int = 1

    def __post_init__(self):
        if self.Q < 1 or self.R < 1 or self.max_outer_iters < 1 or self.n_random_init < 1 or self.inner_iters < 1:
            raise DomainError("counts in TrainConfig must be at least 1")
        for name in ("length_scale_init_range", "period_init_range", "a_init_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise DomainError(f"{name} must satisfy low < high")
        if self.length_scale_init_range[0] <= 0 or self.period_init_range[0] <= 0:
            raise DomainError("initial length scales and periods must be positive")
        if not (self.convergence_tol > 0 and self.lam_init >= 0 and self.noise_init > 0):
            raise DomainError("convergence_tol and noise_init must be positive, lam_init non-negative")
        if self.gradient_method not in ("blocked", "per_parameter"):
            raise DomainError(f"unknown gradient_method {self.gradient_method!r}")
        if self.workers < 1:
            raise DomainError("workers must be at least 1")

    def with_eta(self, eta: float) -> "TrainConfig":
        return replace(self, prior=replace(self.prior, eta=eta))


@dataclass(eq=False)
class FitResult:
    """Outcome of :func:`fit_patient`.

    ``kernel`` lives in standardized units: covariate ``d`` was transformed as
    ``(y - mean[d]) / scale[d]`` before fitting.
    """

    kernel: StructuredKernel
    shrinkage: ShrinkageState
    objective_trace: list[float]
    log_marginal: float
    converged: bool
    mean: np.ndarray
    scale: np.ndarray
    patient_id: str = ""
    covariate_names: list[str] = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)
    seed: int | None = None
    n_obs: int = 0

    @property
    def n_outer(self) -> int:
        return len(self.objective_trace)


# -- marginal likelihood -----------------------------------------------------


def _as_flat(obs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(obs, ObservationSet):
        return obs.flatten()
    c, t, y = obs
    return np.asarray(c, dtype=np.intp), np.asarray(t, dtype=float), np.asarray(y, dtype=float)


@dataclass
class _Factor:
    L: np.ndarray
    alpha: np.ndarray
    lml: float


def _check_kernel(k: StructuredKernel):
    if np.any(k.v < 0):
        raise NumericError("negative spectral variance")
    if not np.all(np.isfinite(k.to_vector())):
        raise NumericError("non-finite kernel parameter")


def _factor(c, t, y, k: StructuredKernel, workers: int = 1) -> _Factor:
    if c.size == 0:
        raise DomainError("need at least one observation")
    _check_kernel(k)
    K = gram_matrix((c, t), k, with_noise=True, workers=workers)
    L, _ = cholesky_jitter(K)
    alpha = scipy.linalg.cho_solve((L, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * c.size * LOG_2PI
    if not math.isfinite(lml):
        raise NumericError("non-finite log marginal likelihood")
    return _Factor(L, alpha, lml)


def log_marginal_likelihood(obs, k: StructuredKernel, workers: int = 1) -> float:
    """GP log marginal likelihood of ``obs`` (values as given) under ``k``.

    ``obs`` is an :class:`ObservationSet` or a ``(covariate, time, value)``
    triple of arrays.
    """
    c, t, y = _as_flat(obs)
    return _factor(c, t, y, k, workers).lml


def objective(obs, k: StructuredKernel, state: ShrinkageState | None, cfg: PriorConfig | None) -> float:
    """Log marginal likelihood plus :func:`shrinkage.log_prior`; prior omitted when ``cfg`` is None."""
    value = log_marginal_likelihood(obs, k)
    if cfg is not None:
        value += shr.log_prior(k, state, cfg)
    return value


# -- gradients -----------------------------------------------------------------


def _inverse_from_factor(L: np.ndarray) -> np.ndarray:
    inv, info = scipy.linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise NumericError(f"dpotri failed with info={info}")
    inv = np.tril(inv)
    return inv + np.tril(inv, -1).T


def _lml_grad_blocked(c, t, k: StructuredKernel, f: _Factor) -> np.ndarray:
    """Marginal-likelihood gradient via per-kernel covariate-block reductions.

    With ``W = alpha alpha^T - K^{-1}`` every component is
    ``0.5 * sum(W * dK/dtheta)``.  For the weights this collapses to the D x D
    matrix ``G_q[d, d'] = sum over (i in d, j in d') of W_ij kappa_q(i, j)``.
    """
    T, D = c.size, k.D
    W = np.outer(f.alpha, f.alpha) - _inverse_from_factor(f.L)
    tau = np.abs(t[:, None] - t[None, :])
    tau2 = tau * tau
    E = np.zeros((T, D))
    E[np.arange(T), c] = 1.0
    g_mu, g_v, g_A, g_lam = [], [], [], []
    for p, w in zip(k.basis, k.weights):
        env = np.exp(-TWO_PI_SQ * p.v * tau2)
        arg = TWO_PI * p.mu * tau
        kq = env * np.cos(arg)
        G = E.T @ (W * kq) @ E
        G = 0.5 * (G + G.T)
        g_A.append((G @ w.A).ravel())
        g_lam.append(0.5 * np.diag(G))
        WB = W * (w.A @ w.A.T + np.diag(w.lam))[np.ix_(c, c)]
        g_v.append(0.5 * float(np.sum(WB * (-TWO_PI_SQ * tau2 * kq))))
        g_mu.append(0.5 * float(np.sum(WB * (-TWO_PI * tau * env * np.sin(arg)))))
    g_noise = 0.5 * k.noise_var * np.bincount(c, weights=np.diag(W), minlength=D)
    return np.concatenate([g_mu, g_v, *g_A, *g_lam, g_noise])


def _lml_grad_per_parameter(c, t, k: StructuredKernel, f: _Factor, workers: int = 1) -> np.ndarray:
    """Marginal-likelihood gradient with one dense ``dK/dtheta_j`` per parameter.

    Each component costs O(T^2) independently of the others, so components are
    distributed over a thread pool.  Every component is reduced by the same
    code path whatever the worker count, so results are bitwise identical.
    """
    T, D = c.size, k.D
    W = np.outer(f.alpha, f.alpha) - _inverse_from_factor(f.L)
    tau = np.abs(t[:, None] - t[None, :])
    kappas = [np.exp(-TWO_PI_SQ * p.v * tau**2) * np.cos(TWO_PI * p.mu * tau) for p in k.basis]
    Bfull = [(w.A @ w.A.T + np.diag(w.lam))[np.ix_(c, c)] for w in k.weights]
    onehot = [(c == d).astype(float) for d in range(D)]

    def d_mu(q):
        p = k.basis[q]
        return Bfull[q] * (-TWO_PI * tau * np.exp(-TWO_PI_SQ * p.v * tau**2) * np.sin(TWO_PI * p.mu * tau))

    def d_v(q):
        return Bfull[q] * (-TWO_PI_SQ * tau**2 * kappas[q])

    def d_a(q, d, r):
        col = k.weights[q].A[:, r][c]
        M = np.outer(onehot[d], col)
        return kappas[q] * (M + M.T)

    def d_lam(q, d):
        return kappas[q] * np.outer(onehot[d], onehot[d])

    def d_noise(d):
        return np.diag(k.noise_var[d] * onehot[d])

    tasks = [(d_mu, (q,)) for q in range(k.Q)]
    tasks += [(d_v, (q,)) for q in range(k.Q)]
    for q, w in enumerate(k.weights):
        tasks += [(d_a, (q, d, r)) for d in range(D) for r in range(w.R)]
    tasks += [(d_lam, (q, d)) for q in range(k.Q) for d in range(D)]
    tasks += [(d_noise, (d,)) for d in range(D)]

    def run(task):
        fn, args = task
        return 0.5 * float(np.sum(W * fn(*args)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(run, tasks))
    else:
        out = [run(task) for task in tasks]
    return np.array(out)


def _lml_grad(c, t, k, f, method="blocked", workers=1):
    if method == "blocked":
        return _lml_grad_blocked(c, t, k, f)
    if method == "per_parameter":
        return _lml_grad_per_parameter(c, t, k, f, workers)
    raise DomainError(f"unknown gradient method {method!r}")


def gradients(
    obs,
    k: StructuredKernel,
    state: ShrinkageState | None,
    cfg: PriorConfig | None,
    method: str = "blocked",
    workers: int = 1,
) -> np.ndarray:
    """Gradient of :func:`objective` in the kernel parameter-vector layout.

    The noise entries are derivatives with respect to ``log sigma^2_d``.
    """
    c, t, y = _as_flat(obs)
    f = _factor(c, t, y, k, workers)
    g = _lml_grad(c, t, k, f, method, workers)
    if cfg is not None:
        g = g + shr.log_prior_grad(k, state, cfg)
    return g


def parameter_scales(k: StructuredKernel, period: float = 24.0) -> np.ndarray:
    """Per-coordinate scales for the optimizer (a daily rhythm is order one)."""
    s = np.ones(k.n_params)
    b = k.block_slices()
    s[b["mu"]] = 1.0 / period
    s[b["v"]] = 1.0 / (TWO_PI * period) ** 2
    return s


LAMBDA_MIN = 1e-10
V_MIN = 1e-16


class _Problem:
    """Objective and gradient in optimizer coordinates ``z``.

    ``theta = z * scales`` for mu and the weights.  Lambda and the spectral
    variances are optimized on the log scale: the Laplace term is then
    smooth, both stay positive, and a component drifting towards an infinite
    length-scale no longer stalls against the ``v >= 0`` boundary.  One
    factorization is shared between value and gradient calls
    at the same point.
    """

    def __init__(self, c, t, y, template: StructuredKernel, cfg: TrainConfig):
        self.c, self.t, self.y = c, t, y
        self.template = template
        self.cfg = cfg
        self.prior = cfg.prior if cfg.sparse else None
        self.state: ShrinkageState | None = None
        self.scales = parameter_scales(template)
        b = template.block_slices()
        self.log_mask = np.zeros(template.n_params, dtype=bool)
        self.log_mask[b["lam"]] = True
        self.log_mask[b["v"]] = True
        self.floor = np.where(np.arange(template.n_params) < b["v"].stop, V_MIN, LAMBDA_MIN)
        self._key = None
        self._cache = None

    def to_z(self, k: StructuredKernel) -> np.ndarray:
        theta = k.to_vector()
        z = theta / self.scales
        m = self.log_mask
        z[m] = np.log(np.maximum(theta[m], self.floor[m]))
        return z

    def to_theta(self, z: np.ndarray) -> np.ndarray:
        theta = z * self.scales
        theta[self.log_mask] = np.exp(z[self.log_mask])
        return theta

    def kernel(self, z) -> StructuredKernel:
        try:
            with np.errstate(over="ignore", under="ignore"):
                return self.template.with_vector(self.to_theta(z))
        except DomainError as exc:
            # trial points far outside the valid region count as failed steps
            raise NumericError(str(exc)) from exc

    def _eval(self, z):
        key = z.tobytes()
        if key != self._key:
            self._key, self._cache = None, None
            k = self.kernel(z)
            f = _factor(self.c, self.t, self.y, k, self.cfg.workers)
            self._key, self._cache = key, (k, f)
        return self._cache

    def neg_value(self, z):
        k, f = self._eval(z)
        value = f.lml
        if self.prior is not None:
            value += shr.log_prior(k, self.state, self.prior)
        return -value

    def neg_grad(self, z):
        k, f = self._eval(z)
        g = _lml_grad(self.c, self.t, k, f, self.cfg.gradient_method, self.cfg.workers)
        if self.prior is not None:
            g = g + shr.log_prior_grad(k, self.state, self.prior)
        jac = self.scales.copy()
        jac[self.log_mask] = k.to_vector()[self.log_mask]
        return -g * jac


# -- initialization ------------------------------------------------------------


def _candidate(rng: np.random.Generator, D: int, cfg: TrainConfig) -> StructuredKernel:
    lo_p, hi_p = cfg.period_init_range
    lo_l, hi_l = cfg.length_scale_init_range
    lo_a, hi_a = cfg.a_init_range
    basis, weights = [], []
    for _ in range(cfg.Q):
        period = rng.uniform(lo_p, hi_p)
        length = rng.uniform(lo_l, hi_l)
        basis.append(BasisKernelParams(1.0 / period, 1.0 / (TWO_PI * length) ** 2))
        weights.append(CoregionalizationWeights(rng.uniform(lo_a, hi_a, (D, cfg.R)), np.full(D, cfg.lam_init)))
    return StructuredKernel(basis, weights, np.full(D, cfg.noise_init))


def random_restart_init(obs: ObservationSet, cfg: TrainConfig, seed=None) -> StructuredKernel:
    """Best of ``cfg.n_random_init`` random kernels by marginal likelihood.

    The likelihood is evaluated on the patient's standardized data.  Ties go
    to the earliest candidate; candidates whose Gram matrix cannot be
    factored score ``-inf``.
    """
    std, _, _ = obs.standardize()
    c, t, y = std.flatten()
    if c.size == 0:
        raise DomainError("cannot initialize a kernel without observations")
    rng = np.random.default_rng(seed)
    tau = np.abs(t[:, None] - t[None, :])
    tau2 = tau * tau
    best, best_lml = None, -math.inf
    for i in range(cfg.n_random_init):
        k = _candidate(rng, obs.D, cfg)
        K = np.zeros_like(tau)
        for p, B in zip(k.basis, k.B_all()):
            K += B[np.ix_(c, c)] * (np.exp(-TWO_PI_SQ * p.v * tau2) * np.cos(TWO_PI * p.mu * tau))
        K[np.diag_indices(c.size)] += k.noise_var[c]
        try:
            L, _ = cholesky_jitter(K)
        except NumericError:
            continue
        alpha = scipy.linalg.cho_solve((L, True), y)
        lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L))))
        if lml > best_lml or best is None:
            best, best_lml = k, lml
    if best is None:
        raise FitError("no random initial kernel could be factored")
    return best


# -- fitting -------------------------------------------------------------------


def _canonical(k: StructuredKernel) -> StructuredKernel:
    """Flip negative frequencies (the kernel depends on mu only through cos)."""
    basis = [BasisKernelParams(abs(p.mu), p.v) for p in k.basis]
    return StructuredKernel(basis, k.weights, k.noise_var)


def shrinkage_sweep(k: StructuredKernel, state: ShrinkageState, cfg: PriorConfig) -> ShrinkageState:
    """psi -> delta -> phi -> tau, then delta again given the new phi.

    The final refresh leaves delta and tau equal to their conditional means at
    the current (psi, phi), which makes the sweep an exact expectation step for
    the collapsed prior (see :func:`shrinkage.collapsed_log_prior`).
    """
    state = shr.closed_form_update(k, state, cfg)
    delta = [shr.update_delta(p, ph[None, :], cfg) for p, ph in zip(state.psi, state.phi)]
    return ShrinkageState(state.psi, delta, state.phi, state.tau)


def fit_patient(obs: ObservationSet, cfg: TrainConfig = TrainConfig(), seed=None, init: StructuredKernel | None = None) -> FitResult:
    """Fit a structured kernel to one patient.

    Each outer iteration runs one closed-form shrinkage sweep and then at most
    ``cfg.inner_iters`` SCG iterations on the kernel parameters.  The objective
    is recorded after every outer iteration; fitting stops once two
    consecutive values differ by less than ``cfg.convergence_tol`` or after
    ``cfg.max_outer_iters`` iterations.
    """
    std, mean, scale = obs.standardize()
    c, t, y = std.flatten()
    if c.size == 0:
        raise DomainError("patient has no observations")
    k = init.copy() if init is not None else random_restart_init(obs, cfg, seed)
    if k.D != obs.D:
        raise DomainError("initial kernel has the wrong number of covariates")
    state = shr.init_state(k)
    problem = _Problem(c, t, y, k, cfg)
    prior = problem.prior
    trace: list[float] = []
    converged = False
    for it in range(1, cfg.max_outer_iters + 1):
        if prior is not None:
            state = shrinkage_sweep(k, state, prior)
        problem.state = state
        z0 = problem.to_z(k)
        try:
            res = scg_minimize(problem.neg_value, problem.neg_grad, z0, cfg.inner_iters, cfg.gtol)
        except NumericError as exc:
            raise FitError(f"optimization failed: {exc}", iteration=it) from exc
        k = _canonical(problem.kernel(res.x))
        trace.append(_traced_objective(-res.fun, k, state, prior))
        log.debug("outer %d: objective %.6f (%s, %d SCG iterations)", it, trace[-1], res.message, res.n_iter)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.convergence_tol:
            converged = True
            break
    lml = _factor(c, t, y, k).lml
    return FitResult(
        kernel=k,
        shrinkage=state,
        objective_trace=trace,
        log_marginal=lml,
        converged=converged,
        mean=mean,
        scale=scale,
        patient_id=obs.patient_id,
        covariate_names=list(obs.covariate_names),
        config=cfg,
        seed=seed,
        n_obs=int(c.size),
    )


def _traced_objective(value: float, k, state, prior) -> float:
    if prior is None:
        return value
    return value - shr.log_prior(k, state, prior) + shr.collapsed_log_prior(k, state, prior)


# -- model selection -----------------------------------------------------------


def count_nonzero(k: StructuredKernel, threshold: float = NONZERO_THRESHOLD) -> int:
    """Hyperparameters with magnitude above ``threshold``.

    Counts weight entries ``a`` and ``lambda`` directly; ``mu`` and ``v`` of a
    basis kernel count (two per kernel) only when that kernel has a nonzero
    weight, since a kernel with all-zero weights contributes nothing.
    """
    total = 0
    for w in k.weights:
        n = int(np.sum(np.abs(w.A) > threshold) + np.sum(np.abs(w.lam) > threshold))
        total += n + (2 if n else 0)
    return total


def model_selection_scores(result: FitResult, n_params_nonzero: int, T: int) -> tuple[float, float]:
    """``(log_marginal, BIC)`` with ``BIC = n log T - 2 log_marginal``."""
    if T < 1:
        raise DomainError("T must be at least 1")
    return result.log_marginal, n_params_nonzero * math.log(T) - 2.0 * result.log_marginal
