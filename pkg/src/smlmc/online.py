"""Online one-step-ahead prediction, baselines and evaluation metrics.

A stream is processed in time order.  Each observation is predicted from the
patient's own past: every strictly earlier observation, plus observations of
*other* covariates taken at the same instant.  After the prediction is
recorded, the observation joins the history and the patient-specific kernel
takes one momentum step on the objective restricted to a trailing window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.stats

from . import shrinkage as shr
from .data import ObservationSet
from .errors import DomainError, NumericError
from .kernel import StructuredKernel, cholesky_jitter, cross_matrix, gram_matrix
from .trainer import _factor, _lml_grad_blocked, parameter_scales

log = logging.getLogger(__name__)

Z95 = 1.959964
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class OnlineConfig:
    """Streaming settings.

    ``windowed_prediction`` restricts the conditioning set of predictions to
    the trailing window too (by default predictions use the full history,
    capped at ``history_limit`` most recent observations).
    """

    window_hours: float = 72.0
    momentum: float = 0.9
    learning_rate: float = 1e-5
    history_limit: int = 1000
    windowed_prediction: bool = False
    freeze_threshold: float = 1e-3
    update: bool = True
    prior: shr.PriorConfig | None = field(default_factory=shr.PriorConfig)
    prior_sweeps: int = 50

    def __post_init__(self):
        if not self.window_hours > 0:
            raise DomainError("window_hours must be positive")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.learning_rate < 0 or self.history_limit < 1:
            raise DomainError("learning_rate must be non-negative and history_limit positive")


@dataclass(frozen=True)
class PredictionRecord:
    covariate: str
    time: float
    predicted_mean: float
    predicted_var: float
    actual: float
    in_95_region: bool

    @property
    def abs_error(self) -> float:
        return abs(self.predicted_mean - self.actual)


@dataclass(eq=False)
class OnlineState:
    """Patient-specific kernel (standardized units) plus optimizer memory.

    ``velocity`` and ``frozen_mask`` are aligned with the optimizer
    coordinates ``theta / parameter_scales(kernel)``.  ``window`` holds the
    ``(covariate, time, value)`` arrays of the trailing window.
    """

    kernel: StructuredKernel
    velocity: np.ndarray
    window: tuple[np.ndarray, np.ndarray, np.ndarray]
    frozen_mask: np.ndarray
    shrinkage: shr.ShrinkageState | None = None
    t_now: float = -math.inf
    skipped_updates: int = 0

    def copy(self) -> "OnlineState":
        return OnlineState(
            self.kernel.copy(),
            self.velocity.copy(),
            tuple(a.copy() for a in self.window),
            self.frozen_mask.copy(),
            self.shrinkage.copy() if self.shrinkage is not None else None,
            self.t_now,
            self.skipped_updates,
        )


def _empty_window():
    return np.empty(0, dtype=np.intp), np.empty(0), np.empty(0)


def init_state(kernel: StructuredKernel, cfg: OnlineConfig = OnlineConfig()) -> OnlineState:
    """Online state from a population kernel.

    Weight entries with magnitude at most ``cfg.freeze_threshold`` are set to
    exactly zero and frozen.  The shrinkage scales are the fixed point of the
    closed-form sweep at the population weights.
    """
    weights = []
    for w in kernel.weights:
        A = np.where(np.abs(w.A) <= cfg.freeze_threshold, 0.0, w.A)
        weights.append(type(w)(A, np.maximum(w.lam, 0.0)))
    k = StructuredKernel(list(kernel.basis), weights, kernel.noise_var.copy())
    mask = np.zeros(k.n_params, dtype=bool)
    a = k.block_slices()["A"]
    mask[a] = np.concatenate([w.A.ravel() == 0.0 for w in k.weights])
    state = None
    if cfg.prior is not None:
        state = shr.init_state(k)
        for _ in range(cfg.prior_sweeps):
            state = shr.closed_form_update(k, state, cfg.prior)
    return OnlineState(k, np.zeros(k.n_params), _empty_window(), mask, state)


# -- prediction --------------------------------------------------------------


def _flat(history):
    if history is None:
        return _empty_window()
    if isinstance(history, ObservationSet):
        return history.flatten()
    c, t, y = history
    return np.asarray(c, dtype=np.intp), np.asarray(t, dtype=float), np.asarray(y, dtype=float)


def posterior_predict(history, k: StructuredKernel, query) -> tuple[float, float]:
    """Predictive mean and variance (with noise) of one observation.

    ``query`` is an :class:`~smlmc.kernel.IndexedInput` or a
    ``(covariate, time)`` pair; ``history`` an :class:`ObservationSet` or a
    ``(covariate, time, value)`` triple, possibly empty.
    """
    qc, qt = (query.covariate, query.time) if hasattr(query, "covariate") else query
    qc, qt = int(qc), float(qt)
    if not 0 <= qc < k.D:
        raise DomainError("query covariate out of range")
    prior_var = float(sum(B[qc, qc] for B in k.B_all()) + k.noise_var[qc])
    c, t, y = _flat(history)
    if c.size == 0:
        return 0.0, max(prior_var, VAR_FLOOR)
    K = gram_matrix((c, t), k, with_noise=True)
    L, _ = cholesky_jitter(K)
    ks = cross_matrix((c, t), (np.array([qc]), np.array([qt])), k)[:, 0]
    alpha = scipy.linalg.cho_solve((L, True), y)
    v = scipy.linalg.solve_triangular(L, ks, lower=True)
    mean = float(ks @ alpha)
    var = prior_var - float(v @ v)
    return mean, max(var, VAR_FLOOR)


# -- momentum updating ---------------------------------------------------------


def momentum_update(state: OnlineState, cfg: OnlineConfig = OnlineConfig()) -> OnlineState:
    """One momentum step on the window objective; returns a new state.

    In optimizer coordinates ``u = theta / parameter_scales``:
    ``velocity <- momentum * velocity + learning_rate * grad_u`` and
    ``u <- u + velocity``.  Weights and lambdas have unit scale, so for them
    this is literally ``theta + learning_rate * grad``.  Noise variances and
    frozen weights get zero velocity; frozen weights stay exactly zero.
    Afterwards ``v``, ``mu`` and ``lambda`` are clipped at zero.  If the
    gradient cannot be computed the state is returned unchanged.
    """
    c, t, y = state.window
    if c.size == 0:
        raise DomainError("momentum_update needs a non-empty window")
    k = state.kernel
    s = parameter_scales(k)
    blocks = k.block_slices()
    try:
        f = _factor(c, t, y, k)
        g = _lml_grad_blocked(c, t, k, f)
        if cfg.prior is not None and state.shrinkage is not None:
            g = g + shr.log_prior_grad(k, state.shrinkage, cfg.prior)
    except NumericError as exc:
        log.warning("online update skipped at t=%.3f: %s", state.t_now, exc)
        out = state.copy()
        out.skipped_updates += 1
        return out
    g_u = g * s
    g_u[blocks["log_noise"]] = 0.0
    g_u[state.frozen_mask] = 0.0
    velocity = cfg.momentum * state.velocity + cfg.learning_rate * g_u
    velocity[state.frozen_mask] = 0.0
    velocity[blocks["log_noise"]] = 0.0
    theta = k.to_vector() + velocity * s
    theta[state.frozen_mask] = 0.0
    for name in ("mu", "v", "lam"):
        theta[blocks[name]] = np.maximum(theta[blocks[name]], 0.0)
    out = state.copy()
    new = k.with_vector(theta)
    out.kernel = StructuredKernel(new.basis, new.weights, k.noise_var.copy())
    out.velocity = velocity
    return out


def _append_window(state: OnlineState, c, t, y, hours: float) -> OnlineState:
    wc, wt, wy = state.window
    wc, wt, wy = np.append(wc, c), np.append(wt, t), np.append(wy, y)
    t_now = float(max(state.t_now, np.max(t)))
    keep = wt >= t_now - hours
    out = OnlineState(state.kernel, state.velocity, (wc[keep], wt[keep], wy[keep]), state.frozen_mask, state.shrinkage, t_now, state.skipped_updates)
    return out


# -- streaming -------------------------------------------------------------------


@dataclass
class Stream:
    """A time-ordered flat stream in original units."""

    covariate_names: list[str]
    c: np.ndarray
    t: np.ndarray
    y: np.ndarray

    @classmethod
    def of(cls, stream, names: Sequence[str] | None = None) -> "Stream":
        if isinstance(stream, Stream):
            return stream
        if isinstance(stream, ObservationSet):
            c, t, y = stream.flatten()
            return cls(list(stream.covariate_names), c, t, y)
        c, t, y = (np.asarray(a) for a in stream)
        c = c.astype(np.intp)
        t = t.astype(float)
        y = y.astype(float)
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise DomainError("stream must be sorted by time")
        if names is None:
            names = [f"X{d}" for d in range(int(c.max()) + 1 if c.size else 0)]
        for d in np.unique(c):
            td = t[c == d]
            if td.size > 1 and np.any(np.diff(td) <= 0):
                raise DomainError("a covariate has repeated timestamps")
        return cls(list(names), c, t, y)


def history_mask(t: np.ndarray, c: np.ndarray, i: int) -> np.ndarray:
    """Observations allowed when predicting observation ``i``.

    Strictly earlier ones, plus same-time observations of other covariates.
    """
    return (t < t[i]) | ((t == t[i]) & (c != c[i]))


AuditHook = Callable[[int, float, np.ndarray], None]


def run_online(
    stream,
    model,
    cfg: OnlineConfig = OnlineConfig(),
    mean=None,
    scale=None,
    audit: AuditHook | None = None,
    on_update: Callable[[OnlineState], None] | None = None,
) -> list[PredictionRecord]:
    """Stream one patient through the online predictor.

    ``model`` is a :class:`~smlmc.population.PopulationModel` or a
    :class:`StructuredKernel`; the standardization ``(mean, scale)`` defaults to
    the population model's (zero mean, unit scale for a bare kernel).
    Observations sharing a timestamp are predicted with the same kernel and
    then folded in one at a time.  ``audit(i, query_time, history_times)`` is
    called for every prediction with the conditioning set actually used, and
    ``on_update(state)`` after every kernel update.
    """
    s = Stream.of(stream)
    if hasattr(model, "to_kernel"):
        kernel = model.to_kernel()
        mean = model.mean if mean is None else mean
        scale = model.scale if scale is None else scale
    else:
        kernel = model
    D = kernel.D
    mean = np.zeros(D) if mean is None else np.asarray(mean, dtype=float)
    scale = np.ones(D) if scale is None else np.asarray(scale, dtype=float)
    if s.c.size and s.c.max() >= D:
        raise DomainError("stream has more covariates than the model")
    names = s.covariate_names if len(s.covariate_names) == D else [f"X{d}" for d in range(D)]
    z = (s.y - mean[s.c]) / scale[s.c]
    state = init_state(kernel, cfg)
    records: list[PredictionRecord] = []
    groups = np.unique(s.t)
    i = 0
    n = s.t.size
    for t_group in groups:
        idx = []
        while i < n and s.t[i] == t_group:
            idx.append(i)
            i += 1
        for j in idx:
            m = history_mask(s.t, s.c, j)
            if cfg.windowed_prediction:
                m &= s.t >= s.t[j] - cfg.window_hours
            hist = np.flatnonzero(m)
            if hist.size > cfg.history_limit:
                hist = hist[-cfg.history_limit :]
            if audit is not None:
                audit(j, float(s.t[j]), s.t[hist].copy())
            mu, var = posterior_predict((s.c[hist], s.t[hist], z[hist]), state.kernel, (s.c[j], s.t[j]))
            d = int(s.c[j])
            pm = mean[d] + scale[d] * mu
            pv = var * scale[d] ** 2
            records.append(PredictionRecord(names[d], float(s.t[j]), pm, pv, float(s.y[j]), abs(s.y[j] - pm) <= Z95 * math.sqrt(pv)))
        for j in idx:
            state = _append_window(state, s.c[j : j + 1], s.t[j : j + 1], z[j : j + 1], cfg.window_hours)
            if cfg.update:
                state = momentum_update(state, cfg)
                if on_update is not None:
                    on_update(state)
    run_online.last_state = state
    return records


def naive_one_lag(stream, prior_mean=None) -> list[PredictionRecord]:
    """Repeat the last earlier value of the same covariate.

    The first observation of a covariate is predicted by ``prior_mean[d]``
    (zero if not given).  Variances are NaN, so coverage is undefined.
    """
    s = Stream.of(stream)
    D = len(s.covariate_names)
    prior = np.zeros(D) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    last: dict[int, tuple[float, float]] = {}
    records = []
    for c, t, y in zip(s.c, s.t, s.y):
        c = int(c)
        prev = last.get(c)
        pred = prior[c] if prev is None else prev[1]
        records.append(PredictionRecord(s.covariate_names[c], float(t), float(pred), math.nan, float(y), False))
        last[c] = (t, y)
    return records


def run_independent(stream, kernels: Sequence[StructuredKernel], mean=None, scale=None) -> list[PredictionRecord]:
    """Univariate GP baseline: covariate ``d`` sees only its own earlier values under ``kernels[d]``."""
    s = Stream.of(stream)
    D = len(kernels)
    mean = np.zeros(D) if mean is None else np.asarray(mean, dtype=float)
    scale = np.ones(D) if scale is None else np.asarray(scale, dtype=float)
    records = []
    for j in range(s.t.size):
        d = int(s.c[j])
        m = (s.c == d) & (s.t < s.t[j])
        z = (s.y[m] - mean[d]) / scale[d]
        zeros = np.zeros(int(m.sum()), dtype=np.intp)
        mu, var = posterior_predict((zeros, s.t[m], z), kernels[d], (0, s.t[j]))
        pm = mean[d] + scale[d] * mu
        pv = var * scale[d] ** 2
        records.append(PredictionRecord(s.covariate_names[d], float(s.t[j]), pm, pv, float(s.y[j]), abs(s.y[j] - pm) <= Z95 * math.sqrt(pv)))
    return records


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class CovariateMetrics:
    n: int
    mae: float
    coverage95: float


def metrics(records: Sequence[PredictionRecord]) -> dict[str, CovariateMetrics]:
    """MAE and empirical 95% coverage per covariate (coverage NaN without variances)."""
    groups: dict[str, list[PredictionRecord]] = {}
    for r in records:
        groups.setdefault(r.covariate, []).append(r)
    out = {}
    for name, rs in groups.items():
        err = np.array([r.abs_error for r in rs])
        var = np.array([r.predicted_var for r in rs])
        if np.all(np.isfinite(var)):
            cov = float(np.mean([r.in_95_region for r in rs]))
        elif np.any(np.isposinf(var)) and not np.any(np.isnan(var)):
            cov = float(np.mean([r.in_95_region or math.isinf(r.predicted_var) for r in rs]))
        else:
            cov = math.nan
        out[name] = CovariateMetrics(len(rs), float(err.mean()), cov)
    return out


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    degenerate: bool = False
    threshold: float = 0.05


def paired_t_test(errors_a, errors_b, n_comparisons: int = 1, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test with a Bonferroni threshold ``alpha / n_comparisons``."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DomainError("paired samples must be 1-D, of equal length and at least 2 long")
    if n_comparisons < 1:
        raise DomainError("n_comparisons must be at least 1")
    threshold = alpha / n_comparisons
    diff = a - b
    n = diff.size
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0:
        if np.all(diff == 0):
            return TTestResult(0.0, 1.0, False, False, threshold)
        t = math.copysign(math.inf, float(diff[0]))
        return TTestResult(t, 0.0, True, True, threshold)
    t = float(diff.mean()) / (sd / math.sqrt(n))
    p = float(2.0 * scipy.stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t, p, p < threshold, False, threshold)
