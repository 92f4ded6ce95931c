"""Population-level kernels from a cohort of per-patient fits.

Every nonzero basis kernel of every patient is summarized by its values at
lags of 1..72 hours.  These features are clustered with a Gaussian mixture
whose size is picked by BIC.  Within a cluster, each patient's weight
matrices are summed, and every scalar parameter is then summarized across
patients by a KDE-density-weighted mean.  Finally the aggregated weight
matrices are factored back into low-rank-plus-diagonal form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.decomposition import PCA
from sklearn.mixture import GaussianMixture

from .errors import DomainError, PopulationError
from .kernel import (
    BasisKernelParams,
    CoregionalizationWeights,
    StructuredKernel,
    characteristic_features,
    sm_basis_kernel,
)

log = logging.getLogger(__name__)

FEATURE_LAGS = np.arange(1, 73, dtype=float)
ZERO_NORM = 1e-3
SILVERMAN = 0.9


@dataclass(frozen=True)
class KernelFeature:
    values: np.ndarray
    source: tuple[str, int] = ("", 0)


def kernel_features(params: BasisKernelParams, source: tuple[str, int] = ("", 0)) -> KernelFeature:
    """The basis kernel evaluated at lags 1, 2, ..., 72 hours."""
    return KernelFeature(sm_basis_kernel(FEATURE_LAGS, params), source)


# -- clustering ----------------------------------------------------------------


@dataclass(frozen=True)
class ClusterConfig:
    """GMM settings.

    The raw 72-dimensional features are first projected onto their leading
    principal components (enough to explain ``pca_variance`` of the variance,
    at most ``pca_max_dims``): with a few dozen kernels a full covariance in
    72 dimensions is never supported by BIC.  ``reg_covar`` is added to each
    component covariance; the default corresponds to a resolution of 0.01
    per lag, summed over the 72 lags.
    """

    Q_max: int = 5
    n_init: int = 10
    max_iter: int = 2000
    pca_variance: float = 0.99
    pca_max_dims: int = 5
    reg_covar: float = 72 * 1e-4

    def __post_init__(self):
        if self.Q_max < 1 or self.n_init < 1 or self.max_iter < 1 or self.pca_max_dims < 1:
            raise DomainError("cluster counts must be at least 1")
        if not (0 < self.pca_variance <= 1) or self.reg_covar < 0:
            raise DomainError("invalid PCA variance or covariance floor")


@dataclass
class ClusterResult:
    labels: np.ndarray
    Q_prime: int
    bic: dict[int, float]


def _project(X: np.ndarray, cfg: ClusterConfig, seed) -> np.ndarray:
    n, p = X.shape
    max_dims = min(cfg.pca_max_dims, n - 1, p)
    if max_dims < 1:
        return X[:, :0]
    pca = PCA(n_components=max_dims, svd_solver="full", random_state=seed).fit(X)
    cum = np.cumsum(pca.explained_variance_ratio_)
    k = int(np.searchsorted(cum, cfg.pca_variance - 1e-12) + 1)
    k = max(1, min(k, max_dims))
    return pca.transform(X)[:, :k]


def gmm_cluster_bic(features: Sequence[KernelFeature], Q_max: int = 5, seed=0, cfg: ClusterConfig | None = None) -> ClusterResult:
    """Cluster kernel features with full-covariance GMMs, choosing the size by BIC.

    Sizes ``k = 1..Q_max`` are tried (sizes larger than the number of
    features are skipped), each with ``n_init`` EM restarts.  Labels are the
    maximum-responsibility components, renumbered by first appearance so the
    partition does not depend on component order.
    """
    cfg = cfg or ClusterConfig(Q_max=Q_max)
    if len(features) == 0:
        raise DomainError("need at least one kernel feature")
    if Q_max < 1:
        raise DomainError("Q_max must be at least 1")
    X = np.vstack([np.asarray(f.values if isinstance(f, KernelFeature) else f, dtype=float) for f in features])
    n = X.shape[0]
    if n == 1 or np.allclose(X, X[0], rtol=0, atol=1e-12):
        return ClusterResult(np.zeros(n, dtype=int), 1, {1: math.nan})
    Z = _project(X, cfg, seed)
    if Z.shape[1] == 0:
        return ClusterResult(np.zeros(n, dtype=int), 1, {1: math.nan})
    bic: dict[int, float] = {}
    models = {}
    for k in range(1, Q_max + 1):
        if k > n:
            log.debug("skipping %d components for %d features", k, n)
            continue
        gmm = GaussianMixture(
            n_components=k,
            covariance_type="full",
            n_init=cfg.n_init,
            max_iter=cfg.max_iter,
            reg_covar=cfg.reg_covar,
            random_state=seed,
        ).fit(Z)
        bic[k] = float(gmm.bic(Z))
        models[k] = gmm
    best = min(bic, key=lambda k: (bic[k], k))
    raw = models[best].predict(Z)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=int)
    remap[np.unique(raw)[order]] = np.arange(order.size)
    labels = remap[np.searchsorted(np.unique(raw), raw)]
    return ClusterResult(labels, int(labels.max()) + 1, bic)


# -- kernel density summaries --------------------------------------------------


@dataclass(frozen=True)
class GaussianKDE:
    samples: np.ndarray
    bandwidth: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        u = (x[..., None] - self.samples) / self.bandwidth
        return np.exp(-0.5 * u * u).sum(axis=-1) / (self.samples.size * self.bandwidth * math.sqrt(2 * math.pi))


def _samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise DomainError("need at least one sample")
    if not np.all(np.isfinite(x)):
        raise DomainError("samples must be finite")
    return x


def silverman_bandwidth(samples) -> float:
    """``0.9 min(sd, IQR / 1.34) n^(-1/5)``, with a small fallback for no spread."""
    x = _samples(samples)
    n = x.size
    if n > 1:
        sd = float(np.std(x, ddof=1))
        q75, q25 = np.percentile(x, [75, 25])
        iqr = (q75 - q25) / 1.34
        spread = min(sd, iqr) if iqr > 0 else sd
        h = SILVERMAN * spread * n ** (-0.2)
        if h > 0:
            return h
    return max(1e-3 * abs(float(x[0])), 1e-6)


def kde_silverman(samples) -> GaussianKDE:
    x = _samples(samples)
    return GaussianKDE(x.copy(), silverman_bandwidth(x))


def density_weighted_mean(samples) -> float:
    """Mean of the samples weighted by their own KDE density."""
    x = _samples(samples)
    if np.all(x == x[0]):
        return float(x[0])
    w = kde_silverman(x)(x)
    return float(np.sum(w * x) / np.sum(w))


def grid_mode_search(samples, grid: int = 1000) -> float:
    """Argmax of the KDE over a uniform grid on ``[min, max]``; ties go to the lower abscissa."""
    if grid < 2:
        raise DomainError("grid must have at least two points")
    x = _samples(samples)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return lo
    xs = np.linspace(lo, hi, grid)
    dens = kde_silverman(x)(xs)
    return float(xs[int(np.argmax(dens))])


# -- aggregation -----------------------------------------------------------------


@dataclass
class ClusterMember:
    patient: str
    q: int
    B: np.ndarray
    params: BasisKernelParams
    label: int = 0


def aggregate_cluster(members: Sequence[ClusterMember]) -> tuple[np.ndarray, BasisKernelParams]:
    """Population B and basis parameters of one cluster.

    A patient's members are summed into one weight matrix (their kernels
    share a cluster and add); the cluster's B and its frequency and spectral
    variance are then entrywise density-weighted means across patients.
    The per-patient frequency and variance are the means over that patient's
    members.
    """
    if not members:
        raise DomainError("cannot aggregate an empty cluster")
    per_patient: dict[str, list[ClusterMember]] = {}
    for m in members:
        per_patient.setdefault(m.patient, []).append(m)
    patients = sorted(per_patient)
    Bs = np.stack([sum(m.B for m in per_patient[p]) for p in patients])
    mus = np.array([np.mean([abs(m.params.mu) for m in per_patient[p]]) for p in patients])
    vs = np.array([np.mean([m.params.v for m in per_patient[p]]) for p in patients])
    D = Bs.shape[1]
    B = np.empty((D, D))
    for i in range(D):
        for j in range(i, D):
            B[i, j] = B[j, i] = density_weighted_mean(Bs[:, i, j])
    return B, BasisKernelParams(density_weighted_mean(mus), max(density_weighted_mean(vs), 0.0))


def decompose_B(B: np.ndarray, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Factor a symmetric ``B`` as ``A A^T + diag(lambda)`` with ``A`` of rank ``R``.

    ``A`` holds the top-``R`` eigenvectors scaled by the square roots of their
    (clipped) eigenvalues; each column is signed so its largest-magnitude
    entry is positive.  ``lambda`` is the clipped diagonal residual.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise DomainError("B must be square")
    if not np.allclose(B, B.T, rtol=1e-10, atol=1e-12 * max(1.0, float(np.abs(B).max()))):
        raise DomainError("B must be symmetric")
    D = B.shape[0]
    if not 1 <= R <= D:
        raise DomainError(f"R must lie in [1, {D}]")
    e, U = np.linalg.eigh(0.5 * (B + B.T))
    idx = np.argsort(e)[::-1][:R]
    A = U[:, idx] * np.sqrt(np.maximum(e[idx], 0.0))
    for r in range(R):
        j = int(np.argmax(np.abs(A[:, r])))
        if A[j, r] < 0:
            A[:, r] = -A[:, r]
    lam = np.maximum(0.0, np.diag(B - A @ A.T))
    return A, lam


# -- population model ----------------------------------------------------------


@dataclass
class PopulationCluster:
    params: BasisKernelParams
    B: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    member_count: int
    coverage: float


@dataclass(eq=False)
class PopulationModel:
    clusters: list[PopulationCluster]
    noise_var: np.ndarray
    covariate_names: list[str]
    mean: np.ndarray
    scale: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def Q_prime(self) -> int:
        return len(self.clusters)

    def to_kernel(self) -> StructuredKernel:
        """The population prior as a kernel (standardized units, lambda clipped at 0)."""
        return StructuredKernel(
            [c.params for c in self.clusters],
            [CoregionalizationWeights(c.A.copy(), np.maximum(c.lam, 0.0)) for c in self.clusters],
            self.noise_var.copy(),
        )

    def frozen_mask(self, threshold: float = ZERO_NORM) -> list[np.ndarray]:
        return [np.abs(c.A) <= threshold for c in self.clusters]


@dataclass(frozen=True)
class PopulationConfig:
    R: int | None = None
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    zero_norm: float = ZERO_NORM


def build_population_model(fits, cfg: PopulationConfig = PopulationConfig(), seed=0) -> PopulationModel:
    """Cluster and aggregate the nonzero basis kernels of per-patient fits.

    ``fits`` holds :class:`trainer.FitResult` objects (anything with
    ``kernel``, ``patient_id``, ``mean`` and ``scale`` works).  Patients
    are processed in sorted id order, so the result does not depend on the
    order of ``fits``.  The population's standardization for new patients is
    the density-weighted mean of the per-patient means and scales.
    """
    fits = sorted(fits, key=lambda f: f.patient_id)
    if not fits:
        raise DomainError("need at least one fitted patient")
    names = list(fits[0].covariate_names)
    D = fits[0].kernel.D
    if any(f.kernel.D != D for f in fits):
        raise DomainError("all fits must have the same number of covariates")
    ids = [f.patient_id for f in fits]
    if len(set(ids)) != len(ids):
        raise DomainError("patient ids must be unique")

    members: list[ClusterMember] = []
    for f in fits:
        for q, (p, B) in enumerate(zip(f.kernel.basis, f.kernel.B_all())):
            if np.linalg.norm(B) >= cfg.zero_norm:
                members.append(ClusterMember(f.patient_id, q, B, p))
    if not members:
        raise PopulationError("every fitted basis kernel has a near-zero weight matrix")

    Q_max = max(f.kernel.Q for f in fits)
    feats = [kernel_features(m.params, (m.patient, m.q)) for m in members]
    ccfg = ClusterConfig(**{**cfg.cluster.__dict__, "Q_max": min(Q_max, cfg.cluster.Q_max) if cfg.cluster.Q_max else Q_max})
    result = gmm_cluster_bic(feats, ccfg.Q_max, seed, ccfg)
    for m, lab in zip(members, result.labels):
        m.label = int(lab)

    R = cfg.R or D
    clusters = []
    for lab in range(result.Q_prime):
        group = [m for m in members if m.label == lab]
        B, params = aggregate_cluster(group)
        A, lam = decompose_B(B, min(R, D))
        patients = {m.patient for m in group}
        clusters.append(PopulationCluster(params, B, A, lam, len(group), len(patients) / len(fits)))
    # longest-period / smoothest first for a stable order
    clusters.sort(key=lambda c: (abs(c.params.mu), c.params.v))

    stack = lambda xs: np.array([density_weighted_mean(col) for col in np.asarray(xs).T])
    noise = stack([f.kernel.noise_var for f in fits])
    mean = stack([f.mean for f in fits])
    scale = stack([f.scale for f in fits])
    provenance = {
        "n_patients": len(fits),
        "n_kernels": len(members),
        "bic": {str(k): v for k, v in result.bic.items()},
        "gmm": {k: v for k, v in ccfg.__dict__.items()},
        "kde": "gaussian, bandwidth 0.9 min(sd, IQR/1.34) n^-1/5",
        "seed": seed,
    }
    return PopulationModel(clusters, noise, names, mean, scale, provenance)


def univariate_population(fits, grid: int = 1000) -> list[StructuredKernel]:
    """Per-covariate single-output kernels for the independent-GP baseline.

    ``fits[d]`` are univariate fits of covariate ``d`` (one basis kernel
    each); every parameter is summarized by the mode of its KDE.
    """
    out = []
    for group in fits:
        ks = [f.kernel for f in group]
        mu = grid_mode_search([abs(k.basis[0].mu) for k in ks], grid)
        v = grid_mode_search([k.basis[0].v for k in ks], grid)
        b = grid_mode_search([k.B(0)[0, 0] for k in ks], grid)
        noise = grid_mode_search([k.noise_var[0] for k in ks], grid)
        out.append(
            StructuredKernel(
                [BasisKernelParams(mu, max(v, 0.0))],
                [CoregionalizationWeights(np.zeros((1, 1)), np.array([max(b, 1e-6)]))],
                np.array([max(noise, 1e-6)]),
            )
        )
    return out


def describe(model: PopulationModel) -> list[dict]:
    rows = []
    for c in model.clusters:
        period, length = characteristic_features(c.params)
        rows.append({"period_h": period, "length_scale_h": length, "members": c.member_count, "coverage": c.coverage})
    return rows
