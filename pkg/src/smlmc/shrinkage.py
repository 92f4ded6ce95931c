"""Hierarchical-gamma shrinkage prior on the coregionalization factors.

Each element of ``A_q`` gets the four-layer hierarchy (shape/rate gammas)::

    tau_{q,r}      ~ Gamma(d, eta)
    phi_{q,r}      ~ Gamma(gamma, tau_{q,r})
    delta_{q,d,r}  ~ Gamma(beta, phi_{q,r})
    psi_{q,d,r}    ~ Gamma(alpha, delta_{q,d,r})
    a_{q,d,r}      ~ N(0, psi_{q,d,r})

and each ``lambda_{q,d}`` a Laplace(0, beta_lambda) prior.  With all shape
parameters at 0.5 both layers behave like horseshoe priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.special

from .errors import DomainError
from .kernel import StructuredKernel

FLOOR = 1e-10


@dataclass(frozen=True)
class PriorConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    d: float = 0.5
    eta: float = 0.1
    beta_lambda: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "d", "eta", "beta_lambda"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value > 0 and math.isfinite(value)):
                raise DomainError(f"prior parameter {name} must be a positive number, got {value!r}")


@dataclass(eq=False)
class ShrinkageState:
    """Latent scales; ``psi``/``delta`` are per element (D x R_q), ``phi``/``tau`` per column."""

    psi: list[np.ndarray]
    delta: list[np.ndarray]
    phi: list[np.ndarray]
    tau: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "ShrinkageState":
        return ShrinkageState(
            [x.copy() for x in self.psi],
            [x.copy() for x in self.delta],
            [x.copy() for x in self.phi],
            [x.copy() for x in self.tau],
        )

    def validate(self):
        for group in (self.psi, self.delta, self.phi, self.tau):
            for x in group:
                if np.any(~(x > 0)) or not np.all(np.isfinite(x)):
                    raise DomainError("shrinkage scales must be finite and strictly positive")


def init_state(kernel: StructuredKernel) -> ShrinkageState:
    """Unit scales everywhere; the first closed-form update moves them."""
    psi = [np.ones_like(w.A) for w in kernel.weights]
    delta = [np.ones_like(w.A) for w in kernel.weights]
    phi = [np.ones(w.R) for w in kernel.weights]
    tau = [np.ones(w.R) for w in kernel.weights]
    return ShrinkageState(psi, delta, phi, tau)


# -- closed-form conditional updates ---------------------------------------


def update_psi(a, delta, cfg: PriorConfig):
    """Mode of the generalized-inverse-Gaussian conditional of psi."""
    a = np.asarray(a, dtype=float)
    delta = np.asarray(delta, dtype=float)
    c = 2.0 * cfg.alpha - 3.0
    psi = (c + np.sqrt(c * c + 8.0 * a * a * delta)) / (4.0 * delta)
    return np.maximum(psi, FLOOR)


def update_delta(psi, phi, cfg: PriorConfig):
    """Mean of the Gamma(alpha + beta, psi + phi) conditional."""
    return (cfg.alpha + cfg.beta) / (np.asarray(psi, dtype=float) + np.asarray(phi, dtype=float))


def update_phi(delta_sum, tau, D: int, cfg: PriorConfig):
    """Mode of the Gamma(D beta + gamma, sum_d delta + tau) conditional."""
    phi = (D * cfg.beta + cfg.gamma - 1.0) / (np.asarray(delta_sum, dtype=float) + np.asarray(tau, dtype=float))
    return np.maximum(phi, FLOOR)


def update_tau(phi, cfg: PriorConfig):
    """Mean of the Gamma(gamma + d, phi + eta) conditional."""
    return (cfg.gamma + cfg.d) / (np.asarray(phi, dtype=float) + cfg.eta)


def closed_form_update(kernel: StructuredKernel, state: ShrinkageState, cfg: PriorConfig) -> ShrinkageState:
    """One sweep psi -> delta -> phi -> tau, each given the freshest values."""
    D = kernel.D
    psi, delta, phi, tau = [], [], [], []
    for w, d_old, phi_old, tau_old in zip(kernel.weights, state.delta, state.phi, state.tau):
        p = update_psi(w.A, d_old, cfg)
        dl = update_delta(p, phi_old[None, :], cfg)
        ph = update_phi(dl.sum(axis=0), tau_old, D, cfg)
        ta = update_tau(ph, cfg)
        psi.append(p)
        delta.append(dl)
        phi.append(ph)
        tau.append(ta)
    return ShrinkageState(psi, delta, phi, tau)


# -- log densities ---------------------------------------------------------


def log_prior(kernel: StructuredKernel, state: ShrinkageState, cfg: PriorConfig) -> float:
    """All prior terms of the training objective (additive constants as written there).

    The Gaussian term on ``a`` omits its ``-log(2 pi)/2`` constant and the gamma
    terms omit their ``log Gamma`` normalizers; none of these depend on any
    optimized quantity.
    """
    state.validate()
    total = 0.0
    for w, psi, delta, phi, tau in zip(kernel.weights, state.psi, state.delta, state.phi, state.tau):
        a = w.A
        total += np.sum(-0.5 * np.log(psi) - a * a / (2.0 * psi))
        total += np.sum(cfg.alpha * np.log(delta) + (cfg.alpha - 1.0) * np.log(psi) - delta * psi)
        total += np.sum(cfg.beta * np.log(phi)[None, :] + (cfg.beta - 1.0) * np.log(delta) - phi[None, :] * delta)
        total += np.sum(cfg.gamma * np.log(tau) + (cfg.gamma - 1.0) * np.log(phi) - tau * phi)
        total += np.sum(cfg.d * math.log(cfg.eta) + (cfg.d - 1.0) * np.log(tau) - cfg.eta * tau)
        total += np.sum(-math.log(2.0 * cfg.beta_lambda) - np.abs(w.lam) / cfg.beta_lambda)
    return float(total)


def log_prior_grad(kernel: StructuredKernel, state: ShrinkageState, cfg: PriorConfig) -> np.ndarray:
    """Gradient of :func:`log_prior` in the kernel parameter-vector layout.

    Only ``a`` (``-a / psi``) and ``lambda`` (``-sign(lambda) / beta_lambda``)
    have prior terms; mu, v and the log noise variances are flat.
    """
    g = np.zeros(kernel.n_params)
    s = kernel.block_slices()
    g[s["A"]] = np.concatenate([(-w.A / psi).ravel() for w, psi in zip(kernel.weights, state.psi)])
    g[s["lam"]] = np.concatenate([-np.sign(w.lam) / cfg.beta_lambda for w in kernel.weights])
    return g


def collapsed_log_prior(kernel: StructuredKernel, state: ShrinkageState, cfg: PriorConfig) -> float:
    """Log prior with ``delta`` and ``tau`` integrated out (normalizers included).

    The closed-form sweep is an expectation/conditional-maximization scheme for
    this quantity: the delta and tau updates are E-steps and the psi and phi
    updates are M-steps, so alternating them with an ascent step on the kernel
    parameters never decreases ``log_marginal_likelihood + collapsed_log_prior``.
    """
    al, be, ga, dd, eta = cfg.alpha, cfg.beta, cfg.gamma, cfg.d, cfg.eta
    c_psi = scipy.special.gammaln(al + be) - scipy.special.gammaln(al) - scipy.special.gammaln(be)
    c_phi = scipy.special.gammaln(ga + dd) - scipy.special.gammaln(ga) - scipy.special.gammaln(dd)
    total = 0.0
    for w, psi, phi in zip(kernel.weights, state.psi, state.phi):
        a = w.A
        total += np.sum(-0.5 * np.log(2.0 * math.pi * psi) - a * a / (2.0 * psi))
        ph = phi[None, :]
        total += np.sum(c_psi + (al - 1.0) * np.log(psi) + be * np.log(ph) - (al + be) * np.log(psi + ph))
        total += np.sum(c_phi + (ga - 1.0) * np.log(phi) + dd * math.log(eta) - (ga + dd) * np.log(phi + eta))
        total += np.sum(-math.log(2.0 * cfg.beta_lambda) - np.abs(w.lam) / cfg.beta_lambda)
    return float(total)


# -- three-parameter beta --------------------------------------------------


def tpb_density(rho, alpha: float, beta: float, nu: float):
    """Density of the three-parameter beta distribution TPB(alpha, beta, nu)."""
    rho = np.asarray(rho, dtype=float)
    if np.any((rho <= 0) | (rho >= 1)):
        raise DomainError("tpb_density is defined on the open interval (0, 1)")
    if not (alpha > 0 and beta > 0 and nu > 0):
        raise DomainError("TPB parameters must be positive")
    log_c = scipy.special.gammaln(alpha + beta) - scipy.special.gammaln(alpha) - scipy.special.gammaln(beta)
    log_f = (
        log_c
        + beta * math.log(nu)
        + (beta - 1.0) * np.log(rho)
        + (alpha - 1.0) * np.log1p(-rho)
        - (alpha + beta) * np.log1p((nu - 1.0) * rho)
    )
    return np.exp(log_f)


def tpb_cdf(rho, alpha: float, beta: float, nu: float, n_grid: int = 4000):
    """CDF of TPB by quadrature of :func:`tpb_density`.

    Integrates in ``u`` with ``rho = sin^2(pi u / 2)``, which removes the
    endpoint singularities, using 8-point Gauss-Legendre on each grid cell,
    then interpolates linearly in ``u``.
    """
    rho = np.asarray(rho, dtype=float)
    edges = np.linspace(0.0, 1.0, n_grid + 1)
    nodes, wts = np.polynomial.legendre.leggauss(8)
    lo, hi = edges[:-1, None], edges[1:, None]
    u = 0.5 * (hi - lo) * nodes[None, :] + 0.5 * (hi + lo)
    s, c = np.sin(0.5 * math.pi * u), np.cos(0.5 * math.pi * u)
    r = np.clip(s * s, 1e-300, 1.0 - 1e-16)
    jac = math.pi * s * c
    cell = 0.5 * (hi - lo)[:, 0] * np.sum(wts[None, :] * tpb_density(r, alpha, beta, nu) * jac, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(cell)])
    u_q = 2.0 / math.pi * np.arcsin(np.sqrt(np.clip(rho, 0.0, 1.0)))
    return np.interp(u_q, edges, cum)


def tpb_mass(alpha: float, beta: float, nu: float) -> float:
    """Total mass of :func:`tpb_density` over (0, 1) by adaptive quadrature."""
    f = lambda u: float(
        tpb_density(math.sin(0.5 * math.pi * u) ** 2, alpha, beta, nu)
        * math.pi
        * math.sin(0.5 * math.pi * u)
        * math.cos(0.5 * math.pi * u)
    )
    value, _ = scipy.integrate.quad(f, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12, limit=200)
    return value


def sample_two_layer(alpha: float, beta: float, nu: float, n: int, seed=None, return_psi: bool = False):
    """Draw ``x ~ N(0, psi)``, ``psi ~ Gamma(alpha, delta)``, ``delta ~ Gamma(beta, nu)``.

    Gammas are shape/rate.  With ``return_psi`` the variances are returned too,
    so the implied shrinkage ``1 / (1 + psi)`` can be checked against TPB.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = np.random.default_rng(seed)
    delta = rng.gamma(beta, 1.0 / nu, size=n)
    psi = rng.gamma(alpha, 1.0, size=n) / delta
    x = rng.standard_normal(n) * np.sqrt(psi)
    return (x, psi) if return_psi else x
