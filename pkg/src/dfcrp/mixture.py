"""Likelihood and parameter updates for the Gaussian cluster model.

Each cluster carries a 3-dimensional Gaussian over (x, y, log diameter)
with a structured covariance: one shared spatial variance, a log-diameter
variance, and a common coordinate-diameter covariance,

    [[var_x, 0,      cov_xd],
     [0,     var_x,  cov_xd],
     [cov_xd, cov_xd, var_d]].

The variances get Gamma priors whose means follow a power law in the
cluster log diameter; the covariance is a scaled-Beta fraction of its
positive-semi-definite maximum ``sqrt(var_x * var_d / 2)``.  Cluster
means are conditionally conjugate Gaussians; the covariance components
and the concentration parameter are updated by Metropolis kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import LOG_DIAMETER_FLOOR, Hyperparams
from .partition import NEG_INF, dfcrp_joint_logprob

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Annotation:
    """One marked object: annotator id plus (x, y, log diameter) features."""

    family: int
    x: float
    y: float
    ld: float

    @property
    def features(self) -> np.ndarray:
        return np.array([self.x, self.y, self.ld], dtype=float)


def features_matrix(data) -> np.ndarray:
    """(n, 3) float array from Annotation sequences or array-likes."""
    if len(data) and isinstance(data[0], Annotation):
        return np.array([[a.x, a.y, a.ld] for a in data], dtype=float)
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (n, 3) feature data, got shape {arr.shape}")
    return arr


def family_vector(data: Sequence[Annotation]) -> np.ndarray:
    return np.array([a.family for a in data], dtype=np.int64)


@dataclass(frozen=True)
class ClusterCovariance:
    """Structured covariance components (var_x, var_d, cov_xd).

    ``ratio`` is the covariance expressed as a fraction of its PSD
    maximum; the assembled matrix is positive semi-definite exactly when
    ``|ratio| <= 1`` (the determinant is ``var_x**2 * var_d *
    (1 - ratio**2)``).
    """

    var_x: float
    var_d: float
    cov_xd: float

    @property
    def ratio(self) -> float:
        return self.cov_xd / math.sqrt(self.var_x * self.var_d / 2.0)

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.var_x, 0.0, self.cov_xd],
                [0.0, self.var_x, self.cov_xd],
                [self.cov_xd, self.cov_xd, self.var_d],
            ]
        )

    def is_valid(self) -> bool:
        return (
            self.var_x > 0
            and self.var_d > 0
            and 2.0 * self.cov_xd**2 <= self.var_x * self.var_d
        )

    def log_det(self) -> float:
        det = self.var_x * (self.var_x * self.var_d - 2.0 * self.cov_xd**2)
        if det <= 0:
            raise np.linalg.LinAlgError("covariance is not positive definite")
        return math.log(det)

    def precision(self) -> np.ndarray:
        a, d, c = self.var_x, self.var_d, self.cov_xd
        det = a * (a * d - 2.0 * c * c)
        if det <= 0:
            raise np.linalg.LinAlgError("covariance is not positive definite")
        adj = np.array(
            [
                [a * d - c * c, c * c, -a * c],
                [c * c, a * d - c * c, -a * c],
                [-a * c, -a * c, a * a],
            ]
        )
        return adj / det


@dataclass(frozen=True)
class ClusterParams:
    """Mean vector and structured covariance of one cluster."""

    mu: np.ndarray
    cov: ClusterCovariance

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.shape != (3,) or not np.all(np.isfinite(mu)):
            raise ValueError("mu must be a finite 3-vector")
        object.__setattr__(self, "mu", mu)


def mvn_logpdf(y, params: ClusterParams) -> float:
    """Gaussian log density of a 3-vector under a cluster's parameters.

    Raises ``numpy.linalg.LinAlgError`` when the covariance is singular
    or not positive definite.
    """
    y = np.asarray(y, dtype=float)
    diff = y - params.mu
    prec = params.cov.precision()
    quad = float(diff @ prec @ diff)
    return -0.5 * (3.0 * LOG_2PI + params.cov.log_det() + quad)


def _gamma_logpdf(v: float, shape: float, rate: float) -> float:
    if v <= 0:
        return NEG_INF
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(v) - rate * v


def _scaled_beta_logpdf(lam: float, a: float, b: float) -> float:
    # density of 2*Beta(a, b) - 1 on (-1, 1)
    if not -1.0 < lam < 1.0:
        return NEG_INF
    t = (lam + 1.0) / 2.0
    logbeta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return (a - 1.0) * math.log(t) + (b - 1.0) * math.log(1.0 - t) - logbeta - math.log(2.0)


def covariance_prior_logpdf(cov: ClusterCovariance, ld: float, h: Hyperparams) -> float:
    """Prior log density of the covariance components at log diameter ``ld``.

    Sum of the two Gamma densities on the variances, the scaled-Beta
    density at the implied covariance ratio, and the change-of-variables
    term from the ratio to ``cov_xd``.  Returns ``-inf`` outside the
    valid region (non-positive variance or ratio beyond +/-1).
    """
    if not ld > 0:
        raise ValueError(f"log diameter must be positive, got {ld}")
    if cov.var_x <= 0 or cov.var_d <= 0:
        return NEG_INF
    scale_max = math.sqrt(cov.var_x * cov.var_d / 2.0)
    lam = cov.cov_xd / scale_max
    if not -1.0 < lam < 1.0:
        return NEG_INF
    logp = _gamma_logpdf(cov.var_x, h.tau_x * h.kappa_x * ld**h.eta_x, h.tau_x)
    logp += _gamma_logpdf(cov.var_d, h.tau_d * h.kappa_d * ld**h.eta_d, h.tau_d)
    logp += _scaled_beta_logpdf(lam, h.a_lambda, h.b_lambda)
    logp -= math.log(scale_max)
    return logp


def sample_covariance_prior(
    ld: float, h: Hyperparams, rng: np.random.Generator
) -> ClusterCovariance:
    """Draw covariance components from their prior at log diameter ``ld``."""
    if not ld > 0:
        raise ValueError(f"log diameter must be positive, got {ld}")
    var_x = rng.gamma(h.tau_x * h.kappa_x * ld**h.eta_x, 1.0 / h.tau_x)
    var_d = rng.gamma(h.tau_d * h.kappa_d * ld**h.eta_d, 1.0 / h.tau_d)
    lam = 2.0 * rng.beta(h.a_lambda, h.b_lambda) - 1.0
    cov_xd = lam * math.sqrt(var_x * var_d / 2.0)
    return ClusterCovariance(var_x, var_d, cov_xd)


def sample_mu_posterior(
    cluster_data,
    cov: ClusterCovariance,
    h: Hyperparams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw a cluster mean from its conjugate Gaussian full conditional.

    The posterior covariance is ``(Sigma0^-1 + n_k Sigma_k^-1)^-1`` and
    the posterior mean weights the prior mean and the cluster data mean
    by their precisions.  With no data the draw comes from the prior.
    """
    rows = features_matrix(cluster_data) if len(cluster_data) else np.empty((0, 3))
    n_k = rows.shape[0]
    prior_prec = np.diag(1.0 / np.asarray(h.sigma0_diag))
    if n_k == 0:
        post_cov = h.sigma0_matrix
        post_mean = h.mu0_array
    else:
        prec_k = cov.precision()
        post_prec = prior_prec + n_k * prec_k
        post_cov = np.linalg.inv(post_prec)
        ybar = rows.mean(axis=0)
        post_mean = post_cov @ (prior_prec @ h.mu0_array + n_k * prec_k @ ybar)
    chol = np.linalg.cholesky(post_cov)
    return post_mean + chol @ rng.standard_normal(3)


def metropolis_covariance_step(
    cluster_data,
    current: ClusterCovariance,
    mu,
    ld: float,
    h: Hyperparams,
    rng: np.random.Generator,
) -> ClusterCovariance:
    """One Metropolis update of the covariance components.

    Proposes a symmetric Gaussian step with diagonal variances
    ``h.s_proposal`` on (var_x, var_d, cov_xd) and targets the prior
    times the cluster likelihood at the current mean.  Invalid proposals
    (outside the PSD region) are rejected.
    """
    mu = np.asarray(mu, dtype=float)
    rows = features_matrix(cluster_data) if len(cluster_data) else np.empty((0, 3))

    def log_target(cov: ClusterCovariance) -> float:
        if not cov.is_valid() or not -1.0 < cov.ratio < 1.0:
            return NEG_INF
        logp = covariance_prior_logpdf(cov, ld, h)
        if logp == NEG_INF or rows.shape[0] == 0:
            return logp
        params = ClusterParams(mu, cov)
        return logp + sum(mvn_logpdf(row, params) for row in rows)

    step = rng.standard_normal(3) * np.sqrt(h.s_proposal)
    proposed = ClusterCovariance(
        current.var_x + step[0], current.var_d + step[1], current.cov_xd + step[2]
    )
    delta = log_target(proposed) - log_target(current)
    if delta >= 0 or rng.random() < math.exp(delta):
        return proposed
    return current


def _lognormal_logpdf(v: float, mu_log: float, sd_log: float) -> float:
    if v <= 0:
        return NEG_INF
    z = (math.log(v) - mu_log) / sd_log
    return -math.log(v) - math.log(sd_log) - 0.5 * LOG_2PI - 0.5 * z * z


def alpha_log_prior(alpha: float, h: Hyperparams) -> float:
    return _gamma_logpdf(alpha, h.a_alpha, h.b_alpha)


def sample_alpha_mh(
    labels,
    families,
    order,
    alpha_current: float,
    h: Hyperparams,
    rng: np.random.Generator,
) -> float:
    """One Metropolis-Hastings update of the concentration parameter.

    The proposal is lognormal with mean equal to the current value and
    variance ``1/tau_alpha`` (log-space location ``log(alpha) -
    1/(2*tau_alpha)``); the target is the order-conditional partition
    probability times the Gamma prior.  The asymmetric proposal density
    ratio is included.
    """
    if not alpha_current > 0:
        raise ValueError(f"current concentration must be positive, got {alpha_current}")
    sd_log = 1.0 / math.sqrt(h.tau_alpha)
    shift = 0.5 / h.tau_alpha
    proposed = math.exp(math.log(alpha_current) - shift + sd_log * rng.standard_normal())

    def log_target(a: float) -> float:
        return dfcrp_joint_logprob(labels, a, families, order) + alpha_log_prior(a, h)

    delta = (
        log_target(proposed)
        + _lognormal_logpdf(alpha_current, math.log(proposed) - shift, sd_log)
        - log_target(alpha_current)
        - _lognormal_logpdf(proposed, math.log(alpha_current) - shift, sd_log)
    )
    if delta >= 0 or rng.random() < math.exp(delta):
        return proposed
    return alpha_current
