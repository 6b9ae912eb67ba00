"""Mean and covariance of the zero-truncated normal from C and its mu-derivatives.

    nu     = mu + Sigma g,                       g = grad C / C
    Lambda = Sigma + Sigma H Sigma - (nu - mu)(nu - mu)',  H = grad grad' C / C

g and H come from one call to ``orthant.log_derivatives`` so they share common
random numbers; the per-shift replicates give the standard errors.
"""

import logging
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigh
from scipy.special import logsumexp

from .config import IntegratorConfig
from .errors import IllConditionedError
from .matrix_core import SymMatrix, as_vector, floor_to_psd
from .models import GradientMethod, ModelParams, MomentPair
from .orthant import (
    LogDerivatives,
    adaptive_log_orthant,
    checked_factor,
    log_derivatives,
    log_gradient,
    log_orthant,
    replicate_std_error,
    separation_draws,
    shift_points,
)

PSD_FLOOR_TOL = 1e-6

logger = logging.getLogger(__name__)


def _checked_covariance(lam: NDArray) -> NDArray:
    lam = 0.5 * (lam + lam.T)
    smallest = float(eigh(lam, eigvals_only=True)[0])
    if smallest >= 0.0:
        return lam
    if smallest > -PSD_FLOOR_TOL:
        logger.warning("协方差矩阵最小特征值为负，已截断为半正定 eig=%.3g", smallest)
        return floor_to_psd(lam)
    raise IllConditionedError(
        f"covariance has eigenvalue {smallest:.3g}; integration noise exceeds tolerance"
    )


def moments_from_derivatives(p: ModelParams, derivs: LogDerivatives) -> MomentPair:
    sigma = p.sigma.entries
    nu = p.mu + sigma @ derivs.gradient
    lam = sigma + sigma @ derivs.hessian @ sigma - np.outer(nu - p.mu, nu - p.mu)

    nu_reps = p.mu + derivs.gradient_replicates @ sigma
    centred = nu_reps - p.mu
    lam_reps = (
        sigma
        + np.einsum("ij,rjk,kl->ril", sigma, derivs.hessian_replicates, sigma)
        - centred[:, :, None] * centred[:, None, :]
    )
    return MomentPair(
        nu=nu,
        lam=SymMatrix(_checked_covariance(lam)),
        nu_std_error=replicate_std_error(nu_reps),
        lam_std_error=replicate_std_error(lam_reps),
    )


def mean_vector(
    p: ModelParams, cfg: IntegratorConfig, method: GradientMethod = GradientMethod.REDUCTION
) -> tuple[NDArray, NDArray]:
    gradient, reps, met = log_gradient(p, cfg, method=method)
    if not met:
        logger.warning("均值估计基于未达精度的积分 d=%s", p.dim)
    sigma = p.sigma.entries
    return p.mu + sigma @ gradient, replicate_std_error(p.mu + reps @ sigma)


def covariance_matrix(
    p: ModelParams,
    cfg: IntegratorConfig,
    method: GradientMethod = GradientMethod.REDUCTION,
    n_points: Optional[int] = None,
) -> MomentPair:
    derivs = log_derivatives(p, cfg, method=method, n_points=n_points)
    if not derivs.target_met:
        logger.warning("矩估计基于未达精度的积分 d=%s", p.dim)
    return moments_from_derivatives(p, derivs)


def log_mgf(t: ArrayLike, p: ModelParams, cfg: IntegratorConfig) -> float:
    """K(t) = t'mu + t'Sigma t / 2 + log C(mu + Sigma t, Sigma) - log C(mu, Sigma).

    Both orthant probabilities use the same point count so that differences
    in t share common random numbers.
    """
    t = as_vector(t, p.dim)
    sigma = p.sigma.entries
    factor = checked_factor(sigma)
    base, points, _ = adaptive_log_orthant(p.mu, factor, cfg)
    moved = log_orthant(p.mu + sigma @ t, factor, cfg, points)
    return float(t @ p.mu + 0.5 * t @ sigma @ t + moved.log_mean - base.log_mean)


def direct_moments(p: ModelParams, cfg: IntegratorConfig) -> MomentPair:
    """E[X] and Cov(X) straight from weighted separation-of-variables draws.

    Independent of the derivative formulas; used as their cross-check.
    """
    factor = checked_factor(p.sigma.entries)
    _, points, _ = adaptive_log_orthant(p.mu, factor, cfg)
    means = []
    covs = []
    for shift in range(cfg.random_shifts):
        unit = shift_points(p.dim, points, cfg.seed, shift)
        log_weight, draws = separation_draws(p.mu, factor, unit, draw_last=True)
        weight = np.exp(log_weight - logsumexp(log_weight))
        values = p.mu + draws @ factor.T
        mean = weight @ values
        centred = values - mean
        means.append(mean)
        covs.append((centred * weight[:, None]).T @ centred)
    means = np.array(means)
    covs = np.array(covs)
    lam = covs.mean(axis=0)
    return MomentPair(
        nu=means.mean(axis=0),
        lam=SymMatrix(lam),
        nu_std_error=replicate_std_error(means),
        lam_std_error=replicate_std_error(covs),
    )
