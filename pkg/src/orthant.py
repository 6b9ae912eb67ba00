"""Normalizing constant of the zero-truncated normal and its derivatives in mu.

C(mu, Sigma) = (2 pi)^{d/2} |Sigma|^{1/2} P(Z > 0) with Z ~ N(mu, Sigma).

The orthant probability is evaluated after the separation-of-variables
transform of the Cholesky factor: closed form for d = 1 and for a diagonal
Sigma, one-dimensional adaptive quadrature for d = 2 and randomized
quasi-Monte Carlo (scrambled Sobol nets, one scramble per shift) above that.
All quantities are kept in log space so the far tails reached by small-Theta
natural parameters neither underflow nor lose relative precision.

Every estimate is carried as a set of per-shift replicates. Derived
quantities (gradient ratio, Hessian ratio) are formed replicate by replicate
from common random numbers, and their standard errors come from the spread
across shifts.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import quad
from scipy.linalg import LinAlgError, cholesky
from scipy.special import log_ndtr, logsumexp, ndtri_exp
from scipy.stats import qmc

from .config import IntegratorConfig
from .errors import SingularSigmaError
from .matrix_core import SymMatrix
from .models import GradientMethod, IntegrationMethod, ModelParams

LOG_2PI = math.log(2.0 * math.pi)
# Smallest conditional-to-marginal variance ratio accepted before Sigma is
# treated as singular.
_MIN_VARIANCE_RATIO = 1e-12
_U_FLOOR = 2.0**-53
# Coinciding replicates still carry rounding error.
_QMC_REL_ERROR_FLOOR = float(np.finfo(float).eps)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IntegralEstimate:
    value: float
    log_value: float
    std_error: float
    rel_std_error: float
    points_used: int
    method: IntegrationMethod
    target_met: bool = True


@dataclass(frozen=True, eq=False)
class Replicates:
    """Per-shift log estimates of one orthant probability (a single entry for exact paths)."""

    log_values: NDArray
    method: IntegrationMethod
    points_used: int

    @property
    def count(self) -> int:
        return int(self.log_values.shape[0])

    @property
    def log_mean(self) -> float:
        return float(logsumexp(self.log_values) - math.log(self.count))

    @property
    def rel_std_error(self) -> float:
        if self.count < 2:
            return 0.0
        ratios = np.exp(self.log_values - self.log_mean)
        return float(np.std(ratios, ddof=1) / math.sqrt(self.count))


@dataclass(frozen=True, eq=False)
class LogDerivatives:
    """log C with g = grad C / C and H = grad grad' C / C, all at one (mu, Sigma)."""

    log_c: float
    log_c_rel_std_error: float
    gradient: NDArray
    gradient_std_error: NDArray
    gradient_replicates: NDArray
    hessian: NDArray
    hessian_std_error: NDArray
    hessian_replicates: NDArray
    points_per_shift: int
    target_met: bool


def fd_step(value: float) -> float:
    return max(1e-4, 1e-4 * (1.0 + abs(value)))


def checked_factor(sigma: NDArray) -> NDArray:
    try:
        factor = cholesky(sigma, lower=True)
    except LinAlgError as exc:
        raise SingularSigmaError("Sigma is not positive definite") from exc
    ratios = np.diag(factor) ** 2 / np.diag(sigma)
    if not np.all(np.isfinite(ratios)) or np.min(ratios) < _MIN_VARIANCE_RATIO:
        raise SingularSigmaError("Sigma is numerically singular")
    return factor


def log_scale(factor: NDArray) -> float:
    """log of (2 pi)^{d/2} |Sigma|^{1/2}."""
    return 0.5 * factor.shape[0] * LOG_2PI + float(np.sum(np.log(np.diag(factor))))


def shift_points(dim: int, n_points: int, seed: int, shift: int) -> NDArray:
    """Scrambled Sobol net for one random shift; identical for identical (seed, shift, dim)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, shift, dim]))
    sampler = qmc.Sobol(d=dim, scramble=True, seed=rng)
    return sampler.random_base2(int(round(math.log2(n_points))))


def separation_draws(
    mu: NDArray, factor: NDArray, unit: NDArray, draw_last: bool = False
) -> tuple[NDArray, NDArray]:
    """Per-point log weights and standard-normal draws of the separation transform.

    ``unit`` holds d - 1 columns (d with ``draw_last``). Row k of the returned
    draws maps to the orthant point mu + factor @ draws[k]; the weight is the
    product of the one-dimensional conditional tail probabilities.
    """
    dim = mu.shape[0]
    n_points = unit.shape[0]
    draws = np.zeros((n_points, dim))
    log_q = np.full(n_points, log_ndtr(mu[0] / factor[0, 0]))
    log_weight = log_q.copy()
    stop = dim + 1 if draw_last else dim
    for i in range(1, stop):
        u = np.clip(unit[:, i - 1], _U_FLOOR, 1.0)
        # Upper-tail inversion in log space: w > c with P(w > c) = exp(log_q).
        draws[:, i - 1] = -ndtri_exp(np.log(u) + log_q)
        if i == dim:
            break
        offset = draws[:, :i] @ factor[i, :i]
        log_q = log_ndtr((mu[i] + offset) / factor[i, i])
        log_weight = log_weight + log_q
    return log_weight, draws


def _log_orthant_2d(mu: NDArray, factor: NDArray) -> float:
    log_q1 = float(log_ndtr(mu[0] / factor[0, 0]))
    l21, l22 = float(factor[1, 0]), float(factor[1, 1])
    if l21 == 0.0:
        return log_q1 + float(log_ndtr(mu[1] / l22))

    def log_inner(u: float) -> float:
        w = -ndtri_exp(math.log(u) + log_q1)
        return float(log_ndtr((mu[1] + l21 * w) / l22))

    # The inner conditional CDF is monotone in u, so its maximum sits at an end.
    ref = max(log_inner(_U_FLOOR), log_inner(1.0))
    value, _ = quad(
        lambda u: math.exp(log_inner(u) - ref),
        0.0,
        1.0,
        epsabs=0.0,
        epsrel=1e-12,
        limit=200,
    )
    return log_q1 + ref + math.log(value)


def _log_orthant_shift(mu: NDArray, factor: NDArray, cfg: IntegratorConfig, n_points: int, shift: int) -> float:
    unit = shift_points(mu.shape[0] - 1, n_points, cfg.seed, shift)
    log_weight, _ = separation_draws(mu, factor, unit)
    return float(logsumexp(log_weight) - math.log(n_points))


def log_orthant(mu: NDArray, factor: NDArray, cfg: IntegratorConfig, n_points: int) -> Replicates:
    """Replicated log P(Z > 0) for Z ~ N(mu, factor factor') at a fixed point count."""
    dim = mu.shape[0]
    if dim == 1:
        value = float(log_ndtr(mu[0] / factor[0, 0]))
        return Replicates(np.array([value]), IntegrationMethod.EXACT1D, 0)
    if dim == 2 and cfg.exact_max_dim >= 2:
        return Replicates(np.array([_log_orthant_2d(mu, factor)]), IntegrationMethod.EXACT2D, 0)
    if not np.any(np.tril(factor, -1)):
        # Independent coordinates: the orthant probability factorizes.
        value = float(np.sum(log_ndtr(mu / np.diag(factor))))
        return Replicates(np.array([value]), IntegrationMethod.CLOSED_FORM, 0)

    shifts = range(cfg.random_shifts)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            # map keeps shift order, so the reduction below is schedule independent.
            values = list(pool.map(lambda k: _log_orthant_shift(mu, factor, cfg, n_points, k), shifts))
    else:
        values = [_log_orthant_shift(mu, factor, cfg, n_points, k) for k in shifts]
    return Replicates(np.array(values), IntegrationMethod.QMC, n_points * cfg.random_shifts)


def adaptive_log_orthant(mu: NDArray, factor: NDArray, cfg: IntegratorConfig) -> tuple[Replicates, int, bool]:
    """Double the points per shift until the relative error target or the point cap is reached."""
    n_points = cfg.qmc_points
    used = 0
    while True:
        reps = log_orthant(mu, factor, cfg, n_points)
        used += reps.points_used
        if reps.method is not IntegrationMethod.QMC:
            return reps, n_points, True
        if reps.rel_std_error <= cfg.target_rel_error:
            return Replicates(reps.log_values, reps.method, used), n_points, True
        if used + 2 * n_points * cfg.random_shifts > cfg.max_points:
            logger.warning(
                "QMC 未达到目标精度 rel_err=%.3g target=%.3g points=%s",
                reps.rel_std_error,
                cfg.target_rel_error,
                used,
            )
            return Replicates(reps.log_values, reps.method, used), n_points, False
        n_points *= 2


def _estimate(log_value: float, reps: Replicates, target_met: bool) -> IntegralEstimate:
    value = math.exp(log_value)
    rel = reps.rel_std_error
    if reps.method is IntegrationMethod.QMC:
        rel = max(rel, _QMC_REL_ERROR_FLOOR)
    return IntegralEstimate(
        value=value,
        log_value=log_value,
        std_error=value * rel,
        rel_std_error=rel,
        points_used=reps.points_used,
        method=reps.method,
        target_met=target_met,
    )


def orthant_probability(p: ModelParams, cfg: IntegratorConfig) -> IntegralEstimate:
    factor = checked_factor(p.sigma.entries)
    reps, _, met = adaptive_log_orthant(p.mu, factor, cfg)
    return _estimate(reps.log_mean, reps, met)


def normalizing_constant(p: ModelParams, cfg: IntegratorConfig) -> IntegralEstimate:
    factor = checked_factor(p.sigma.entries)
    reps, _, met = adaptive_log_orthant(p.mu, factor, cfg)
    return _estimate(log_scale(factor) + reps.log_mean, reps, met)


def _conditional_on_zero(mu: NDArray, sigma: NDArray, index: int) -> tuple[NDArray, NDArray]:
    keep = [j for j in range(mu.shape[0]) if j != index]
    s_ii = sigma[index, index]
    cross = sigma[keep, index]
    mean = mu[keep] - cross * (mu[index] / s_ii)
    cov = sigma[np.ix_(keep, keep)] - np.outer(cross, cross) / s_ii
    return mean, checked_factor(0.5 * (cov + cov.T))


def _log_partials(mu: NDArray, sigma: NDArray, cfg: IntegratorConfig, n_points: int) -> NDArray:
    """Replicated log dP/dmu_i, shape (R, d), by conditioning Z on Z_i = 0."""
    dim = mu.shape[0]
    columns = []
    for i in range(dim):
        log_density = -0.5 * mu[i] ** 2 / sigma[i, i] - 0.5 * (LOG_2PI + math.log(sigma[i, i]))
        if dim == 1:
            columns.append(np.array([log_density]))
            continue
        mean, factor = _conditional_on_zero(mu, sigma, i)
        columns.append(log_density + log_orthant(mean, factor, cfg, n_points).log_values)
    return np.stack(np.broadcast_arrays(*columns), axis=1)


def _adaptive_log_partials(mu: NDArray, sigma: NDArray, cfg: IntegratorConfig) -> NDArray:
    """_log_partials with the points doubled until every component meets the relative error target."""
    n_points = cfg.qmc_points
    used = 0
    while True:
        partials = _log_partials(mu, sigma, cfg, n_points)
        if partials.shape[0] < 2:
            return partials
        used += n_points * cfg.random_shifts * mu.shape[0]
        centre = logsumexp(partials, axis=0) - math.log(partials.shape[0])
        rel = float(np.max(replicate_std_error(np.exp(partials - centre))))
        if rel <= cfg.target_rel_error:
            return partials
        if used + 2 * n_points * cfg.random_shifts * mu.shape[0] > cfg.max_points:
            logger.warning("梯度 QMC 未达到目标精度 rel_err=%.3g target=%.3g points=%s", rel, cfg.target_rel_error, used)
            return partials
        n_points *= 2


def _ratio_replicates(
    mu: NDArray, sigma: NDArray, factor: NDArray, cfg: IntegratorConfig, n_points: int, method: GradientMethod
) -> tuple[NDArray, NDArray]:
    """(point, replicates) of g = grad log C."""
    base = log_orthant(mu, factor, cfg, n_points)
    if method is GradientMethod.REDUCTION:
        partials = _log_partials(mu, sigma, cfg, n_points)
        log_partial_mean = logsumexp(partials, axis=0) - math.log(partials.shape[0])
        point = np.exp(log_partial_mean - base.log_mean)
        reps = np.exp(partials - base.log_values[:, None])
        return point, reps

    dim = mu.shape[0]
    point = np.empty(dim)
    columns = []
    for j in range(dim):
        step = fd_step(mu[j])
        bump = np.zeros(dim)
        bump[j] = step
        up = log_orthant(mu + bump, factor, cfg, n_points)
        down = log_orthant(mu - bump, factor, cfg, n_points)
        point[j] = (up.log_mean - down.log_mean) / (2.0 * step)
        columns.append((up.log_values - down.log_values) / (2.0 * step))
    return point, np.stack(np.broadcast_arrays(*columns), axis=1)


def replicate_std_error(reps: NDArray) -> NDArray:
    if reps.shape[0] < 2:
        return np.zeros(reps.shape[1:])
    return np.std(reps, axis=0, ddof=1) / math.sqrt(reps.shape[0])


def log_gradient(
    p: ModelParams, cfg: IntegratorConfig, method: GradientMethod = GradientMethod.REDUCTION
) -> tuple[NDArray, NDArray, bool]:
    """(g, per-shift replicates of g, target_met) for g = grad C / C, without the Hessian."""
    factor = checked_factor(p.sigma.entries)
    _, points, met = adaptive_log_orthant(p.mu, factor, cfg)
    gradient, reps = _ratio_replicates(p.mu, p.sigma.entries, factor, cfg, points, method)
    return gradient, reps, met


def log_derivatives(
    p: ModelParams,
    cfg: IntegratorConfig,
    method: GradientMethod = GradientMethod.REDUCTION,
    n_points: Optional[int] = None,
) -> LogDerivatives:
    """g = grad C / C and H = grad grad' C / C with common random numbers throughout.

    H is obtained by central differences of g (step fd_step(mu_j)) and the
    identity grad grad' C / C = Jac(g) + g g'; the Jacobian is symmetrized.
    """
    mu = p.mu
    sigma = p.sigma.entries
    factor = checked_factor(sigma)
    if n_points is None:
        base, points, met = adaptive_log_orthant(mu, factor, cfg)
    else:
        base, points, met = log_orthant(mu, factor, cfg, n_points), n_points, True
    gradient, gradient_reps = _ratio_replicates(mu, sigma, factor, cfg, points, method)

    dim = mu.shape[0]
    jac = np.empty((dim, dim))
    jac_cols = []
    for j in range(dim):
        step = fd_step(mu[j])
        bump = np.zeros(dim)
        bump[j] = step
        up, up_reps = _ratio_replicates(mu + bump, sigma, factor, cfg, points, method)
        down, down_reps = _ratio_replicates(mu - bump, sigma, factor, cfg, points, method)
        jac[:, j] = (up - down) / (2.0 * step)
        jac_cols.append((up_reps - down_reps) / (2.0 * step))
    jac_reps = np.stack(np.broadcast_arrays(*jac_cols), axis=2)
    jac = 0.5 * (jac + jac.T)
    jac_reps = 0.5 * (jac_reps + np.swapaxes(jac_reps, 1, 2))

    count = max(gradient_reps.shape[0], jac_reps.shape[0])
    gradient_reps = np.broadcast_to(gradient_reps, (count, dim))
    jac_reps = np.broadcast_to(jac_reps, (count, dim, dim))
    hessian = jac + np.outer(gradient, gradient)
    hessian_reps = jac_reps + gradient_reps[:, :, None] * gradient_reps[:, None, :]
    return LogDerivatives(
        log_c=log_scale(factor) + base.log_mean,
        log_c_rel_std_error=base.rel_std_error,
        gradient=gradient,
        gradient_std_error=replicate_std_error(gradient_reps),
        gradient_replicates=gradient_reps,
        hessian=0.5 * (hessian + hessian.T),
        hessian_std_error=replicate_std_error(hessian_reps),
        hessian_replicates=hessian_reps,
        points_per_shift=points,
        target_met=met,
    )


def grad_c(
    p: ModelParams, cfg: IntegratorConfig, method: GradientMethod = GradientMethod.REDUCTION
) -> tuple[NDArray, NDArray]:
    """grad_mu C and its standard errors.

    The reduction path uses dP/dmu_i = f_i(0) P(Z_{-i} > 0 | Z_i = 0); the
    finite-difference path differentiates normalizing_constant with common
    random numbers.
    """
    mu = p.mu
    sigma = p.sigma.entries
    factor = checked_factor(sigma)
    scale = log_scale(factor)
    if method is GradientMethod.REDUCTION:
        partials = scale + _adaptive_log_partials(mu, sigma, cfg)
        value = np.exp(logsumexp(partials, axis=0) - math.log(partials.shape[0]))
        return value, replicate_std_error(np.exp(partials))

    # Central differences reuse the point count normalizing_constant settles on.
    _, points, _ = adaptive_log_orthant(mu, factor, cfg)
    dim = mu.shape[0]
    value = np.empty(dim)
    columns = []
    for j in range(dim):
        step = fd_step(mu[j])
        bump = np.zeros(dim)
        bump[j] = step
        up = log_orthant(mu + bump, factor, cfg, points)
        down = log_orthant(mu - bump, factor, cfg, points)
        value[j] = (math.exp(scale + up.log_mean) - math.exp(scale + down.log_mean)) / (2.0 * step)
        columns.append((np.exp(scale + up.log_values) - np.exp(scale + down.log_values)) / (2.0 * step))
    return value, replicate_std_error(np.stack(np.broadcast_arrays(*columns), axis=1))


def hess_c(p: ModelParams, cfg: IntegratorConfig) -> tuple[SymMatrix, NDArray]:
    derivs = log_derivatives(p, cfg)
    c_value = math.exp(derivs.log_c)
    return SymMatrix(c_value * derivs.hessian), c_value * derivs.hessian_std_error
