"""Exponential-family view of the zero-truncated normal.

Natural parameters theta = Sigma^{-1} mu and Theta = Sigma^{-1} / 2, sufficient
statistics (t, t_i t_j for i <= j), the Laplace transform

    L(theta, Theta) = integral over t > 0 of exp(theta't - t'Theta t) dt,

its logarithm K, the natural parameter space D = Omega_0 u ... u Omega_d
stratified by the rank of Theta, and a probe of the gradient of K along
Theta -> 0 showing that the gradient stays bounded (the family is not steep).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linprog
from scipy.special import logsumexp

from .config import IntegratorConfig
from .errors import DivergentParameterError, IllConditionedError, NotPositiveDefiniteError, ThetaNotPdError
from .matrix_core import (
    DEFAULT_RANK_TOL,
    NotPsd,
    PsdClassification,
    SpdMatrix,
    SymMatrix,
    as_vector,
    classify_psd,
    vech,
)
from .models import IntegrationMethod, ModelParams, MomentPair, NaturalParams, ParamTag
from .moments import covariance_matrix
from .orthant import IntegralEstimate, normalizing_constant, shift_points

DEFAULT_EPSILONS = (1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001)
_U_FLOOR = 2.0**-53

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ParamClass:
    """Membership of (theta, Theta) in D.

    ``certificate`` is the PsdClassification for OMEGA_R; for OUTSIDE_D it is
    a negative-curvature direction of Theta or a recession ray t >= 0 along
    which the integrand does not decay.
    """

    tag: ParamTag
    rank: Optional[int]
    certificate: Union[PsdClassification, NDArray]

    @property
    def in_domain(self) -> bool:
        return self.tag is ParamTag.OMEGA_R


@dataclass(frozen=True, eq=False)
class SufficientStats:
    values: NDArray
    dim: int

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class SteepnessRecord:
    epsilon: float
    grad_theta: NDArray
    grad_big_theta: NDArray
    norm_sq: float
    norm_sq_std_error: float
    theta_dot_grad: float
    increment: Optional[float]


@dataclass(frozen=True, eq=False)
class SteepnessTrace:
    """Gradient of K along (theta, Theta_eps) with the limits as eps -> 0.

    In the limit t has independent exponential coordinates with rates
    -theta_j, so E[t_i t_j] = theta_i^{-1} theta_j^{-1} off the diagonal and
    2 theta_i^{-2} on it. ``limit_norm_sq`` uses these exact moments;
    ``limit_norm_sq_product_form`` = s + s^2 (s = sum theta_j^{-2}) is the
    value obtained when the diagonal is also taken as theta_i^{-2}.
    """

    theta: NDArray
    epsilons: tuple[float, ...]
    records: list[SteepnessRecord] = field(default_factory=list)

    @property
    def limit_grad_theta(self) -> NDArray:
        return -1.0 / self.theta

    @property
    def limit_grad_big_theta(self) -> NDArray:
        inv = 1.0 / self.theta
        limit = -np.outer(inv, inv)
        np.fill_diagonal(limit, -2.0 * inv**2)
        return limit

    @property
    def limit_norm_sq(self) -> float:
        s = float(np.sum(self.theta**-2.0))
        return s + s * s + 3.0 * float(np.sum(self.theta**-4.0))

    @property
    def limit_norm_sq_product_form(self) -> float:
        s = float(np.sum(self.theta**-2.0))
        return s + s * s

    @property
    def limit_theta_dot_grad(self) -> float:
        return -float(self.theta.shape[0])


def to_natural(p: ModelParams) -> NaturalParams:
    inverse = p.sigma.inverse()
    return NaturalParams.create(inverse @ p.mu, 0.5 * inverse)


def from_natural(natural: NaturalParams) -> ModelParams:
    cls = classify_psd(natural.big_theta)
    if isinstance(cls, NotPsd) or cls.rank < natural.dim:
        raise ThetaNotPdError("Theta is not positive definite")
    try:
        big_theta = SpdMatrix(natural.big_theta.entries)
    except NotPositiveDefiniteError as exc:
        raise ThetaNotPdError("Theta is not positive definite") from exc
    sigma = 0.5 * big_theta.inverse()
    return ModelParams.create(sigma @ natural.theta, sigma)


def sufficient_stats(t: ArrayLike) -> SufficientStats:
    t = as_vector(t)
    return SufficientStats(values=np.concatenate([t, vech(np.outer(t, t))]), dim=int(t.shape[0]))


def _cone_margin(theta: NDArray, range_basis: NDArray) -> tuple[Optional[float], Optional[NDArray]]:
    """max theta'x over {x >= 0, sum x = 1, range_basis' x = 0}; (None, None) if that set is empty."""
    dim = theta.shape[0]
    a_eq = np.vstack([range_basis.T, np.ones((1, dim))])
    b_eq = np.concatenate([np.zeros(range_basis.shape[1]), [1.0]])
    result = linprog(-theta, A_eq=a_eq, b_eq=b_eq, bounds=[(0.0, None)] * dim, method="highs")
    if result.status == 2:
        return None, None
    if result.status != 0:
        raise IllConditionedError(f"recession-cone linear program failed: {result.message}")
    return float(-result.fun), np.asarray(result.x)


def classify_parameter(natural: NaturalParams, tol: float = DEFAULT_RANK_TOL) -> ParamClass:
    theta = natural.theta
    dim = natural.dim
    cls = classify_psd(natural.big_theta, rank_tol=tol)
    if isinstance(cls, NotPsd):
        return ParamClass(ParamTag.OUTSIDE_D, None, cls.direction)
    if cls.rank == dim:
        return ParamClass(ParamTag.OMEGA_R, dim, cls)

    threshold = -tol * float(np.linalg.norm(theta))
    if cls.rank == 0:
        bad = np.flatnonzero(theta >= threshold)
        if bad.size == 0:
            return ParamClass(ParamTag.OMEGA_R, 0, cls)
        ray = np.zeros(dim)
        ray[bad[0]] = 1.0
        return ParamClass(ParamTag.OUTSIDE_D, None, ray)

    margin, ray = _cone_margin(theta, cls.range_basis)
    if margin is None or margin < threshold:
        return ParamClass(ParamTag.OMEGA_R, cls.rank, cls)
    # A non-decaying recession ray, ties included, makes the integral diverge.
    return ParamClass(ParamTag.OUTSIDE_D, None, ray)


def _exponential_importance(
    natural: NaturalParams, rate: float, cfg: IntegratorConfig
) -> IntegralEstimate:
    """L by sampling t_j ~ Exp(rate) on scrambled Sobol nets, doubling until on target."""
    theta = natural.theta
    big_theta = natural.big_theta.entries
    dim = natural.dim
    n_points = cfg.qmc_points
    used = 0
    while True:
        logs = []
        for shift in range(cfg.random_shifts):
            unit = np.clip(shift_points(dim, n_points, cfg.seed, shift), _U_FLOOR, 1.0 - 2.0**-53)
            t = -np.log1p(-unit) / rate
            quad_term = np.einsum("ni,ij,nj->n", t, big_theta, t)
            log_weight = t @ theta + rate * t.sum(axis=1) - quad_term - dim * math.log(rate)
            logs.append(float(logsumexp(log_weight) - math.log(n_points)))
        used += n_points * cfg.random_shifts
        logs = np.array(logs)
        log_value = float(logsumexp(logs) - math.log(logs.shape[0]))
        ratios = np.exp(logs - log_value)
        rel = float(np.std(ratios, ddof=1) / math.sqrt(ratios.shape[0]))
        met = rel <= cfg.target_rel_error
        if met or used + 2 * n_points * cfg.random_shifts > cfg.max_points:
            if not met:
                logger.warning("Laplace 变换未达到目标精度 rel_err=%.3g points=%s", rel, used)
            value = math.exp(log_value)
            return IntegralEstimate(
                value=value,
                log_value=log_value,
                std_error=value * rel,
                rel_std_error=rel,
                points_used=used,
                method=IntegrationMethod.IMPORTANCE,
                target_met=met,
            )
        n_points *= 2


def laplace_transform(natural: NaturalParams, cfg: IntegratorConfig) -> IntegralEstimate:
    param_class = classify_parameter(natural)
    if not param_class.in_domain:
        raise DivergentParameterError("(theta, Theta) lies outside the natural parameter space")
    rank = param_class.rank
    theta = natural.theta

    if rank == natural.dim:
        p = from_natural(natural)
        const = normalizing_constant(p, cfg)
        # Completing the square: theta'Theta^{-1}theta / 4 = theta'Sigma theta / 2.
        log_value = 0.5 * float(theta @ p.sigma.entries @ theta) + const.log_value
        value = math.exp(log_value)
        return IntegralEstimate(
            value=value,
            log_value=log_value,
            std_error=value * const.rel_std_error,
            rel_std_error=const.rel_std_error,
            points_used=const.points_used,
            method=const.method,
            target_met=const.target_met,
        )

    if rank == 0:
        log_value = -float(np.sum(np.log(-theta)))
        return IntegralEstimate(math.exp(log_value), log_value, 0.0, 0.0, 0, IntegrationMethod.CLOSED_FORM)

    margin, _ = _cone_margin(theta, param_class.certificate.range_basis)
    rate = max(1.0, float(np.max(np.abs(theta)))) if margin is None else -margin
    logger.debug("秩亏 Theta 使用指数重要性抽样 rank=%s rate=%.4g", rank, rate)
    return _exponential_importance(natural, rate, cfg)


def cgf(natural: NaturalParams, cfg: IntegratorConfig) -> float:
    return laplace_transform(natural, cfg).log_value


def _gradient_pair(natural: NaturalParams, cfg: IntegratorConfig) -> MomentPair:
    return covariance_matrix(from_natural(natural), cfg)


def grad_cgf(natural: NaturalParams, cfg: IntegratorConfig) -> tuple[NDArray, SymMatrix]:
    """(grad_theta K, grad_Theta K) = (E[t], -E[tt']) on the interior.

    grad_Theta uses the symmetric-matrix operator (1 + delta_ij)/2 d/dTheta_ij,
    so an off-diagonal entry is half the derivative in the single free
    coordinate Theta_ij = Theta_ji.
    """
    pair = _gradient_pair(natural, cfg)
    second = pair.lam.entries + np.outer(pair.nu, pair.nu)
    return pair.nu, SymMatrix(-second)


def log_density_natural(t: ArrayLike, natural: NaturalParams, cfg: IntegratorConfig) -> float:
    """theta't - t'Theta t - K(theta, Theta); -inf off the open orthant."""
    t = as_vector(t, natural.dim)
    if np.any(t <= 0.0):
        return -math.inf
    return float(t @ natural.theta - t @ natural.big_theta.entries @ t) - cgf(natural, cfg)


def steepness_probe(
    theta: ArrayLike,
    cfg: IntegratorConfig,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    big_theta_for: Optional[Callable[[float], ArrayLike]] = None,
) -> SteepnessTrace:
    theta = as_vector(theta)
    if np.any(theta >= 0.0):
        raise ValueError("theta must be componentwise negative")
    epsilons = tuple(float(eps) for eps in epsilons)
    if not epsilons or any(eps <= 0.0 for eps in epsilons):
        raise ValueError("epsilons must be positive")
    if any(later >= earlier for earlier, later in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilons must be strictly decreasing")

    dim = theta.shape[0]
    trace = SteepnessTrace(theta=theta, epsilons=epsilons)
    previous = None
    for eps in epsilons:
        big_theta = eps * np.eye(dim) if big_theta_for is None else np.asarray(big_theta_for(eps), dtype=float)
        pair = _gradient_pair(NaturalParams.create(theta, big_theta), cfg)
        grad_theta = pair.nu
        grad_big_theta = -(pair.lam.entries + np.outer(pair.nu, pair.nu))
        norm_sq = float(grad_theta @ grad_theta + np.sum(grad_big_theta**2))
        # Delta-method error of the squared norm; nu and Lambda errors treated as independent.
        big_theta_se = pair.lam_std_error + 2.0 * np.abs(np.outer(pair.nu, pair.nu_std_error))
        norm_se = 2.0 * math.sqrt(
            float(np.sum((grad_theta * pair.nu_std_error) ** 2) + np.sum((grad_big_theta * big_theta_se) ** 2))
        )
        trace.records.append(
            SteepnessRecord(
                epsilon=eps,
                grad_theta=grad_theta,
                grad_big_theta=grad_big_theta,
                norm_sq=norm_sq,
                norm_sq_std_error=norm_se,
                theta_dot_grad=float(theta @ grad_theta),
                increment=None if previous is None else abs(norm_sq - previous),
            )
        )
        logger.info("陡峭性探测 eps=%.4g norm_sq=%.6g", eps, norm_sq)
        previous = norm_sq
    return trace
