"""Likelihood, score and moment-equation fitting for N_d(mu, Sigma; 0).

The score equations are equivalent to matching the model moments to the
sample moments, nu(mu, Sigma) = xbar and Lambda(mu, Sigma) = S(xbar), so
``fit`` solves that square system and uses the analytic score only as a
certificate at the end.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .config import FitConfig, IntegratorConfig
from .errors import (
    IllConditionedError,
    InvalidSampleError,
    NonFiniteError,
    NotPositiveDefiniteError,
    SingularSampleCovarianceError,
    SingularSigmaError,
)
from .matrix_core import (
    NotPsd,
    SpdMatrix,
    SymMatrix,
    as_vector,
    classify_psd,
    frobenius_norm,
    frobenius_weights,
    vech,
    woodbury_quadratic,
)
from .models import FitStatus, ModelParams, MomentPair, SolverKind
from .moments import covariance_matrix
from .orthant import adaptive_log_orthant, checked_factor, log_derivatives, log_scale

# Failures of a single integrator evaluation inside the solver.
_EVALUATION_ERRORS = (SingularSigmaError, IllConditionedError, NotPositiveDefiniteError, NonFiniteError)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Sample:
    data: NDArray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data.reshape(-1, 1)
        if data.ndim != 2:
            raise InvalidSampleError(f"expected a 2-D table, got {data.ndim} dimensions")
        if data.shape[0] == 0:
            raise InvalidSampleError("no rows")
        if data.shape[1] == 0:
            raise InvalidSampleError("no columns")
        bad = np.argwhere(~np.isfinite(data) | (data <= 0.0))
        if bad.size:
            row, col = (int(v) for v in bad[0])
            raise InvalidSampleError(
                f"row {row + 1}, column {col + 1}: value {data[row, col]!r} is not strictly positive",
                row=row + 1,
                column=col + 1,
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def shifted(self, lower: ArrayLike) -> "Sample":
        """Data measured from the truncation point ``lower`` (which then becomes 0)."""
        return Sample(self.data - as_vector(lower, self.dim))


@dataclass(frozen=True, eq=False)
class SampleStats:
    xbar: NDArray
    s_xbar: SpdMatrix


@dataclass(frozen=True, eq=False)
class FitResult:
    params: ModelParams
    moments: MomentPair
    status: FitStatus
    residual_norms: tuple[float, ...]
    iterations: int
    q: Optional[float] = None
    score_norm: Optional[float] = None
    message: str = ""

    @property
    def mu(self) -> NDArray:
        return self.params.mu

    @property
    def sigma(self) -> SymMatrix:
        return self.params.sigma

    @property
    def converged(self) -> bool:
        return self.status is FitStatus.CONVERGED


def s_alpha(s: Sample, alpha: ArrayLike) -> SymMatrix:
    centred = s.data - as_vector(alpha, s.dim)
    return SymMatrix(centred.T @ centred / s.n)


def sample_stats(s: Sample) -> SampleStats:
    xbar = s.data.mean(axis=0)
    spread = s_alpha(s, xbar)
    if s.n < s.dim + 1:
        raise SingularSampleCovarianceError(f"need at least {s.dim + 1} rows for d={s.dim}, got {s.n}")
    cls = classify_psd(spread)
    if isinstance(cls, NotPsd) or cls.rank < s.dim:
        raise SingularSampleCovarianceError("sample covariance is singular")
    try:
        s_xbar = SpdMatrix(spread.entries)
    except NotPositiveDefiniteError as exc:
        raise SingularSampleCovarianceError("sample covariance is singular") from exc
    return SampleStats(xbar=as_vector(xbar), s_xbar=s_xbar)


def _log_c(mu: NDArray, sigma: NDArray, cfg: IntegratorConfig) -> float:
    factor = checked_factor(sigma)
    base, _, _ = adaptive_log_orthant(mu, factor, cfg)
    return log_scale(factor) + base.log_mean


def loglik(p: ModelParams, s: Sample, cfg: IntegratorConfig) -> float:
    """-n log C(mu, Sigma) - sum_j (x_j - mu)' Sigma^{-1} (x_j - mu) / 2."""
    spread = s_alpha(s, p.mu).entries
    trace = float(np.trace(p.sigma.solve(spread)))
    return -s.n * _log_c(p.mu, p.sigma.entries, cfg) - 0.5 * s.n * trace


def loglik_precision(mu: ArrayLike, psi: ArrayLike, s: Sample, cfg: IntegratorConfig) -> float:
    """Same likelihood written in the precision Psi = Sigma^{-1}."""
    psi = SpdMatrix(np.asarray(psi, dtype=float))
    mu = as_vector(mu, psi.dim)
    spread = s_alpha(s, mu).entries
    return -s.n * _log_c(mu, psi.inverse(), cfg) - 0.5 * s.n * float(np.sum(psi.entries * spread))


def log_density(x: ArrayLike, p: ModelParams, cfg: IntegratorConfig) -> float:
    x = as_vector(x, p.dim)
    if np.any(x <= 0.0):
        return -math.inf
    return -_log_c(p.mu, p.sigma.entries, cfg) - 0.5 * p.sigma.quad_form(x - p.mu)


def _score_from_moments(p: ModelParams, pair: MomentPair, s: Sample) -> tuple[NDArray, SymMatrix]:
    xbar = s.data.mean(axis=0)
    grad_mu = -s.n * p.sigma.solve(pair.nu - xbar)
    offset = pair.nu - p.mu
    inner = pair.lam.entries + np.outer(offset, offset) - s_alpha(s, p.mu).entries
    weight = 2.0 - np.eye(p.dim)
    return grad_mu, SymMatrix(0.5 * s.n * weight * inner)


def score(p: ModelParams, s: Sample, cfg: IntegratorConfig) -> tuple[NDArray, SymMatrix]:
    """(d loglik / d mu, d loglik_precision / d psi_ij) with psi_ij = psi_ji one coordinate."""
    return _score_from_moments(p, covariance_matrix(p, cfg), s)


def necessary_condition(stats: SampleStats, mu_hat: ArrayLike, s: Sample) -> float:
    """q = (xbar - mu)' S(mu)^{-1} (xbar - mu), via S(mu) = S(xbar) + (xbar - mu)(xbar - mu)'."""
    offset = stats.xbar - as_vector(mu_hat, s.dim)
    return woodbury_quadratic(stats.s_xbar, offset)


# (mu, log diag L, strictly-lower L) <-> ModelParams


def _pack(p: ModelParams) -> NDArray:
    factor = p.sigma.factor
    rows, cols = np.tril_indices(p.dim, k=-1)
    return np.concatenate([p.mu, np.log(np.diag(factor)), factor[rows, cols]])


def _unpack(z: NDArray, dim: int) -> ModelParams:
    factor = np.diag(np.exp(z[dim : 2 * dim]))
    rows, cols = np.tril_indices(dim, k=-1)
    factor[rows, cols] = z[2 * dim :]
    return ModelParams.create(z[:dim], factor @ factor.T)


@dataclass(eq=False)
class _Evaluation:
    params: ModelParams
    moments: MomentPair
    residual: NDArray
    mean_error: float
    cov_error: float
    norm: float = field(init=False)

    def __post_init__(self) -> None:
        self.norm = float(np.linalg.norm(self.residual))


class _MomentSystem:
    def __init__(self, s: Sample, stats: SampleStats, cfg: FitConfig, n_points: int) -> None:
        self.sample = s
        self.stats = stats
        self.cfg = cfg
        self.n_points = n_points
        self.mean_scale = 1.0 + float(np.linalg.norm(stats.xbar))
        self.cov_scale = 1.0 + frobenius_norm(stats.s_xbar)
        self.weights = frobenius_weights(s.dim)

    def evaluate(self, p: ModelParams) -> _Evaluation:
        pair = covariance_matrix(p, self.cfg.integrator, n_points=self.n_points)
        mean_part = (pair.nu - self.stats.xbar) / self.mean_scale
        cov_part = self.weights * vech(pair.lam.entries - self.stats.s_xbar.entries) / self.cov_scale
        return _Evaluation(
            params=p,
            moments=pair,
            residual=np.concatenate([mean_part, cov_part]),
            mean_error=float(np.linalg.norm(mean_part)),
            cov_error=float(np.linalg.norm(cov_part)),
        )

    def try_evaluate(self, p: Optional[ModelParams]) -> Optional[_Evaluation]:
        if p is None:
            return None
        try:
            return self.evaluate(p)
        except _EVALUATION_ERRORS as exc:
            logger.debug("试探点积分失败: %s", exc)
            return None

    def converged(self, ev: _Evaluation) -> bool:
        return ev.mean_error <= self.cfg.tolerance and ev.cov_error <= self.cfg.tolerance

    def jacobian(self, z: NDArray) -> NDArray:
        dim = self.sample.dim
        columns = []
        for k in range(z.shape[0]):
            step = self.cfg.jacobian_step * (1.0 + abs(z[k]))
            bump = np.zeros_like(z)
            bump[k] = step
            up = self.evaluate(_unpack(z + bump, dim)).residual
            down = self.evaluate(_unpack(z - bump, dim)).residual
            columns.append((up - down) / (2.0 * step))
        return np.stack(columns, axis=1)


def _safe_unpack(z: NDArray, dim: int) -> Optional[ModelParams]:
    try:
        return _unpack(z, dim)
    except (NotPositiveDefiniteError, NonFiniteError, OverflowError):
        return None


def _safe_params(mu: NDArray, sigma: NDArray) -> Optional[ModelParams]:
    try:
        return ModelParams.create(mu, sigma)
    except (NotPositiveDefiniteError, NonFiniteError):
        return None


def _quasi_newton_trial(system: _MomentSystem, current: _Evaluation) -> Callable[[float], Optional[ModelParams]]:
    z = _pack(current.params)
    jac = system.jacobian(z)
    step, *_ = np.linalg.lstsq(jac, -current.residual, rcond=None)
    dim = system.sample.dim
    return lambda t: _safe_unpack(z + t * step, dim)


def _fixed_point_trial(system: _MomentSystem, current: _Evaluation) -> Callable[[float], Optional[ModelParams]]:
    """mu <- xbar - Sigma g, Sigma <- S - Sigma J Sigma with J = H - g g', damped by t."""
    p = current.params
    derivs = log_derivatives(p, system.cfg.integrator, n_points=system.n_points)
    sigma = p.sigma.entries
    jac = derivs.hessian - np.outer(derivs.gradient, derivs.gradient)
    target_mu = system.stats.xbar - sigma @ derivs.gradient
    target_sigma = system.stats.s_xbar.entries - sigma @ jac @ sigma

    def trial(t: float) -> Optional[ModelParams]:
        return _safe_params(p.mu + t * (target_mu - p.mu), sigma + t * (target_sigma - sigma))

    return trial


def _backtrack(
    system: _MomentSystem, current: _Evaluation, trial: Callable[[float], Optional[ModelParams]]
) -> Optional[_Evaluation]:
    t = 1.0
    for _ in range(system.cfg.max_backtracks + 1):
        candidate = system.try_evaluate(trial(t))
        if candidate is not None and candidate.norm < current.norm:
            return candidate
        t *= system.cfg.backtrack_factor
    return None


def _finish(
    s: Sample,
    stats: SampleStats,
    cfg: FitConfig,
    best: _Evaluation,
    status: FitStatus,
    norms: list[float],
    iterations: int,
    message: str = "",
) -> FitResult:
    q = necessary_condition(stats, best.params.mu, s)
    score_norm = None
    if status is FitStatus.CONVERGED:
        grad_mu, grad_psi = _score_from_moments(best.params, best.moments, s)
        score_norm = math.sqrt(float(grad_mu @ grad_mu) + frobenius_norm(grad_psi) ** 2) / s.n
        if score_norm > cfg.score_tolerance:
            logger.warning("得分向量未达到驻点 score_norm=%.3g tolerance=%.3g", score_norm, cfg.score_tolerance)
            status = FitStatus.MAX_ITERATIONS
            message = f"moment residual converged but score norm {score_norm!r} exceeds {cfg.score_tolerance!r}"
        elif q > 1.0 + cfg.q_tolerance:
            logger.warning("必要条件不满足 q=%.6g", q)
            status = FitStatus.NECESSARY_CONDITION_VIOLATED
            message = f"necessary condition violated: q = {q!r}"
    return FitResult(
        params=best.params,
        moments=best.moments,
        status=status,
        residual_norms=tuple(norms),
        iterations=iterations,
        q=q,
        score_norm=score_norm,
        message=message,
    )


def fit(s: Sample, cfg: FitConfig) -> FitResult:
    stats = sample_stats(s)
    start = ModelParams(mu=stats.xbar, sigma=stats.s_xbar)
    try:
        _, n_points, _ = adaptive_log_orthant(start.mu, checked_factor(start.sigma.entries), cfg.integrator)
        system = _MomentSystem(s, stats, cfg, n_points)
        current = system.evaluate(start)
    except _EVALUATION_ERRORS as exc:
        logger.warning("初始点积分失败: %s", exc)
        message = f"integration failed at the starting point: {exc}"
        pair = MomentPair(stats.xbar, stats.s_xbar, np.zeros(s.dim), np.zeros((s.dim, s.dim)))
        return FitResult(start, pair, FitStatus.INTEGRATION_FAILURE, (), 0, message=message)

    make_trial = _quasi_newton_trial if cfg.solver is SolverKind.QUASI_NEWTON else _fixed_point_trial
    norms = [current.norm]
    logger.info("开始拟合 d=%s n=%s solver=%s points=%s", s.dim, s.n, cfg.solver.value, n_points)
    for iteration in range(cfg.max_iterations):
        if system.converged(current):
            logger.info("拟合收敛 iterations=%s residual=%.3g", iteration, current.norm)
            return _finish(s, stats, cfg, current, FitStatus.CONVERGED, norms, iteration)
        try:
            trial = make_trial(system, current)
        except _EVALUATION_ERRORS as exc:
            logger.warning("雅可比矩阵计算失败: %s", exc)
            return _finish(
                s, stats, cfg, current, FitStatus.INTEGRATION_FAILURE, norms, iteration, f"integration failed: {exc}"
            )
        accepted = _backtrack(system, current, trial)
        if accepted is None:
            logger.warning("线搜索未能降低残差，停止迭代 residual=%.3g", current.norm)
            return _finish(
                s, stats, cfg, current, FitStatus.MAX_ITERATIONS, norms, iteration + 1, "line search stalled"
            )
        current = accepted
        norms.append(current.norm)
        logger.debug("迭代 %s residual=%.3g", iteration + 1, current.norm)

    if system.converged(current):
        return _finish(s, stats, cfg, current, FitStatus.CONVERGED, norms, cfg.max_iterations)
    logger.warning("达到最大迭代次数 residual=%.3g", current.norm)
    return _finish(
        s, stats, cfg, current, FitStatus.MAX_ITERATIONS, norms, cfg.max_iterations, "maximum iterations reached"
    )
