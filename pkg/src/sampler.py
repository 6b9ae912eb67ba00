"""Seeded draws from N_d(mu, Sigma; 0)."""

import logging
import math

import numpy as np
from numpy.typing import NDArray
from scipy.special import log_ndtr, ndtri_exp

from .config import SamplerConfig
from .errors import AcceptanceTooLowError
from .mle import Sample
from .models import ModelParams, SamplerMethod

MIN_ACCEPTANCE = 1e-4
# Proposals seen before the acceptance check is trusted.
MIN_PROPOSALS_FOR_CHECK = 100_000
_BATCH_CAP = 1 << 20
_U_FLOOR = 2.0**-53

logger = logging.getLogger(__name__)


def _rng(cfg: SamplerConfig, p: ModelParams, stream: int = 0) -> np.random.Generator:
    method_tag = 0 if cfg.method is SamplerMethod.REJECTION else 1
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, method_tag, p.dim, stream]))


def _proposals(rng: np.random.Generator, p: ModelParams, count: int) -> NDArray:
    normals = rng.standard_normal((count, p.dim))
    return p.mu + normals @ p.sigma.factor.T


def acceptance_rate(p: ModelParams, proposals: int, cfg: SamplerConfig) -> float:
    """Fraction of ``proposals`` untruncated draws that land in the open orthant."""
    rng = _rng(cfg, p, stream=1)
    accepted = 0
    remaining = proposals
    while remaining > 0:
        batch = min(remaining, _BATCH_CAP)
        accepted += int(np.sum(np.all(_proposals(rng, p, batch) > 0.0, axis=1)))
        remaining -= batch
    return accepted / proposals


def _rejection(p: ModelParams, n: int, cfg: SamplerConfig) -> NDArray:
    rng = _rng(cfg, p)
    kept: list[NDArray] = []
    have = 0
    proposed = 0
    accepted = 0
    batch = max(1024, 2 * n)
    while have < n:
        draws = _proposals(rng, p, batch)
        inside = draws[np.all(draws > 0.0, axis=1)]
        proposed += batch
        accepted += inside.shape[0]
        kept.append(inside)
        have += inside.shape[0]
        if proposed >= MIN_PROPOSALS_FOR_CHECK and accepted / proposed < MIN_ACCEPTANCE:
            rate = accepted / proposed
            raise AcceptanceTooLowError(
                f"rejection acceptance {rate:.3g} is below {MIN_ACCEPTANCE}; use the gibbs method", rate
            )
        if have < n:
            rate = max(accepted / proposed, MIN_ACCEPTANCE)
            batch = min(_BATCH_CAP, int(math.ceil(1.2 * (n - have) / rate)) + 64)
    logger.debug("拒绝抽样完成 n=%s proposed=%s acceptance=%.4g", n, proposed, accepted / proposed)
    return np.concatenate(kept)[:n]


def _positive_normal(rng: np.random.Generator, mean: NDArray, std: NDArray) -> NDArray:
    """Draw N(mean, std^2) restricted to (0, inf) by inversion of the upper tail in log space."""
    log_tail = log_ndtr(mean / std)
    u = np.clip(rng.random(mean.shape), _U_FLOOR, 1.0)
    draws = mean - std * ndtri_exp(np.log(u) + log_tail)
    # Rounding can put a deep-tail draw exactly on the boundary.
    return np.maximum(draws, np.nextafter(0.0, 1.0))


def _gibbs(p: ModelParams, n: int, cfg: SamplerConfig) -> NDArray:
    rng = _rng(cfg, p)
    dim = p.dim
    precision = p.sigma.inverse()
    diag = np.diag(precision).copy()
    std = 1.0 / np.sqrt(diag)
    chains = cfg.chains
    per_chain = -(-n // chains)
    state = np.tile(np.maximum(p.mu, 1.0), (chains, 1))
    out = np.empty((per_chain, chains, dim))
    total = cfg.burn_in + per_chain * cfg.thinning
    kept = 0
    for sweep in range(total):
        for j in range(dim):
            offset = state - p.mu
            # Conditional mean: mu_j - sum_{k != j} Psi_jk (x_k - mu_k) / Psi_jj.
            partial = offset @ precision[j] - precision[j, j] * offset[:, j]
            cond_mean = p.mu[j] - partial / diag[j]
            state[:, j] = _positive_normal(rng, cond_mean, np.full(chains, std[j]))
        if sweep >= cfg.burn_in and (sweep - cfg.burn_in + 1) % cfg.thinning == 0:
            out[kept] = state
            kept += 1
    logger.debug("Gibbs 抽样完成 n=%s chains=%s sweeps=%s", n, chains, total)
    # Interleave chains so the first n rows draw evenly from every chain.
    return out.reshape(per_chain * chains, dim)[:n]


def sample(p: ModelParams, n: int, cfg: SamplerConfig) -> Sample:
    if n < 1:
        raise ValueError("n must be at least 1")
    if cfg.method is SamplerMethod.REJECTION:
        data = _rejection(p, n, cfg)
    else:
        data = _gibbs(p, n, cfg)
    return Sample(data)
