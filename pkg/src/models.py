from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .matrix_core import SpdMatrix, SymMatrix, as_vector


class IntegrationMethod(str, Enum):
    EXACT1D = "exact1d"
    EXACT2D = "exact2d"
    QMC = "qmc"
    FINITE_DIFF = "finite_diff"
    IMPORTANCE = "importance"
    CLOSED_FORM = "closed_form"


class GradientMethod(str, Enum):
    REDUCTION = "reduction"
    FINITE_DIFF = "finite_diff"


class SamplerMethod(str, Enum):
    REJECTION = "rejection"
    GIBBS = "gibbs"


class SolverKind(str, Enum):
    QUASI_NEWTON = "quasi-newton"
    FIXED_POINT = "fixed-point"


class FitStatus(str, Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    NECESSARY_CONDITION_VIOLATED = "necessary_condition_violated"
    INTEGRATION_FAILURE = "integration_failure"


class ParamTag(str, Enum):
    OMEGA_R = "omega_r"
    OUTSIDE_D = "outside_d"


@dataclass(frozen=True, eq=False)
class ModelParams:
    """(mu, Sigma) of the zero-truncated normal N_d(mu, Sigma; 0)."""

    mu: NDArray
    sigma: SpdMatrix

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", as_vector(self.mu, self.sigma.dim))

    @classmethod
    def create(cls, mu: ArrayLike, sigma: ArrayLike) -> "ModelParams":
        return cls(mu=np.asarray(mu, dtype=float), sigma=SpdMatrix(np.asarray(sigma, dtype=float)))

    @property
    def dim(self) -> int:
        return self.sigma.dim

    def with_mu(self, mu: ArrayLike) -> "ModelParams":
        return ModelParams(mu=np.asarray(mu, dtype=float), sigma=self.sigma)

    def permuted(self, order: ArrayLike) -> "ModelParams":
        order = np.asarray(order, dtype=int)
        return ModelParams.create(self.mu[order], self.sigma.entries[np.ix_(order, order)])

    def shifted(self, lower: ArrayLike) -> "ModelParams":
        """Same distribution on the scale where the truncation point sits at ``lower``."""
        return ModelParams(mu=self.mu + as_vector(lower, self.dim), sigma=self.sigma)


@dataclass(frozen=True, eq=False)
class NaturalParams:
    theta: NDArray
    big_theta: SymMatrix

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", as_vector(self.theta, self.big_theta.dim))

    @classmethod
    def create(cls, theta: ArrayLike, big_theta: ArrayLike) -> "NaturalParams":
        return cls(theta=np.asarray(theta, dtype=float), big_theta=SymMatrix(np.asarray(big_theta, dtype=float)))

    @property
    def dim(self) -> int:
        return self.big_theta.dim


@dataclass(frozen=True, eq=False)
class MomentPair:
    nu: NDArray
    lam: SymMatrix
    nu_std_error: NDArray
    lam_std_error: NDArray
