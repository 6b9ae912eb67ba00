from dataclasses import dataclass, field, replace
from typing import Optional

from .models import SamplerMethod, SolverKind


def _next_power_of_two(value: int) -> int:
    return 1 << max(int(value) - 1, 0).bit_length()


@dataclass(frozen=True)
class IntegratorConfig:
    qmc_points: int = 4096
    random_shifts: int = 16
    seed: int = 20240601
    target_rel_error: float = 1e-4
    max_points: int = 1 << 20
    exact_max_dim: int = 2
    workers: int = 1

    def __post_init__(self) -> None:
        if self.qmc_points < 64:
            raise ValueError("qmc_points must be at least 64")
        if self.random_shifts < 2:
            raise ValueError("random_shifts must be at least 2")
        if self.target_rel_error <= 0:
            raise ValueError("target_rel_error must be positive")
        if self.exact_max_dim not in (1, 2):
            raise ValueError("exact_max_dim must be 1 or 2")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        object.__setattr__(self, "qmc_points", _next_power_of_two(self.qmc_points))
        if self.max_points < self.qmc_points * self.random_shifts:
            raise ValueError("max_points must cover one full pass of qmc_points * random_shifts")


@dataclass(frozen=True)
class SamplerConfig:
    method: SamplerMethod = SamplerMethod.REJECTION
    seed: int = 20240601
    burn_in: int = 500
    thinning: int = 5
    chains: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", SamplerMethod(self.method))
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")
        if self.thinning < 1:
            raise ValueError("thinning must be at least 1")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    tolerance: float = 1e-6
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    max_backtracks: int = 30
    backtrack_factor: float = 0.5
    jacobian_step: float = 1e-5
    solver: SolverKind = SolverKind.QUASI_NEWTON
    q_tolerance: float = 1e-8
    score_tolerance: float = 1e-4

    def __post_init__(self) -> None:
        object.__setattr__(self, "solver", SolverKind(self.solver))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tolerance <= 0 or self.jacobian_step <= 0 or self.q_tolerance < 0 or self.score_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclass(frozen=True)
class AppConfig:
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    header: bool = False
    lower: Optional[tuple[float, ...]] = None


def build_fit_config(app: AppConfig) -> FitConfig:
    return replace(app.fit, integrator=app.integrator)
