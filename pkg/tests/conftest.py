import os
import sys

import pytest

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from src.config import IntegratorConfig  # noqa: E402


@pytest.fixture
def integrator() -> IntegratorConfig:
    """Small deterministic integrator for QMC paths."""
    return IntegratorConfig(
        qmc_points=1024,
        random_shifts=16,
        seed=7,
        target_rel_error=1e-3,
        max_points=1 << 18,
    )
