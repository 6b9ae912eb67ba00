import math

import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from src.errors import DivergentParameterError, ThetaNotPdError
from src.expfam import (
    classify_parameter,
    cgf,
    from_natural,
    grad_cgf,
    laplace_transform,
    log_density_natural,
    steepness_probe,
    sufficient_stats,
    to_natural,
)
from src.models import IntegrationMethod, ModelParams, NaturalParams, ParamTag

HALF = 0.5

# (theta, Theta, expected tag, expected rank)
CLASSIFY_CASES = [
    ([0.0], [[HALF]], ParamTag.OMEGA_R, 1),
    ([3.0], [[2.0]], ParamTag.OMEGA_R, 1),
    ([-1.0], [[0.0]], ParamTag.OMEGA_R, 0),
    ([0.0], [[0.0]], ParamTag.OUTSIDE_D, None),
    ([1.0], [[0.0]], ParamTag.OUTSIDE_D, None),
    ([1.0], [[-1.0]], ParamTag.OUTSIDE_D, None),
    ([0.0, 0.0], np.eye(2) * HALF, ParamTag.OMEGA_R, 2),
    ([5.0, -5.0], [[1.0, 0.9], [0.9, 1.0]], ParamTag.OMEGA_R, 2),
    ([-1.0, -2.0], np.zeros((2, 2)), ParamTag.OMEGA_R, 0),
    ([-1.0, 0.0], np.zeros((2, 2)), ParamTag.OUTSIDE_D, None),
    ([-1.0, 1.0], np.zeros((2, 2)), ParamTag.OUTSIDE_D, None),
    ([5.0, -1.0], [[1.0, 0.0], [0.0, 0.0]], ParamTag.OMEGA_R, 1),
    ([-1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]], ParamTag.OUTSIDE_D, None),
    ([-1.0, 2.0], [[1.0, 0.0], [0.0, 0.0]], ParamTag.OUTSIDE_D, None),
    ([-1.0, -1.0], [[HALF, -HALF], [-HALF, HALF]], ParamTag.OMEGA_R, 1),
    ([1.0, -2.0], [[HALF, -HALF], [-HALF, HALF]], ParamTag.OMEGA_R, 1),
    ([2.0, -2.0], [[HALF, -HALF], [-HALF, HALF]], ParamTag.OUTSIDE_D, None),
    ([2.0, -1.0], [[HALF, -HALF], [-HALF, HALF]], ParamTag.OUTSIDE_D, None),
    ([100.0, 100.0], [[1.0, 1.0], [1.0, 1.0]], ParamTag.OMEGA_R, 1),
    ([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], ParamTag.OUTSIDE_D, None),
    ([-1.0, -1.0], [[-1.0, 0.0], [0.0, -1.0]], ParamTag.OUTSIDE_D, None),
    ([-1.0, -1.0, -1.0], np.zeros((3, 3)), ParamTag.OMEGA_R, 0),
    ([-1.0, -1.0, 5.0], np.diag([0.0, 0.0, 1.0]), ParamTag.OMEGA_R, 1),
    ([-1.0, 0.5, 5.0], np.diag([0.0, 0.0, 1.0]), ParamTag.OUTSIDE_D, None),
    ([3.0, 3.0, -1.0], np.diag([1.0, 1.0, 0.0]), ParamTag.OMEGA_R, 2),
    ([3.0, 3.0, 0.0], np.diag([1.0, 1.0, 0.0]), ParamTag.OUTSIDE_D, None),
    ([0.0, 0.0, 0.0], np.eye(3), ParamTag.OMEGA_R, 3),
]


def _natural(theta, big_theta):
    return NaturalParams.create(theta, big_theta)


def test_natural_round_trip():
    p = ModelParams.create([0.5, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    natural = to_natural(p)
    assert np.allclose(natural.big_theta.entries, 0.5 * np.linalg.inv(p.sigma.entries))
    assert np.allclose(natural.theta, np.linalg.solve(p.sigma.entries, p.mu))
    back = from_natural(natural)
    assert np.allclose(back.mu, p.mu)
    assert np.allclose(back.sigma.entries, p.sigma.entries)


def test_from_natural_rejects_singular_theta():
    with pytest.raises(ThetaNotPdError):
        from_natural(_natural([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]]))


def test_sufficient_stats_layout():
    stats = sufficient_stats([1.0, 2.0])
    assert stats.values.tolist() == [1.0, 2.0, 1.0, 2.0, 4.0]
    assert stats.size == 5
    assert sufficient_stats(np.ones(4)).size == 14


@pytest.mark.parametrize("theta, big_theta, tag, rank", CLASSIFY_CASES)
def test_classify_parameter_table(theta, big_theta, tag, rank):
    result = classify_parameter(_natural(theta, big_theta))
    assert result.tag is tag
    assert result.rank == rank


@pytest.mark.parametrize("theta, big_theta, tag, rank", CLASSIFY_CASES)
def test_classify_parameter_is_scale_and_permutation_invariant(theta, big_theta, tag, rank):
    theta = np.asarray(theta, dtype=float)
    big_theta = np.asarray(big_theta, dtype=float)
    scaled = classify_parameter(_natural(7.5 * theta, 7.5 * big_theta))
    assert scaled.tag is tag
    order = np.arange(theta.shape[0])[::-1]
    permuted = classify_parameter(_natural(theta[order], big_theta[np.ix_(order, order)]))
    assert permuted.tag is tag
    assert permuted.rank == rank


def test_outside_certificate_is_a_ray_in_the_orthant():
    result = classify_parameter(_natural([2.0, -1.0], [[HALF, -HALF], [-HALF, HALF]]))
    ray = np.asarray(result.certificate)
    assert np.all(ray >= -1e-12)
    assert np.allclose(ray, [0.5, 0.5])


def test_classification_agrees_with_truncated_integral():
    """Membership matches whether the integral over a growing box levels off."""
    cases = [
        ([-1.0, -1.0], [[HALF, -HALF], [-HALF, HALF]]),
        ([0.5, -1.0], [[1.0, 0.0], [0.0, 0.0]]),
        ([0.5, 0.5], [[HALF, -HALF], [-HALF, HALF]]),
        ([-0.5, 0.2], np.zeros((2, 2))),
    ]
    for theta, big_theta in cases:
        big_theta = np.asarray(big_theta)

        def box(size):
            value, _ = dblquad(
                lambda y, x: math.exp(theta[0] * x + theta[1] * y - np.array([x, y]) @ big_theta @ np.array([x, y])),
                0.0,
                size,
                0.0,
                size,
            )
            return value

        grows = box(80.0) > 1.5 * box(40.0)
        assert classify_parameter(_natural(theta, big_theta)).in_domain is not grows


def test_laplace_transform_full_rank_values(integrator):
    one_dim = laplace_transform(_natural([0.0], [[HALF]]), integrator)
    assert one_dim.value == pytest.approx(math.sqrt(math.pi / 2), rel=1e-12)
    two_dim = laplace_transform(_natural([0.0, 0.0], np.eye(2) * HALF), integrator)
    assert two_dim.value == pytest.approx(math.pi / 2, rel=1e-10)

    shifted = laplace_transform(_natural([-1.0], [[HALF]]), integrator)
    expected, _ = quad(lambda t: math.exp(-t - 0.5 * t * t), 0.0, np.inf)
    assert shifted.value == pytest.approx(expected, rel=1e-10)
    assert shifted.value == pytest.approx(0.655680, abs=1e-6)


def test_laplace_transform_rank_zero_closed_form(integrator):
    estimate = laplace_transform(_natural([-1.0, -1.0], np.zeros((2, 2))), integrator)
    assert estimate.method is IntegrationMethod.CLOSED_FORM
    assert estimate.value == 1.0
    estimate = laplace_transform(_natural([-2.0, -0.5, -4.0], np.zeros((3, 3))), integrator)
    assert estimate.log_value == pytest.approx(-math.log(4.0))


def test_laplace_transform_rank_deficient_importance(integrator):
    estimate = laplace_transform(_natural([0.0, -1.0], [[1.0, 0.0], [0.0, 0.0]]), integrator)
    assert estimate.method is IntegrationMethod.IMPORTANCE
    assert estimate.value == pytest.approx(math.sqrt(math.pi) / 2, rel=5e-3)

    big_theta = np.array([[HALF, -HALF], [-HALF, HALF]])
    estimate = laplace_transform(_natural([-1.0, -1.0], big_theta), integrator)
    expected, _ = dblquad(lambda y, x: math.exp(-x - y - 0.5 * (x - y) ** 2), 0.0, np.inf, 0.0, np.inf)
    assert estimate.value == pytest.approx(expected, rel=1e-2)


def test_laplace_transform_outside_domain_raises(integrator):
    with pytest.raises(DivergentParameterError):
        laplace_transform(_natural([1.0, 1.0], np.zeros((2, 2))), integrator)


def test_cgf_is_convex_along_a_segment(integrator):
    a = _natural([0.5, -1.0], [[1.0, 0.2], [0.2, 0.7]])
    b = _natural([-1.5, 0.3], [[0.6, -0.1], [-0.1, 1.4]])
    mid = _natural(
        0.5 * (a.theta + b.theta), 0.5 * (a.big_theta.entries + b.big_theta.entries)
    )
    assert cgf(mid, integrator) <= 0.5 * (cgf(a, integrator) + cgf(b, integrator)) + 1e-12


def test_grad_cgf_half_normal(integrator):
    grad_theta, grad_big_theta = grad_cgf(_natural([0.0], [[HALF]]), integrator)
    assert grad_theta[0] == pytest.approx(math.sqrt(2 / math.pi), abs=1e-10)
    assert grad_big_theta.entries[0, 0] == pytest.approx(-1.0, abs=1e-6)


def _central_difference(f, x, bump):
    return (f(x + bump) - f(x - bump)) / (2 * np.max(np.abs(bump)))


@pytest.mark.parametrize("seed", range(20))
def test_grad_cgf_matches_finite_differences(integrator, seed):
    rng = np.random.default_rng(500 + seed)
    dim = 1 + seed % 2
    theta = rng.normal(scale=0.5, size=dim)
    a = rng.normal(size=(dim, dim))
    big_theta = a @ a.T / dim + 0.3 * np.eye(dim)
    grad_theta, grad_big_theta = grad_cgf(_natural(theta, big_theta), integrator)
    h = 1e-5

    def along_theta(t):
        return cgf(_natural(t, big_theta), integrator)

    def along_big_theta(b):
        return cgf(_natural(theta, b), integrator)

    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        assert _central_difference(along_theta, theta, e) == pytest.approx(grad_theta[i], abs=1e-4, rel=1e-6)
    for i in range(dim):
        for j in range(i, dim):
            bump = np.zeros((dim, dim))
            bump[i, j] = h
            bump[j, i] = h
            fd = _central_difference(along_big_theta, big_theta, bump)
            # Off the diagonal the free coordinate moves Theta_ij and Theta_ji together.
            expected = grad_big_theta.entries[i, j] * (1.0 if i == j else 2.0)
            assert fd == pytest.approx(expected, abs=1e-4, rel=1e-6)


def test_log_density_natural_integrates_to_one(integrator):
    natural = _natural([-1.0], [[HALF]])
    total, _ = quad(lambda t: math.exp(log_density_natural([t], natural, integrator)), 0.0, np.inf)
    assert total == pytest.approx(1.0, rel=1e-8)
    assert log_density_natural([-1.0], natural, integrator) == -math.inf


def test_steepness_probe_approaches_corrected_limit(integrator):
    trace = steepness_probe([-1.0, -1.0], integrator)
    assert len(trace.records) == 7
    assert trace.limit_norm_sq == pytest.approx(12.0)
    assert trace.limit_norm_sq_product_form == pytest.approx(6.0)
    assert trace.records[-1].norm_sq == pytest.approx(12.0, rel=0.02)
    assert np.allclose(trace.records[-1].grad_theta, trace.limit_grad_theta, rtol=0.01)
    assert np.allclose(trace.records[-1].grad_big_theta, trace.limit_grad_big_theta, rtol=0.02)


def test_steepness_probe_limit_for_rate_two(integrator):
    trace = steepness_probe([-2.0, -2.0], integrator)
    assert trace.limit_norm_sq == pytest.approx(1.125)
    assert trace.records[-1].norm_sq == pytest.approx(1.125, rel=0.02)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_steepness_probe_theta_dot_gradient_tends_to_minus_d(integrator, dim):
    rng = np.random.default_rng(dim)
    theta = rng.uniform(-3.0, -0.8, size=dim)
    trace = steepness_probe(theta, integrator)
    assert trace.limit_theta_dot_grad == -dim
    assert trace.records[-1].theta_dot_grad == pytest.approx(-dim, abs=0.05)


def test_steepness_probe_increments_shrink(integrator):
    trace = steepness_probe([-1.0, -1.5], integrator)
    increments = [record.increment for record in trace.records]
    assert increments[0] is None
    assert increments[-1] < increments[1]


def test_steepness_probe_custom_path(integrator):
    shape = np.array([[1.0, 0.5], [0.5, 1.0]])
    theta = np.array([-1.0, -1.0])
    trace = steepness_probe(theta, integrator, epsilons=(0.5, 0.1), big_theta_for=lambda eps: eps * shape)
    assert [record.epsilon for record in trace.records] == [0.5, 0.1]
    expected, _ = grad_cgf(_natural(theta, 0.1 * shape), integrator)
    assert np.allclose(trace.records[-1].grad_theta, expected)


def test_steepness_probe_rejects_bad_input(integrator):
    with pytest.raises(ValueError, match="componentwise negative"):
        steepness_probe([-1.0, 0.0], integrator)
    with pytest.raises(ValueError):
        steepness_probe([-1.0], integrator, epsilons=(0.1, 0.3))
    with pytest.raises(ValueError):
        steepness_probe([-1.0], integrator, epsilons=(0.1, 0.0))
