import dataclasses

import numpy as np
import pytest

from svilab.asymptotics import (
    Infeasible,
    active_set,
    covariant_hessian,
    estimate_noise_covariance,
    kkt_report,
    lagrange_multipliers,
    lagrangian_grad,
    lagrangian_hess,
    predicted_covariance,
    solution_jacobian,
)
from svilab.geometry import RankDeficient, SingularOnTangent, tangent_projector
from svilab.problems import build_box_linear_instance, build_halfspace_instance

SQRT3 = np.sqrt(3.0)
RNG = np.random.default_rng(424242)


# ---------------------------------------------------------------------------
# active sets and multipliers
# ---------------------------------------------------------------------------

def test_active_set_cases(two_ball):
    nlp = two_ball.nlp
    assert active_set(nlp, two_ball.x_star, 1e-8) == [0, 1]
    assert active_set(nlp, np.zeros(3), 1e-8) == []           # interior: g = -3
    assert active_set(nlp, np.array([1.0, 0, 0]), 1e-8) == [0]
    with pytest.raises(Infeasible):
        active_set(nlp, np.array([0.0, 0.0, 3.0]), 1e-8)


def test_lagrange_multipliers_two_ball(two_ball):
    y, residual = lagrange_multipliers(two_ball.nlp, two_ball.x_star, [0, 1])
    assert np.allclose(y, 1.0 / (4 * SQRT3), atol=1e-14)
    assert residual <= 1e-13
    assert np.isclose(y[0], 0.14433756729740646)


def test_lagrange_multipliers_halfspace():
    bundle = build_halfspace_instance()
    y, residual = lagrange_multipliers(bundle.nlp, bundle.x_star, [0])
    assert np.isclose(y[0], 1.0)
    assert residual <= 1e-14


def test_lagrange_multipliers_empty_active(two_ball):
    y, residual = lagrange_multipliers(two_ball.nlp, np.zeros(3), [])
    assert np.array_equal(y, np.zeros(2))
    assert np.isclose(residual, 1.0)    # ||grad f|| = ||(0,0,-1)||


def test_lagrange_multipliers_rank_deficient(two_ball):
    nlp = two_ball.nlp
    doubled = dataclasses.replace(nlp, constraints=(nlp.constraints[0],) * 2)
    with pytest.raises(RankDeficient):
        lagrange_multipliers(doubled, np.array([1.0, 0.0, 0.0]), [0, 1])


# ---------------------------------------------------------------------------
# covariant Hessian and the solution-map Jacobian
# ---------------------------------------------------------------------------

def test_covariant_hessian_two_ball(two_ball):
    y = np.full(2, 1.0 / (4 * SQRT3))
    sigma = covariant_hessian(two_ball.nlp, two_ball.x_star, y)
    assert np.allclose(sigma, np.diag([0.0, 1.0, 0.0]) / SQRT3, atol=1e-12)


def test_covariant_hessian_unconstrained_quadratic(quadratic):
    sigma = covariant_hessian(quadratic.nlp, quadratic.x_star, np.zeros(0))
    assert np.allclose(sigma, np.eye(3), atol=1e-12)


def test_covariant_hessian_linear_program():
    bundle = build_box_linear_instance()
    rep = kkt_report(bundle.nlp, bundle.x_star)
    sigma = covariant_hessian(bundle.nlp, bundle.x_star, rep.multipliers)
    assert np.allclose(sigma, 0.0, atol=1e-12)


def test_solution_jacobian_two_ball(two_ball):
    p_t = np.diag([0.0, 1.0, 0.0])
    jac = solution_jacobian(np.diag([0.0, 1.0, 0.0]) / SQRT3, p_t)
    assert np.allclose(jac, SQRT3 * np.diag([0.0, 1.0, 0.0]), atol=1e-10)


def test_solution_jacobian_identity():
    assert np.allclose(solution_jacobian(np.eye(3), np.eye(3)), np.eye(3))


def test_solution_jacobian_singular():
    with pytest.raises(SingularOnTangent):
        solution_jacobian(np.zeros((3, 3)), np.diag([0.0, 1.0, 0.0]))


def test_hessian_matches_finite_differences(two_ball):
    h = 1e-5
    nlp = two_ball.nlp
    for _ in range(10):
        x = RNG.standard_normal(3)
        y = RNG.standard_normal(2)
        hess = lagrangian_hess(nlp, x, y)
        fd = np.zeros((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            fd[:, j] = (lagrangian_grad(nlp, x + e, y) - lagrangian_grad(nlp, x - e, y)) / (2 * h)
        assert np.linalg.norm(fd - hess) <= 1e-5 * max(1.0, np.linalg.norm(hess))


# ---------------------------------------------------------------------------
# the full KKT report and predicted covariance
# ---------------------------------------------------------------------------

def test_kkt_report_two_ball(two_ball):
    rep = kkt_report(two_ball.nlp, two_ball.x_star)
    assert rep.active_set == [0, 1]
    assert rep.licq_ok
    assert np.isclose(rep.licq_min_singular_value, 2 * np.sqrt(2))
    assert np.isclose(rep.strict_complementarity_margin, 1 / (4 * SQRT3))
    assert np.isclose(rep.sosc_min_eig, 1 / SQRT3)
    assert rep.stationarity_residual <= 1e-13
    assert np.all(rep.multipliers >= -1e-12)
    assert np.all(rep.multipliers[rep.active_set] > 0)


def test_predicted_covariance_two_ball(two_ball, two_ball_predicted):
    rep = two_ball_predicted
    assert np.allclose(rep.predicted_covariance, 3.0 * np.diag([0, 1.0, 0]), atol=1e-10)
    assert np.allclose(rep.solution_jacobian, SQRT3 * np.diag([0, 1.0, 0]), atol=1e-10)
    assert rep.tangent_dim == 1
    assert np.allclose(np.abs(rep.tangent_basis[:, 0]), [0, 1, 0])
    assert np.allclose(rep.tangent_variances(), [3.0], atol=1e-10)


def test_predicted_covariance_quadratic(quadratic):
    rep = predicted_covariance(quadratic.vi, quadratic.nlp, quadratic.x_star)
    assert np.allclose(rep.predicted_covariance, np.eye(3), atol=1e-10)
    assert rep.tangent_dim == 3


def test_predicted_covariance_zero_noise():
    bundle = build_box_linear_instance()
    rep = predicted_covariance(bundle.vi, bundle.nlp, bundle.x_star)
    assert np.allclose(rep.predicted_covariance, 0.0, atol=1e-12)
    assert rep.tangent_dim == 0


def test_predicted_covariance_range_confinement(two_ball_predicted):
    rep = two_ball_predicted
    p_t = rep.tangent_projector
    off = (np.eye(3) - p_t) @ rep.predicted_covariance
    assert np.linalg.norm(off) <= 1e-10
    assert np.linalg.norm(rep.predicted_covariance @ (np.eye(3) - p_t)) <= 1e-10
    # pseudoinverse identities for the covariant Hessian
    sig = rep.covariant_hessian
    jac = rep.solution_jacobian
    assert np.linalg.norm(jac @ sig @ jac - jac) <= 1e-10
    assert np.linalg.norm(sig @ jac @ sig - sig) <= 1e-10


def test_predicted_covariance_monte_carlo_fallback(two_ball):
    vi = dataclasses.replace(two_ball.vi, noise_covariance=None)
    rep = predicted_covariance(vi, two_ball.nlp, two_ball.x_star,
                               mc_samples=40_000, seed=1)
    assert rep.noise_covariance_se is not None
    err = rep.noise_covariance - np.eye(3)
    assert np.all(np.abs(err) <= 4 * np.maximum(rep.noise_covariance_se, 1e-6))
    assert abs(rep.predicted_covariance[1, 1] - 3.0) <= 0.15


def test_estimate_noise_covariance_zero_for_deterministic():
    bundle = build_box_linear_instance()
    cov, se = estimate_noise_covariance(bundle.vi, bundle.x_star, 100)
    assert np.allclose(cov, 0.0)


def test_report_json_schema(two_ball_predicted):
    payload = two_ball_predicted.to_json_dict()
    assert set(payload) == {
        "active_set", "multipliers", "licq_min_singular_value", "sc_margin",
        "sosc_min_eig", "tangent_dim", "predicted_covariance",
    }
    assert payload["tangent_dim"] == 1
    assert np.isclose(payload["predicted_covariance"][1][1], 3.0)


def test_strict_complementarity_warning(two_ball):
    # shifting the objective gradient into the first constraint's span makes
    # the second multiplier vanish: margin ~ 0 warns but does not raise
    nlp = two_ball.nlp
    g1 = nlp.constraints[0].grad(two_ball.x_star)
    tilted = dataclasses.replace(
        nlp,
        objective_grad=lambda x: -g1,
        objective_value=lambda x: float(-g1 @ np.asarray(x)),
    )
    with pytest.warns(UserWarning, match="strict complementarity"):
        predicted_covariance(two_ball.vi, tilted, two_ball.x_star)
