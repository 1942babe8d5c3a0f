import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri

from svilab.asymptotics import predicted_covariance
from svilab.diagnostics import (
    DegenerateVariance,
    InsufficientSurvivors,
    check_regularity,
    distance_decay,
    ks_statistic,
    monte_carlo_clt,
    monte_carlo_shadow,
    shadow_residuals,
)
from svilab.solvers import SolverConfig, StepSchedule, run_sfb

SQRT3 = np.sqrt(3.0)


# ---------------------------------------------------------------------------
# KS statistic
# ---------------------------------------------------------------------------

def test_ks_statistic_even_quantiles():
    # samples at the quantiles (i - 1/2)/n straddle the CDF evenly
    n = 100
    samples = ndtri((np.arange(1, n + 1) - 0.5) / n)
    assert np.isclose(ks_statistic(samples, 0.0, 1.0), 1.0 / (2 * n))


def test_ks_statistic_single_sample_at_mean():
    assert np.isclose(ks_statistic([0.0], 0.0, 1.0), 0.5)


def test_ks_statistic_null_distribution():
    # classical 5% critical value 1.36/sqrt(200): reject in at most ~5% of
    # seed batches when the samples really are Gaussian
    crit = 1.36 / np.sqrt(200)
    rejections = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = ks_statistic(rng.standard_normal(200) * 2.0, 0.0, 4.0)
        rejections += d >= crit
    assert rejections <= 10     # >= 95% acceptance rate up to binomial noise


def test_ks_statistic_degenerate_variance():
    with pytest.raises(DegenerateVariance):
        ks_statistic([1.0, 2.0], 0.0, 0.0)


@given(mu=st.floats(-3, 3), sd=st.floats(0.1, 3))
@settings(max_examples=30, deadline=None)
def test_ks_statistic_bounds(mu, sd):
    rng = np.random.default_rng(1)
    d = ks_statistic(rng.standard_normal(50), mu, sd**2)
    assert 0.0 < d <= 1.0


# ---------------------------------------------------------------------------
# Monte Carlo CLT
# ---------------------------------------------------------------------------

def test_clt_sanity_on_sample_mean_problem(quadratic):
    # closed-form oracle with no manifold machinery: sqrt(K)(xbar - mu) has
    # covariance I in the limit
    predicted = predicted_covariance(quadratic.vi, quadratic.nlp, quadratic.x_star)
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=20_000, seed=3)
    report = monte_carlo_clt(quadratic.vi, quadratic.x_star, cfg, 200, predicted,
                             threads=1)
    se = np.sqrt(2.0 / (report.included - 1))
    diag = np.diag(report.empirical_covariance)
    assert np.all(np.abs(diag - 1.0) <= 5 * se * 1.2)
    assert report.included + report.excluded == report.reps


def test_clt_tangent_normal_decomposition(two_ball, two_ball_predicted):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=3000, seed=10)
    report = monte_carlo_clt(two_ball.vi, two_ball.x_star, cfg, 40,
                             two_ball_predicted, threads=1)
    u = two_ball_predicted.tangent_basis
    p_t = two_ball_predicted.tangent_projector
    for i in range(report.included):
        d = report.deviations[i]
        recon = u @ report.tangent_components[i] + (np.eye(3) - p_t) @ d
        assert np.linalg.norm(recon - d) <= 1e-12


def test_clt_determinism_and_exclusion(two_ball, two_ball_predicted):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=1000, seed=6)
    r1 = monte_carlo_clt(two_ball.vi, two_ball.x_star, cfg, 25, two_ball_predicted,
                         threads=1)
    r2 = monte_carlo_clt(two_ball.vi, two_ball.x_star, cfg, 25, two_ball_predicted,
                         threads=1)
    assert np.array_equal(r1.deviations, r2.deviations)
    assert np.array_equal(r1.ks_per_tangent_coordinate, r2.ks_per_tangent_coordinate)
    assert r1.included + r1.excluded == 25


def test_clt_counts_diverged_replications(quadratic, two_ball_predicted):
    predicted = predicted_covariance(quadratic.vi, quadratic.nlp, quadratic.x_star)
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=500, seed=2,
                       divergence_bound=3.0)   # mu has norm ~2.3: some runs cross
    report = monte_carlo_clt(quadratic.vi, quadratic.x_star, cfg, 30, predicted,
                             threads=1)
    assert report.excluded > 0
    assert report.included + report.excluded == 30


def test_clt_rejects_gamma_one(two_ball, two_ball_predicted):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 1.0), iterations=100, seed=0)
    with pytest.raises(ValueError):
        monte_carlo_clt(two_ball.vi, two_ball.x_star, cfg, 10, two_ball_predicted)


# ---------------------------------------------------------------------------
# distance decay
# ---------------------------------------------------------------------------

def test_decay_delta_zero_raises(two_ball):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=500, seed=1)
    with pytest.raises(InsufficientSurvivors):
        distance_decay(two_ball.vi, two_ball.manifold, cfg, 40, k0=1, delta=0.0,
                       threads=1)


def test_decay_noise_free_on_manifold_is_degenerate(two_ball_noise_free):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=2000, seed=1,
                       x0=np.array([0.0, 0.0, SQRT3]))
    report = distance_decay(two_ball_noise_free.vi, two_ball_noise_free.manifold,
                            cfg, 40, k0=1, delta=0.5, threads=1)
    assert report.degenerate
    assert report.slope is None
    assert np.nanmax(report.avg_dist_sq) <= 1e-20


def test_decay_bound_holds_empirically(two_ball):
    # E[dist^2 1{tau > k}] <= C alpha_k: the bound direction is testable even
    # though the instance decays faster than the bound
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=20_000, seed=12)
    report = distance_decay(two_ball.vi, two_ball.manifold, cfg, 60, k0=100,
                            delta=0.5, threads=1)
    alphas = StepSchedule(1.0, 0.75).step(report.ks)
    late = report.ks >= 100
    ratios = report.avg_dist_sq[late] / alphas[late]
    assert np.nanmax(ratios) <= 1.0      # C = 1 amply covers this instance
    assert report.slope is not None and report.slope < -0.6
    assert 0 <= report.exit_fraction <= 1


# ---------------------------------------------------------------------------
# shadow residuals
# ---------------------------------------------------------------------------

def test_shadow_noise_free_curvature_bound(two_ball_noise_free):
    # deterministic run riding the rim: E_k is a pure curvature-level error.
    # Taylor-expanding the rim-projected step y -> P(y + alpha*e3) at angle
    # theta gives E = -(alpha/sqrt(3)) [sin(theta)cos(theta) t + sin^2(theta)/2 r]
    # + O(alpha^2), so ||E_k|| <= 2 alpha_k ||F_M(y_k)|| with lots of margin
    # (the normal part of the drift enters linearly in ||F_M||, not
    # quadratically).
    theta = 0.8
    x0 = np.array([0.0, SQRT3 * np.sin(theta), SQRT3 * np.cos(theta)])
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=3000, seed=0,
                       record_stride=1, record_noise=True, x0=x0)
    traj = run_sfb(two_ball_noise_free.vi, cfg, manifold=two_ball_noise_free.manifold)
    m = two_ball_noise_free.manifold
    f_m = two_ball_noise_free.f_m
    y = m.project(traj.iterates)
    alphas = traj.schedule.step(traj.ks[1:])     # step y_i -> y_{i+1} sizes
    e = (y[1:] - y[:-1]) / alphas[:, None] + f_m(y[:-1])
    e_norm = np.linalg.norm(e, axis=1)
    fm_norm = np.linalg.norm(f_m(y[:-1]), axis=1)
    taylor_regime = traj.ks[1:] >= 10            # alpha small enough to expand
    bound = 2.0 * alphas * fm_norm
    assert np.all(e_norm[taylor_regime] <= np.maximum(bound[taylor_regime], 1e-14))
    # the leading constant is 1/sqrt(3): the observed ratio should match it
    ratio = e_norm[taylor_regime] / np.maximum(
        (alphas * fm_norm)[taylor_regime], 1e-300)
    assert 0.3 <= np.median(ratio) <= 0.8
    assert e_norm[-1] <= 1e-4                    # the defect vanishes along the run


def test_shadow_residuals_single_trajectory(two_ball):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=10_000, seed=9,
                       record_stride=1, record_noise=True)
    traj = run_sfb(two_ball.vi, cfg, manifold=two_ball.manifold)
    report = shadow_residuals(two_ball.vi, two_ball.manifold, traj, f_m=two_ball.f_m)
    assert report.observations == 9999
    assert report.slope_vs_alpha is not None and report.slope_vs_alpha > 0.5
    # martingale property of the projected noise, loose bound for one path
    assert np.all(np.abs(report.projected_noise_mean)
                  <= 5 * np.maximum(report.projected_noise_se, 1e-12))


def test_shadow_requires_stride_one(two_ball):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=100, seed=0,
                       record_stride=10)
    traj = run_sfb(two_ball.vi, cfg)
    with pytest.raises(ValueError):
        shadow_residuals(two_ball.vi, two_ball.manifold, traj)


def test_monte_carlo_shadow_report(two_ball):
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=20_000, seed=14)
    report = monte_carlo_shadow(two_ball.vi, two_ball.manifold, cfg, 60,
                                k0=100, delta=0.5, f_m=two_ball.f_m, threads=1)
    assert report.slope_vs_alpha is not None and report.slope_vs_alpha >= 0.7
    assert np.all(np.abs(report.projected_noise_mean)
                  <= 4 * np.maximum(report.projected_noise_se, 1e-15))
    assert report.observations > 0


# ---------------------------------------------------------------------------
# regularity sampling
# ---------------------------------------------------------------------------

def test_regularity_two_ball_aiming_margin(two_ball):
    report = check_regularity(two_ball.vi, two_ball.manifold, two_ball.x_star,
                              n_samples=1000, delta=0.3, seed=0,
                              nlp=two_ball.nlp, f_m=two_ball.f_m)
    assert report.aiming_margin_min > 0
    assert np.isfinite(report.tangent_ratio_max)
    assert report.b_ratio_max is not None
    assert report.strong_a_ratio_max is not None
    # all sampled points were kept away from the manifold
    assert np.min(report.samples["dist"]) > 1e-10


def test_regularity_ratio_stable_under_doubling(two_ball):
    r1 = check_regularity(two_ball.vi, two_ball.manifold, two_ball.x_star,
                          n_samples=500, delta=0.3, seed=1,
                          nlp=two_ball.nlp, f_m=two_ball.f_m)
    r2 = check_regularity(two_ball.vi, two_ball.manifold, two_ball.x_star,
                          n_samples=1000, delta=0.3, seed=1,
                          nlp=two_ball.nlp, f_m=two_ball.f_m)
    assert r2.tangent_ratio_max <= 2 * r1.tangent_ratio_max
    assert r1.tangent_ratio_max <= 2 * r2.tangent_ratio_max


def test_regularity_reproducible_from_stored_samples(two_ball):
    report = check_regularity(two_ball.vi, two_ball.manifold, two_ball.x_star,
                              n_samples=300, delta=0.3, seed=5,
                              f_m=two_ball.f_m)
    from svilab.solvers import generalized_gradient

    s = report.samples
    m = two_ball.manifold
    for i in range(0, len(s["x"]), 37):
        x, z, alpha = s["x"][i], s["z"][i], float(s["alpha"][i])
        nu = two_ball.vi.sample_map(x, z) - two_ball.vi.mean_map(x)
        y = m.project(x)
        dist = float(np.linalg.norm(x - y))
        g = generalized_gradient(two_ball.vi, alpha, x, nu)
        margin = float((g - nu) @ (x - y) / dist)
        assert np.isclose(margin, s["margin"][i], rtol=1e-10)
