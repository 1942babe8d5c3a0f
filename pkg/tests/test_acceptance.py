"""Acceptance suite: every criterion at its stated tolerance, one pass/fail
line per criterion.

Heavy Monte Carlo artifacts (the bundled two-ball experiment, the twenty-seed
KS sweep, the SAA sweep, and the two pillar reports) are computed once in
module-scoped fixtures and shared across criteria.  Criterion 4 asserts the
stated slope bracket for the squared-distance decay; on this instance the
true decay is ~ alpha_k^2 (slope ~ -1.5), so the bracket, which assumes the
upper bound E[dist^2] <= C alpha_k is tight, fails; see the repository notes
for the analysis.  The bound itself is verified separately in the unit suite.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from svilab.asymptotics import predicted_covariance
from svilab.cli import run_experiment
from svilab.config import load_config
from svilab.diagnostics import distance_decay, monte_carlo_clt, monte_carlo_shadow
from svilab.geometry import pinv_on_subspace, tangent_projector
from svilab.problems import build_two_ball_instance
from svilab.solvers import SolverConfig, StepSchedule, run_saa

from test_geometry import circle_manifold, lens_dykstra, lens_min_distance_oracle

SQRT3 = np.sqrt(3.0)
KS_CRITICAL = 0.0962          # 5% critical value 1.36 / sqrt(200)
ACCEPTANCE_SEEDS = range(2000, 2020)
PILLAR_SEED = 77


def _criterion(number, name, ok, detail):
    print(f"[ACCEPTANCE {number}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number} ({name}): {detail}"


def _clt_worker(seed):
    bundle = build_two_ball_instance()
    predicted = predicted_covariance(bundle.vi, bundle.nlp, bundle.x_star)
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=100_000, seed=seed)
    rep = monte_carlo_clt(bundle.vi, bundle.x_star, cfg, 200, predicted, threads=1,
                          instance_token="two_ball")
    return (
        seed,
        float(rep.tangent_components.var(axis=0, ddof=1)[0]),
        float(rep.ks_per_tangent_coordinate[0]),
    )


@pytest.fixture(scope="module")
def figure1_runs(tmp_path_factory):
    """The bundled Figure-1 config executed twice (for the determinism
    criterion); returns the two output directories and the parsed report."""
    import svilab

    cfg_path = Path(svilab.__file__).parent / "configs" / "two_ball_figure1.toml"
    dirs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"figure1_{tag}")
        cfg = load_config(cfg_path)
        code = run_experiment(cfg, out_dir=out, threads=1, config_hash="pinned")
        assert code == 0
        dirs.append(out)
    report = json.loads((dirs[0] / "clt_report.json").read_text())
    return dirs, report


@pytest.fixture(scope="module")
def twenty_seed_sweep():
    with ProcessPoolExecutor(max_workers=2) as pool:
        return list(pool.map(_clt_worker, ACCEPTANCE_SEEDS))


@pytest.fixture(scope="module")
def two_ball_runs(two_ball, two_ball_predicted):
    return two_ball, two_ball_predicted


def test_criterion_1_two_ball_clt(figure1_runs, twenty_seed_sweep):
    _, report = figure1_runs
    variance = report["tangent_variances_empirical"][0]
    assert np.isclose(report["predicted_variance_tangent"][0], 3.0, atol=1e-10)
    ok_var = 2.4 <= variance <= 3.6
    passes = sum(ks < KS_CRITICAL for _, _, ks in twenty_seed_sweep)
    ok_ks = passes >= 0.9 * len(twenty_seed_sweep)
    _criterion(
        1, "two-ball CLT",
        ok_var and ok_ks,
        f"tangent variance {variance:.3f} in [2.4, 3.6]; "
        f"KS < {KS_CRITICAL} in {passes}/{len(twenty_seed_sweep)} master seeds",
    )


def test_criterion_2_tangent_support(figure1_runs):
    _, report = figure1_runs
    late = np.array(report["normal_abs_mean"])
    early = np.array(report["normal_abs_mean_early"])
    # pooled over the two normal coordinates; strictly smaller at K than K/10
    ok_shrink = float(late.sum()) < float(early.sum())
    ratio = report["tangent_to_normal_variance_ratio"]
    ok_ratio = ratio > 10.0
    _criterion(
        2, "tangent support",
        ok_shrink and ok_ratio,
        f"normal |dev| mean {late.sum():.4f} < {early.sum():.4f} at K vs K/10; "
        f"tangent/normal variance ratio {ratio:.0f} > 10",
    )


def test_criterion_3_saa_sfb_agreement(figure1_runs, two_ball_runs):
    two_ball, predicted = two_ball_runs
    k = 10_000
    children = np.random.SeedSequence(321).spawn(200)
    devs = []
    for child in children:
        x, _ = run_saa(two_ball.vi, k, seed=child)
        devs.append(np.sqrt(k) * (x - two_ball.x_star))
    tangent = np.array(devs) @ predicted.tangent_basis
    saa_var = float(tangent.var(axis=0, ddof=1)[0])
    sfb_var = figure1_runs[1]["tangent_variances_empirical"][0]
    ok_saa = 2.4 <= saa_var <= 3.6
    rel = abs(sfb_var - saa_var) / saa_var
    ok_rel = rel < 0.25
    _criterion(
        3, "SAA/SFB agreement",
        ok_saa and ok_rel,
        f"SAA tangent variance {saa_var:.3f} in [2.4, 3.6]; "
        f"relative gap to SFB {100 * rel:.1f}% < 25%",
    )


def test_criterion_4_pillar_one_decay(two_ball_runs):
    two_ball, _ = two_ball_runs
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=100_000,
                       seed=PILLAR_SEED)
    report = distance_decay(two_ball.vi, two_ball.manifold, cfg, 100,
                            k0=100, delta=0.5, threads=1,
                            instance_token="two_ball")
    ok = report.slope is not None and -0.90 <= report.slope <= -0.60
    _criterion(
        4, "pillar I decay",
        ok,
        f"fitted log-log slope {report.slope:.3f} vs stated bracket "
        f"[-0.90, -0.60]; this instance decays at ~ -2*gamma = -1.5 "
        f"(the theoretical bound E[dist^2] <= C*alpha_k holds but is not tight)",
    )


def test_criterion_5_pillar_two_shadow(two_ball_runs):
    two_ball, _ = two_ball_runs
    cfg = SolverConfig(schedule=StepSchedule(1.0, 0.75), iterations=100_000,
                       seed=PILLAR_SEED)
    report = monte_carlo_shadow(two_ball.vi, two_ball.manifold, cfg, 100,
                                k0=100, delta=0.5, f_m=two_ball.f_m, threads=1,
                                instance_token="two_ball")
    ok_slope = report.slope_vs_alpha is not None and report.slope_vs_alpha >= 0.7
    z = np.abs(report.projected_noise_mean) / np.maximum(report.projected_noise_se,
                                                         1e-15)
    ok_noise = bool(np.all(z <= 3.0))
    _criterion(
        5, "pillar II shadow residuals",
        ok_slope and ok_noise,
        f"slope of log avg ||E_k||^2 vs log alpha_k = {report.slope_vs_alpha:.2f} "
        f">= 0.7; projected-noise mean max |z| = {z.max():.2f} <= 3",
    )


def test_criterion_6_kkt_exactness(two_ball_runs):
    two_ball, predicted = two_ball_runs
    kkt = predicted.kkt
    ok = (
        kkt.active_set == [0, 1]
        and np.allclose(kkt.multipliers, 1.0 / (4 * SQRT3), atol=1e-10)
        and abs(kkt.sosc_min_eig - 1.0 / SQRT3) <= 1e-10
        and np.allclose(predicted.solution_jacobian,
                        SQRT3 * np.diag([0.0, 1.0, 0.0]), atol=1e-10)
    )
    _criterion(
        6, "KKT exactness",
        ok,
        f"active set {{1,2}}, multipliers {kkt.multipliers[0]:.12f} "
        f"= 1/(4*sqrt(3)), sosc {kkt.sosc_min_eig:.12f} = 1/sqrt(3), "
        f"solution Jacobian sqrt(3)*diag(0,1,0), all to 1e-10",
    )


def test_criterion_7_oracle_equivalences(two_ball_runs):
    rng = np.random.default_rng(1234)

    # Gauss-Newton manifold projection vs the circle's closed form, 1e3 points
    m_cf = circle_manifold(True)
    m_gn = circle_manifold(False)
    theta = rng.uniform(0, 2 * np.pi, 1000)
    base = np.stack([np.zeros(1000), SQRT3 * np.sin(theta), SQRT3 * np.cos(theta)],
                    axis=1)
    offset = rng.standard_normal((1000, 3))
    offset *= (rng.uniform(0, 0.5, 1000) / np.linalg.norm(offset, axis=1))[:, None]
    pts = base + offset
    gn_gap = float(np.max(np.linalg.norm(
        np.stack([m_gn.project(p) for p in pts]) - m_cf.project(pts), axis=1)))
    ok_gn = gn_gap <= 1e-8

    # Dykstra lens projection vs the boundary-enumeration grid oracle
    s = lens_dykstra()
    grid_gap = 0.0
    for x in (np.array([0.0, 0.0, 3.0]), np.array([0.5, 0.5, 2.5]),
              np.array([-0.4, 1.9, 1.4])):
        p = s.project(x)
        d_grid = lens_min_distance_oracle(x, *s.balls)
        d_dyk = float(np.linalg.norm(p - x))
        assert d_dyk <= d_grid + 1e-9
        grid_gap = max(grid_gap, d_grid - d_dyk)
    ok_grid = grid_gap <= 1e-6

    # Moore-Penrose axioms and projector idempotence
    ok_mp = True
    ok_idem = True
    for _ in range(50):
        d = int(rng.integers(2, 6))
        n = int(rng.integers(1, d))
        jac = rng.standard_normal((n, d))
        p = tangent_projector(jac)
        ok_idem &= float(np.linalg.norm(p @ p - p)) <= 1e-12
        ok_idem &= float(np.linalg.norm(p - p.T)) <= 1e-12
        w = rng.standard_normal((d, d))
        mat = w @ w.T + np.eye(d)              # symmetric positive definite
        a = p @ mat @ p
        a_pinv = pinv_on_subspace(mat, p)
        ok_mp &= float(np.linalg.norm(a_pinv @ a @ a_pinv - a_pinv)) <= 1e-10
        ok_mp &= float(np.linalg.norm(a @ a_pinv @ a - a)) <= 1e-10

    # gradient/Hessian oracles vs central finite differences
    bundle = build_two_ball_instance()
    h = 1e-6
    fd_err = 0.0
    for _ in range(100):
        x = rng.standard_normal(3)
        for cons in bundle.nlp.constraints:
            fd = np.array([
                (cons.value(x + _unit(j, h)) - cons.value(x - _unit(j, h))) / (2 * h)
                for j in range(3)
            ])
            g = cons.grad(x)
            fd_err = max(fd_err, np.linalg.norm(fd - g) / max(1.0, np.linalg.norm(g)))
            fdh = np.stack([
                (cons.grad(x + _unit(j, h)) - cons.grad(x - _unit(j, h))) / (2 * h)
                for j in range(3)
            ]).T
            hh = cons.hess(x)
            fd_err = max(fd_err, np.linalg.norm(fdh - hh) / max(1.0, np.linalg.norm(hh)))
    ok_fd = fd_err <= 1e-5

    _criterion(
        7, "oracle equivalences",
        ok_gn and ok_grid and ok_mp and ok_idem and ok_fd,
        f"GN vs closed form {gn_gap:.2e} <= 1e-8; Dykstra vs grid "
        f"{grid_gap:.2e} <= 1e-6; Moore-Penrose 1e-10 {'ok' if ok_mp else 'BAD'}; "
        f"idempotence 1e-12 {'ok' if ok_idem else 'BAD'}; finite differences "
        f"{fd_err:.2e} <= 1e-5",
    )


def _unit(j, h):
    e = np.zeros(3)
    e[j] = h
    return e


def test_criterion_8_determinism(figure1_runs):
    (dir_a, dir_b), _ = figure1_runs
    mismatched = []
    for path in sorted(dir_a.iterdir()):
        if path.name == "manifest.json":     # carries wall times
            continue
        if path.read_bytes() != (dir_b / path.name).read_bytes():
            mismatched.append(path.name)
    ok = not mismatched
    _criterion(
        8, "determinism",
        ok,
        "re-running the bundled config reproduced byte-identical reports"
        if ok else f"mismatched files: {mismatched}",
    )
