"""Monte Carlo verification of the limit theorems and regularity assumptions.

Four report families:

* CLT of the averaged iterates: rescaled deviations sqrt(K)(xbar_K - x*)
  across replications, their tangent/normal split, and per-coordinate
  Kolmogorov-Smirnov statistics against the predicted Gaussian.
* Distance decay: per-step E[dist^2(x_k, M) 1{tau > k}] and its log-log
  slope in k.
* Shadow residuals: the defect E_k of the projected iterates against the
  inexact Riemannian recursion, and the martingale check on projected noise.
* Regularity sampling: empirical aiming margins and tangent-comparison
  ratios at stratified distances from the manifold.

Replications are embarrassingly parallel; reductions happen in a fixed
order so every report is bit-reproducible given (master seed, R, K, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .asymptotics import AsymptoticsReport
from .engine import BatchOptions, run_batch
from .geometry import IndicatorProx, Manifold
from .problems import StochasticVIProblem
from .solvers import SolverConfig, Trajectory, generalized_gradient


class DegenerateVariance(Exception):
    """KS comparison against a Gaussian with nonpositive variance."""


class InsufficientSurvivors(Exception):
    """Fewer than the required replications stayed inside the locality ball."""


MIN_SURVIVORS = 30
MIN_FIT_POINTS = 20


def ks_statistic(samples, mean, variance):
    """One-sample Kolmogorov-Smirnov distance to N(mean, variance).

    D = max_i max(i/n - F(x_(i)), F(x_(i)) - (i-1)/n) over the sorted sample.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("KS statistic needs a nonempty sample")
    if variance <= 0:
        raise DegenerateVariance(f"variance {variance} must be positive")
    s = np.sort(samples)
    f = ndtr((s - mean) / np.sqrt(variance))
    n = len(s)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def _loglog_slope(ks, values):
    """OLS slope of log(values) against log(ks); NaN-safe ValueError on
    insufficient points."""
    ks = np.asarray(ks, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = (values > 0) & np.isfinite(values)
    if np.count_nonzero(mask) < MIN_FIT_POINTS:
        raise ValueError(
            f"slope fit needs at least {MIN_FIT_POINTS} positive points, "
            f"got {np.count_nonzero(mask)}"
        )
    coeff = np.polyfit(np.log(ks[mask]), np.log(values[mask]), 1)
    return float(coeff[0])


def _log_spaced_indices(k_min, k_max, count=60):
    ks = np.unique(np.round(np.geomspace(k_min, k_max, count)).astype(int))
    return ks[(ks >= k_min) & (ks <= k_max)]


# ---------------------------------------------------------------------------
# CLT of averaged iterates
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CLTReport:
    reps: int
    included: int
    excluded: int
    horizon: int
    deviations: np.ndarray              # (included, d) at the horizon
    deviations_early: np.ndarray        # (included, d) at horizon // 10
    early_horizon: int
    tangent_components: np.ndarray      # (included, m) in the U basis
    normal_components: np.ndarray       # (included, d)
    empirical_covariance: np.ndarray
    empirical_covariance_se: np.ndarray
    ks_per_tangent_coordinate: np.ndarray
    predicted_tangent_variances: np.ndarray
    predicted_covariance: np.ndarray
    normal_abs_mean: np.ndarray         # per normal coordinate, at horizon
    normal_abs_mean_early: np.ndarray
    tangent_to_normal_variance_ratio: float
    master_seed: int

    def to_json_dict(self):
        return {
            "reps": self.reps,
            "included": self.included,
            "excluded": self.excluded,
            "horizon": self.horizon,
            "early_horizon": self.early_horizon,
            "master_seed": self.master_seed,
            "empirical_covariance": _listify(self.empirical_covariance),
            "empirical_covariance_se": _listify(self.empirical_covariance_se),
            "tangent_variances_empirical": [
                float(v) for v in self.tangent_components.var(axis=0, ddof=1)
            ],
            "predicted_variance_tangent": _listify(self.predicted_tangent_variances),
            "ks_per_tangent_coordinate": _listify(self.ks_per_tangent_coordinate),
            "normal_abs_mean": _listify(self.normal_abs_mean),
            "normal_abs_mean_early": _listify(self.normal_abs_mean_early),
            "tangent_to_normal_variance_ratio": float(
                self.tangent_to_normal_variance_ratio
            ),
            "predicted_covariance": _listify(self.predicted_covariance),
        }


def _listify(arr):
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim == 1:
        return [float(v) for v in arr]
    return [_listify(row) for row in arr]


def monte_carlo_clt(problem: StochasticVIProblem, x_star, config: SolverConfig,
                    reps: int, predicted: AsymptoticsReport, manifold=None,
                    threads=None, instance_token=None) -> CLTReport:
    """Replicate the averaged SFB run and compare the law of the rescaled
    deviations with the predicted Gaussian.

    Requires gamma in (1/2, 1): the averaging theorem excludes gamma = 1.
    Diverged replications are excluded from the statistics but counted.
    """
    if not 0.5 < config.schedule.gamma < 1.0:
        raise ValueError("the normality regime needs gamma in (1/2, 1)")
    x_star = np.asarray(x_star, dtype=float)
    k_total = config.iterations
    early = max(k_total // 10, 1)
    result = run_batch(
        problem,
        config.schedule,
        k_total,
        reps,
        config.seed,
        x0=config.x0,
        manifold=manifold,
        options=BatchOptions(
            snapshots=(early,),
            divergence_bound=config.divergence_bound,
            block=config.block,
        ),
        threads=threads,
        instance_token=instance_token,
    )
    keep = ~result.diverged
    included = int(np.count_nonzero(keep))
    if included == 0:
        raise InsufficientSurvivors("all replications diverged")
    dev = np.sqrt(k_total) * (result.xbar_final[keep] - x_star)
    dev_early = np.sqrt(early) * (result.snapshots[early][keep] - x_star)

    u = predicted.tangent_basis
    p_t = predicted.tangent_projector
    tangent = dev @ u
    normal = dev - dev @ p_t
    normal_early = dev_early - dev_early @ p_t

    centered = dev - dev.mean(axis=0)
    cov = centered.T @ centered / max(included - 1, 1)
    prod = centered[:, :, None] * centered[:, None, :]
    cov_se = prod.std(axis=0, ddof=1) / np.sqrt(included)

    pred_vars = predicted.tangent_variances()
    ks = np.array([
        ks_statistic(tangent[:, j], 0.0, pred_vars[j])
        for j in range(tangent.shape[1])
    ]) if tangent.shape[1] else np.zeros(0)

    tangent_var = tangent.var(axis=0, ddof=1) if tangent.size else np.zeros(0)
    normal_var = normal.var(axis=0, ddof=1)
    normal_dim = problem.dim - u.shape[1]
    if normal_dim > 0 and tangent.shape[1] > 0:
        ratio = float(tangent_var.mean() / (normal_var.sum() / normal_dim))
    else:
        ratio = np.inf
    return CLTReport(
        reps=reps,
        included=included,
        excluded=reps - included,
        horizon=k_total,
        deviations=dev,
        deviations_early=dev_early,
        early_horizon=early,
        tangent_components=tangent,
        normal_components=normal,
        empirical_covariance=cov,
        empirical_covariance_se=cov_se,
        ks_per_tangent_coordinate=ks,
        predicted_tangent_variances=pred_vars,
        predicted_covariance=predicted.predicted_covariance,
        normal_abs_mean=np.abs(normal).mean(axis=0),
        normal_abs_mean_early=np.abs(normal_early).mean(axis=0),
        tangent_to_normal_variance_ratio=ratio,
        master_seed=config.seed,
    )


# ---------------------------------------------------------------------------
# Pillar I: distance decay
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DecayReport:
    k0: int
    delta: float
    ks: np.ndarray                  # log-spaced sample points
    avg_dist_sq: np.ndarray
    survivor_counts: np.ndarray
    slope: Optional[float]          # None when the distances are degenerate
    exit_fraction: float
    excluded: int
    degenerate: bool
    master_seed: int

    def to_json_dict(self):
        return {
            "k0": self.k0,
            "delta": float(self.delta),
            "slope": None if self.slope is None else float(self.slope),
            "exit_fraction": float(self.exit_fraction),
            "excluded": self.excluded,
            "degenerate": self.degenerate,
            "master_seed": self.master_seed,
            "ks": [int(k) for k in self.ks],
            "avg_dist_sq": _listify(self.avg_dist_sq),
            "survivor_counts": [int(c) for c in self.survivor_counts],
        }


def distance_decay(problem: StochasticVIProblem, manifold: Manifold,
                   config: SolverConfig, reps: int, k0: int, delta: float,
                   x_star=None, threads=None, instance_token=None) -> DecayReport:
    """Estimate E[dist^2(x_k, M) 1{tau_{k0, delta} > k}] across replications
    and fit the log-log slope over the last decade of k.

    The fit uses only indices with at least MIN_SURVIVORS surviving
    replications; raises InsufficientSurvivors when fewer than that stay in
    the delta-ball through the horizon.
    """
    if x_star is None:
        x_star = problem.solution_hint
    result = run_batch(
        problem,
        config.schedule,
        config.iterations,
        reps,
        config.seed,
        x0=config.x0,
        manifold=manifold,
        options=BatchOptions(
            track_distance=True,
            k0=k0,
            delta=delta,
            x_star=None if x_star is None else np.asarray(x_star, dtype=float),
            divergence_bound=config.divergence_bound,
            block=config.block,
        ),
        threads=threads,
        instance_token=instance_token,
    )
    k_total = config.iterations
    survivors_final = int(np.count_nonzero(result.survived))
    if survivors_final < MIN_SURVIVORS:
        raise InsufficientSurvivors(
            f"only {survivors_final} replications stayed in B_delta; "
            f"need {MIN_SURVIVORS}"
        )
    ks = _log_spaced_indices(max(k0, 1), k_total)
    counts = result.d2_count[ks]
    avg = np.where(counts > 0, result.d2_sum[ks] / np.maximum(counts, 1), np.nan)

    fit_ks = _log_spaced_indices(max(k_total // 10, k0, 1), k_total)
    fit_counts = result.d2_count[fit_ks]
    fit_avg = result.d2_sum[fit_ks] / np.maximum(fit_counts, 1)
    usable = fit_counts >= MIN_SURVIVORS
    degenerate = bool(np.all(fit_avg[usable] <= 1e-20))
    slope = None
    if not degenerate:
        slope = _loglog_slope(fit_ks[usable], fit_avg[usable])
    alive = ~result.diverged
    exited = np.count_nonzero(alive & ~result.survived)
    return DecayReport(
        k0=k0,
        delta=delta,
        ks=ks,
        avg_dist_sq=avg,
        survivor_counts=counts,
        slope=slope,
        exit_fraction=float(exited / max(np.count_nonzero(alive), 1)),
        excluded=int(np.count_nonzero(result.diverged)),
        degenerate=degenerate,
        master_seed=config.seed,
    )


# ---------------------------------------------------------------------------
# Pillar II: shadow residuals
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ShadowReport:
    ks: np.ndarray
    avg_resid_sq: np.ndarray        # ||E_k||^2 averaged (over reps or k-bins)
    alphas: np.ndarray
    slope_vs_alpha: Optional[float]
    projected_noise_mean: np.ndarray
    projected_noise_se: np.ndarray
    observations: int
    master_seed: int

    def to_json_dict(self):
        return {
            "slope_vs_alpha": None if self.slope_vs_alpha is None
            else float(self.slope_vs_alpha),
            "projected_noise_mean": _listify(self.projected_noise_mean),
            "projected_noise_se": _listify(self.projected_noise_se),
            "observations": self.observations,
            "master_seed": self.master_seed,
            "ks": [int(k) for k in self.ks],
            "avg_resid_sq": _listify(self.avg_resid_sq),
            "alphas": _listify(self.alphas),
        }


def shadow_residuals(problem: StochasticVIProblem, manifold: Manifold,
                     trajectory: Trajectory, f_m=None) -> ShadowReport:
    """Recover the recursion defect E_k from a stride-1 trajectory.

    With y_k = P_M(x_k), the shadow recursion reads
        y_{k+1} = y_k - alpha_k F_M(y_k) - alpha_k P_{T(y_k)} nu_k + alpha_k E_k,
    so E_k = (y_{k+1} - y_k + alpha_k F_M(y_k) + alpha_k P_{T(y_k)} nu_k) / alpha_k
    exactly.  Requires record_stride=1 and a recorded noise stream.
    """
    ks = trajectory.ks
    if len(ks) < 3 or np.any(np.diff(ks) != 1):
        raise ValueError("shadow residuals need a stride-1 trajectory")
    if trajectory.noise is None:
        raise ValueError("shadow residuals need the recorded noise stream")
    if f_m is None:
        f_m = default_f_m(problem, manifold)
    x = trajectory.iterates
    y = manifold.project(x)
    # the step y_i -> y_{i+1} is driven by the noise recorded with x_{i+1}
    # and its step size, while F_M and the tangent space sit at the start y_i
    nu_step = trajectory.noise[1:]
    alphas_e = trajectory.schedule.step(ks[1:]).astype(float)
    if manifold.tangent_apply is not None:
        ptnu = manifold.tangent_apply(y[:-1], nu_step)
    else:
        ptnu = np.stack([manifold.tangent_projector_at(y[i]) @ nu_step[i]
                         for i in range(len(y) - 1)])
    fm = f_m(y[:-1])
    e = (y[1:] - y[:-1]) / alphas_e[:, None] + fm + ptnu
    e2 = np.einsum("ij,ij->i", e, e)
    ks_e = ks[1:]

    # bin over log-spaced windows to expose the k-local mean of ||E_k||^2
    edges = _log_spaced_indices(max(ks_e[0], 1), ks_e[-1], 40)
    mids, means, mid_alpha = [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ks_e >= lo) & (ks_e < hi)
        if np.count_nonzero(sel) > 0:
            mids.append(np.sqrt(lo * hi))
            means.append(float(e2[sel].mean()))
            mid_alpha.append(float(trajectory.schedule.step(np.sqrt(lo * hi))))
    mids, means, mid_alpha = map(np.array, (mids, means, mid_alpha))
    slope = _shadow_slope(mids, means, mid_alpha, ks_e[-1])

    pt_mean = ptnu.mean(axis=0)
    pt_se = ptnu.std(axis=0, ddof=1) / np.sqrt(len(ptnu))
    return ShadowReport(
        ks=mids.astype(int),
        avg_resid_sq=means,
        alphas=mid_alpha,
        slope_vs_alpha=slope,
        projected_noise_mean=pt_mean,
        projected_noise_se=pt_se,
        observations=len(e2),
        master_seed=-1,
    )


def _shadow_slope(ks, means, alphas, k_max):
    sel = ks >= max(k_max // 10, 1)
    if np.count_nonzero(sel & (means > 1e-30)) < 5:
        return None
    keep = sel & (means > 1e-30)
    coeff = np.polyfit(np.log(alphas[keep]), np.log(means[keep]), 1)
    return float(coeff[0])


def monte_carlo_shadow(problem: StochasticVIProblem, manifold: Manifold,
                       config: SolverConfig, reps: int, k0: int, delta: float,
                       f_m=None, x_star=None, threads=None,
                       instance_token=None) -> ShadowReport:
    """Replicated shadow residuals: per-k averages of ||E_k||^2 over
    surviving replications, the slope of their log against log alpha_k, and
    the martingale check on the projected noise."""
    if f_m is None:
        f_m = default_f_m(problem, manifold)
    if x_star is None:
        x_star = problem.solution_hint
    result = run_batch(
        problem,
        config.schedule,
        config.iterations,
        reps,
        config.seed,
        x0=config.x0,
        manifold=manifold,
        f_m=f_m,
        options=BatchOptions(
            track_shadow=True,
            k0=k0,
            delta=delta,
            x_star=None if x_star is None else np.asarray(x_star, dtype=float),
            divergence_bound=config.divergence_bound,
            block=config.block,
        ),
        threads=threads,
        instance_token=instance_token,
    )
    k_total = config.iterations
    survivors_final = int(np.count_nonzero(result.survived))
    if survivors_final < MIN_SURVIVORS:
        raise InsufficientSurvivors(
            f"only {survivors_final} replications stayed in B_delta; "
            f"need {MIN_SURVIVORS}"
        )
    ks = _log_spaced_indices(max(k0, 1), k_total)
    counts = result.e2_count[ks]
    avg = np.where(counts > 0, result.e2_sum[ks] / np.maximum(counts, 1), np.nan)
    alphas = config.schedule.step(ks).astype(float)

    fit_ks = _log_spaced_indices(max(k_total // 10, k0, 1), k_total)
    fit_counts = result.e2_count[fit_ks]
    fit_avg = result.e2_sum[fit_ks] / np.maximum(fit_counts, 1)
    usable = (fit_counts >= MIN_SURVIVORS) & (fit_avg > 1e-30)
    slope = None
    if np.count_nonzero(usable) >= MIN_FIT_POINTS:
        coeff = np.polyfit(
            np.log(config.schedule.step(fit_ks[usable])),
            np.log(fit_avg[usable]),
            1,
        )
        slope = float(coeff[0])

    n = max(result.ptnu_count, 1)
    mean = result.ptnu_sum / n
    var = np.maximum(result.ptnu_sumsq / n - mean**2, 0.0)
    se = np.sqrt(var / n)
    return ShadowReport(
        ks=ks,
        avg_resid_sq=avg,
        alphas=alphas,
        slope_vs_alpha=slope,
        projected_noise_mean=mean,
        projected_noise_se=se,
        observations=result.ptnu_count,
        master_seed=config.seed,
    )


def default_f_m(problem: StochasticVIProblem, manifold: Manifold):
    """Covariant mean field for VI reductions of nonlinear programs:
    F_M(y) = P_{T(y)} A(y) (the covariant parts of f and g vanish on M)."""

    def f_m(y):
        a = problem.mean(y)
        if manifold.tangent_apply is not None:
            return manifold.tangent_apply(y, a)
        y2 = np.atleast_2d(y)
        a2 = np.atleast_2d(a)
        out = np.stack([manifold.tangent_projector_at(y2[i]) @ a2[i]
                        for i in range(len(y2))])
        return out[0] if np.asarray(y).ndim == 1 else out

    return f_m


# ---------------------------------------------------------------------------
# regularity sampling
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RegularityReport:
    aiming_margin_min: float
    tangent_ratio_max: float
    b_ratio_max: Optional[float]
    strong_a_ratio_max: Optional[float]
    margin_by_distance: list           # (dist_lo, dist_hi, min_margin) tuples
    non_monotone: bool
    worst_aiming_sample: dict
    worst_tangent_sample: dict
    samples: dict                      # raw sampled arrays, for reproducibility
    sample_count: int
    master_seed: int

    def to_json_dict(self):
        return {
            "aiming_margin_min": float(self.aiming_margin_min),
            "tangent_ratio_max": float(self.tangent_ratio_max),
            "b_ratio_max": None if self.b_ratio_max is None else float(self.b_ratio_max),
            "strong_a_ratio_max": None if self.strong_a_ratio_max is None
            else float(self.strong_a_ratio_max),
            "margin_by_distance": [
                [float(a), float(b), float(c)] for a, b, c in self.margin_by_distance
            ],
            "non_monotone": self.non_monotone,
            "sample_count": self.sample_count,
            "master_seed": self.master_seed,
        }


def check_regularity(problem: StochasticVIProblem, manifold: Manifold, x_star,
                     n_samples=1000, delta=0.3, seed=0, nlp=None, f_m=None,
                     alpha_ratio_range=(1e-3, 1e-1)) -> RegularityReport:
    """Sample the aiming margin and tangent-comparison ratio near x*.

    Points x are manifold points perturbed by normal offsets at log-spaced
    distances in [1e-4, delta] (then projected into dom f); the step size is
    tied to the sampled distance through ``alpha_ratio_range`` so the margin
    exposes the aiming constant rather than the O(alpha) slack.  When an NLP
    is supplied, boundary normals feed the one-sided Taylor and tangent
    subgradient-comparison ratios for the feasible set.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples")
    if f_m is None:
        f_m = default_f_m(problem, manifold)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x_star = np.asarray(x_star, dtype=float)
    dim = problem.dim

    dists = np.geomspace(1e-4, delta * 0.9, n_samples)
    ratios = np.geomspace(alpha_ratio_range[0], alpha_ratio_range[1], n_samples)
    rng.shuffle(ratios)

    xs, zs, alphas = [], [], []
    margins, e1_ratios, kept_dists = [], [], []
    for i in range(n_samples):
        base = manifold.project(x_star + 0.15 * rng.standard_normal(dim))
        jac = np.atleast_2d(manifold.jacobian(base))
        normal_dir = jac.T @ rng.standard_normal(jac.shape[0])
        nn = np.linalg.norm(normal_dir)
        if nn < 1e-12:
            continue
        x = base + dists[i] * normal_dir / nn
        if isinstance(problem.f_part, IndicatorProx):
            x = problem.f_part.set.project(x)    # back into dom f
        y = manifold.project(x)
        dist = float(np.linalg.norm(x - y))
        if dist < 1e-10 or np.linalg.norm(x - x_star) > delta:
            continue
        z = problem.draw(rng, 1)[0]
        nu = problem.sample_map(x, z) - problem.mean(x)
        alpha = float(ratios[i] * dist)
        g_val = generalized_gradient(problem, alpha, x, nu)
        margin = float((g_val - nu) @ (x - y) / dist)
        if manifold.tangent_apply is not None:
            pt = manifold.tangent_apply(y, g_val - nu)
        else:
            pt = manifold.tangent_projector_at(y) @ (g_val - nu)
        e1 = float(np.linalg.norm(pt - f_m(y))
                   / ((1.0 + np.linalg.norm(nu)) ** 2 * (dist + alpha)))
        xs.append(x); zs.append(z); alphas.append(alpha)
        margins.append(margin); e1_ratios.append(e1); kept_dists.append(dist)

    if not margins:
        raise ValueError("all regularity samples were filtered out; widen delta")
    margins = np.array(margins)
    e1_ratios = np.array(e1_ratios)
    kept_dists = np.array(kept_dists)

    bins = np.geomspace(1e-4, delta, 7)
    margin_by_distance = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (kept_dists >= lo) & (kept_dists < hi)
        if np.any(sel):
            margin_by_distance.append((lo, hi, float(margins[sel].min())))
    bin_mins = [m for _, _, m in margin_by_distance]
    non_monotone = any(b < a - 0.25 * abs(a) for a, b in zip(bin_mins, bin_mins[1:]))

    b_max = a_max = None
    if nlp is not None and nlp.feasible_set is not None:
        b_vals, a_vals = [], []
        for _ in range(max(n_samples // 2, 100)):
            probe = x_star + 0.2 * rng.standard_normal(dim)
            xb = nlp.feasible_set.project(probe + 0.3 * rng.standard_normal(dim))
            vals = nlp.constraint_values(xb)
            act = [i for i, v in enumerate(vals) if v >= -1e-9]
            if not act:
                continue
            weights = rng.uniform(0.1, 1.0, len(act))
            v = weights @ nlp.constraint_grads(xb, act)
            nv = np.linalg.norm(v)
            if nv < 1e-12:
                continue
            v = v * rng.choice([0.5, 1.0, 2.0]) / nv
            yb = manifold.project(x_star + 0.1 * rng.standard_normal(dim))
            gap = np.linalg.norm(yb - xb)
            if gap < 1e-8:
                continue
            b_vals.append(float(v @ (yb - xb) / ((1 + np.linalg.norm(v)) * gap)))
            if manifold.tangent_apply is not None:
                ptv = manifold.tangent_apply(yb, v)
            else:
                ptv = manifold.tangent_projector_at(yb) @ v
            a_vals.append(float(np.linalg.norm(ptv) / ((1 + np.linalg.norm(v)) * gap)))
        if b_vals:
            b_max = float(np.max(b_vals))
            a_max = float(np.max(a_vals))

    i_min = int(np.argmin(margins))
    i_max = int(np.argmax(e1_ratios))
    samples = {
        "x": np.array(xs),
        "z": np.array(zs),
        "alpha": np.array(alphas),
        "dist": kept_dists,
        "margin": margins,
        "e1_ratio": e1_ratios,
    }
    return RegularityReport(
        aiming_margin_min=float(margins.min()),
        tangent_ratio_max=float(e1_ratios.max()),
        b_ratio_max=b_max,
        strong_a_ratio_max=a_max,
        margin_by_distance=margin_by_distance,
        non_monotone=non_monotone,
        worst_aiming_sample={
            "x": xs[i_min], "z": zs[i_min], "alpha": alphas[i_min],
            "margin": float(margins[i_min]),
        },
        worst_tangent_sample={
            "x": xs[i_max], "z": zs[i_max], "alpha": alphas[i_max],
            "ratio": float(e1_ratios[i_max]),
        },
        samples=samples,
        sample_count=len(margins),
        master_seed=seed,
    )
