"""Step schedules, generalized gradient mappings, and the SFB/SAA solvers.

The online iteration is x_{k+1} = x_k - alpha_k * G_alpha_k(x_k, nu_k) where
G dispatches on the problem's (f, g) decomposition; the SAA route freezes a
batch of samples and solves the empirical inclusion by deterministic
forward-backward iteration to a fixed-point certificate.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import NoConvergence, ZeroProx
from .problems import MissingMeanMap, StochasticVIProblem


class Diverged(Exception):
    """Iterates left the configured norm bound; the theorems assume
    convergence rather than proving it, so we fail loudly outside scope."""


@dataclass(frozen=True)
class StepSchedule:
    """alpha_k = c * k^(-gamma) with gamma in (1/2, 1]."""

    c: float = 1.0
    gamma: float = 0.75

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("step constant c must be positive")
        if not 0.5 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (1/2, 1]")

    def step(self, k):
        if np.any(np.asarray(k) < 1):
            raise ValueError("step index must be >= 1")
        return self.c * np.asarray(k, dtype=float) ** (-self.gamma)


def step_size(schedule: StepSchedule, k: int) -> float:
    return float(schedule.step(k))


@dataclass(frozen=True)
class SolverConfig:
    schedule: StepSchedule = field(default_factory=StepSchedule)
    iterations: int = 10_000
    seed: int = 0
    burn_in: int = 1
    record_stride: int = 1
    record_noise: bool = False
    divergence_bound: float = 1e6
    x0: Optional[np.ndarray] = None
    block: int = 2048

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.burn_in < 1:
            raise ValueError("burn_in must be >= 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")


@dataclass(eq=False)
class Trajectory:
    """Recorded iterates of one SFB run.

    ``ks`` holds the recorded indices (every record_stride-th step plus the
    final one), ``iterates``/``averages`` the matching x_k and running
    averages.  Stride-1 runs with record_noise=True also carry the noise
    stream nu_k, which the shadow diagnostics need.
    """

    ks: np.ndarray
    iterates: np.ndarray
    averages: np.ndarray
    k_final: int
    x_final: np.ndarray
    xbar_final: np.ndarray
    schedule: StepSchedule
    burn_in: int = 1
    dist_to_manifold: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    noise_checksum: str = ""


def sfb_step(problem: StochasticVIProblem, x, z, alpha):
    """One stochastic forward-backward update; broadcasts over leading axes.

    Returns (x_next, nu).  When the mean map is available the update is
    computed through A(x) + nu so that reconstructing the step from the
    recorded (x, nu) pair reproduces it exactly; nu is None otherwise.
    """
    a = problem.sample_map(x, z)
    if problem.mean_map is not None:
        abar = problem.mean_map(x)
        nu = a - abar
        w = abar + nu
    else:
        nu = None
        w = a
    if problem.g_subgrad is not None:
        w = w + problem.g_subgrad(x)
    x_next = problem.f_part.prox(x - alpha * w, alpha)
    return x_next, nu


def generalized_gradient(problem: StochasticVIProblem, alpha, x, nu):
    """G_alpha(x, nu) for the problem's (f, g) decomposition.

    f = 0:          A(x) + s_g(x) + nu                  (independent of alpha)
    otherwise:      (x - prox_{alpha f}(x - alpha (A(x) + s_g(x) + nu))) / alpha
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=float)
    w = problem.mean(x) + np.asarray(nu, dtype=float)
    if problem.g_subgrad is not None:
        w = w + problem.g_subgrad(x)
    if isinstance(problem.f_part, ZeroProx):
        return w
    return (x - problem.f_part.prox(x - alpha * w, alpha)) / alpha


def run_sfb(problem: StochasticVIProblem, config: SolverConfig, manifold=None,
            rng=None) -> Trajectory:
    """Run the stochastic forward-backward iteration for K steps.

    The iterate stream is a function of the seed alone: noise is drawn in
    blocks from a generator seeded by ``config.seed`` (or the supplied
    ``rng``), and block size does not affect the stream.
    """
    k_total = config.iterations
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    x = np.zeros(problem.dim) if config.x0 is None else np.asarray(config.x0, dtype=float).copy()
    if problem.f_part.domain_residual(x) > 1e-8:
        raise ValueError("initial point lies outside the domain of f")

    xbar = np.zeros_like(x)
    ks, iterates, averages, dists, noises = [], [], [], [], []
    checksum = hashlib.sha256()
    k = 0
    while k < k_total:
        b = min(config.block, k_total - k)
        z_block = problem.draw(rng, b)
        checksum.update(np.ascontiguousarray(z_block).tobytes())
        for i in range(b):
            k += 1
            alpha = config.schedule.step(k)
            x, nu = sfb_step(problem, x, z_block[i], alpha)
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > config.divergence_bound:
                raise Diverged(f"|x_{k}| exceeded {config.divergence_bound:.1e}")
            if k >= config.burn_in:
                m = k - config.burn_in + 1
                xbar += (x - xbar) / m
            if k % config.record_stride == 0 or k == k_total:
                ks.append(k)
                iterates.append(x.copy())
                averages.append(xbar.copy())
                if manifold is not None:
                    dists.append(float(manifold.distance(x)))
                if config.record_noise:
                    if nu is None:
                        raise MissingMeanMap("noise recording requires the mean map")
                    noises.append(np.asarray(nu, dtype=float).copy())

    return Trajectory(
        ks=np.array(ks, dtype=int),
        iterates=np.array(iterates),
        averages=np.array(averages),
        k_final=k_total,
        x_final=x.copy(),
        xbar_final=xbar.copy(),
        schedule=config.schedule,
        burn_in=config.burn_in,
        dist_to_manifold=np.array(dists) if dists else None,
        noise=np.array(noises) if noises else None,
        noise_checksum=checksum.hexdigest(),
    )


@dataclass(frozen=True)
class SAASettings:
    tol: float = 1e-8
    max_iter: int = 1_000_000
    step: Optional[float] = None     # default 1 / estimated Lipschitz constant
    lipschitz_probes: int = 16


@dataclass(frozen=True)
class SAAReport:
    residual: float
    iterations: int
    step: float
    sample_count: int


def run_saa(problem: StochasticVIProblem, k: int, seed: int,
            inner: SAASettings = SAASettings(), x0=None):
    """Sample average approximation: freeze k samples and solve the empirical
    inclusion 0 in A_S(x) + dg(x) + df(x) by deterministic forward-backward.

    Returns (x, SAAReport).  The certificate is the fixed-point residual
    ||x - prox_{beta f}(x - beta (A_S(x) + s_g(x)))|| / beta <= tol.
    """
    if k < 1:
        raise ValueError("sample count must be >= 1")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(2)
    sample_rng = np.random.default_rng(children[0])
    probe_rng = np.random.default_rng(children[1])
    samples = problem.draw(sample_rng, k)

    def empirical_map(x):
        vals = np.asarray(problem.sample_map(x, samples), dtype=float)
        if vals.ndim == 1:
            return vals                      # map does not depend on z
        return vals.mean(axis=0)

    x = np.zeros(problem.dim) if x0 is None else np.asarray(x0, dtype=float).copy()

    beta = inner.step
    if beta is None:
        lip = 0.0
        for _ in range(inner.lipschitz_probes):
            u = x + probe_rng.standard_normal(problem.dim)
            v = x + probe_rng.standard_normal(problem.dim)
            denom = np.linalg.norm(u - v)
            if denom > 1e-12:
                lip = max(lip, np.linalg.norm(empirical_map(u) - empirical_map(v)) / denom)
        beta = 1.0 / lip if lip > 1e-12 else 1.0
        beta = min(beta, 1.0)

    for it in range(1, inner.max_iter + 1):
        w = empirical_map(x)
        if problem.g_subgrad is not None:
            w = w + problem.g_subgrad(x)
        x_next = problem.f_part.prox(x - beta * w, beta)
        residual = float(np.linalg.norm(x - x_next) / beta)
        if residual <= inner.tol:
            # certify the residual at the returned point itself
            return x, SAAReport(residual=residual, iterations=it, step=beta, sample_count=k)
        x = x_next
    raise NoConvergence(
        f"SAA forward-backward did not reach tol={inner.tol:.1e} in {inner.max_iter} iterations",
        residual=residual,
    )
