"""Vectorized multi-replication SFB runner for the Monte Carlo diagnostics.

All replications advance in lockstep as rows of an (R, d) array; replication
r draws its noise from a private generator spawned as child r of the master
seed, so per-replication trajectories are bit-identical regardless of
batching, chunking, and worker count.  Accumulator reduction happens in
fixed chunk order after all workers finish, independent of scheduling, so a
given (seed, config, threads) setting always reproduces the same report;
switching between serial and process-parallel execution can move the
cross-replication floating-point sums by about one ulp.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problems import get_instance
from .solvers import StepSchedule, sfb_step

N_CHUNKS = 8


@dataclass(frozen=True)
class BatchOptions:
    """What to accumulate while the replications run.

    ``snapshots`` are iteration counts at which the running averages are
    copied out.  Distance and shadow tracking require a manifold; survival
    uses the stopping time tau_{k0, delta} relative to x_star (first exit
    from the delta-ball at or after step k0).
    """

    snapshots: tuple = ()
    track_distance: bool = False
    track_shadow: bool = False
    k0: int = 1
    delta: float = np.inf
    x_star: Optional[np.ndarray] = None
    divergence_bound: float = 1e6
    block: int = 2048


@dataclass(eq=False)
class BatchResult:
    rep_count: int
    x_final: np.ndarray               # (R, d)
    xbar_final: np.ndarray            # (R, d)
    snapshots: dict                   # k -> (R, d) running averages
    diverged: np.ndarray              # (R,) bool
    survived: np.ndarray              # (R,) bool: never exited B_delta after k0
    d2_sum: Optional[np.ndarray] = None      # (K+1,), index k
    d2_count: Optional[np.ndarray] = None
    e2_sum: Optional[np.ndarray] = None
    e2_count: Optional[np.ndarray] = None
    ptnu_sum: Optional[np.ndarray] = None    # (d,)
    ptnu_sumsq: Optional[np.ndarray] = None  # (d,)
    ptnu_count: int = 0


def _tangent_apply(manifold, y, v):
    """P_{T(y)} v rowwise; uses the manifold's fast path when available."""
    if manifold.tangent_apply is not None:
        return manifold.tangent_apply(y, v)
    out = np.empty_like(v)
    for i in range(y.shape[0]):
        out[i] = manifold.tangent_projector_at(y[i]) @ v[i]
    return out


def run_batch_chunk(problem, schedule: StepSchedule, iterations: int,
                    seed_seqs, x0, manifold=None, f_m=None,
                    options: BatchOptions = BatchOptions()) -> BatchResult:
    """Advance len(seed_seqs) replications for ``iterations`` steps."""
    reps = len(seed_seqs)
    dim = problem.dim
    gens = [np.random.default_rng(s) for s in seed_seqs]
    k_total = iterations

    x = np.tile(np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float), (reps, 1))
    if np.any(problem.f_part.domain_residual(x) > 1e-8):
        raise ValueError("initial point lies outside the domain of f")
    xbar = np.zeros_like(x)
    alive = np.ones(reps, dtype=bool)
    survived = np.ones(reps, dtype=bool)
    snapshots = {}

    x_star = options.x_star
    if x_star is None and problem.solution_hint is not None:
        x_star = np.asarray(problem.solution_hint, dtype=float)

    track_dist = options.track_distance
    track_shadow = options.track_shadow
    if (track_dist or track_shadow) and manifold is None:
        raise ValueError("distance/shadow tracking requires a manifold")
    d2_sum = np.zeros(k_total + 1) if track_dist else None
    d2_count = np.zeros(k_total + 1, dtype=np.int64) if track_dist else None
    e2_sum = np.zeros(k_total + 1) if track_shadow else None
    e2_count = np.zeros(k_total + 1, dtype=np.int64) if track_shadow else None
    ptnu_sum = np.zeros(dim) if track_shadow else None
    ptnu_sumsq = np.zeros(dim) if track_shadow else None
    ptnu_count = 0

    if track_shadow:
        if f_m is None:
            raise ValueError("shadow tracking requires the covariant mean field F_M")
        y = manifold.project(x)

    snapshot_at = set(int(s) for s in options.snapshots)
    check_survival = x_star is not None and np.isfinite(options.delta)
    delta_sq = options.delta**2
    bound_sq = options.divergence_bound**2
    any_dead = False
    k = 0
    while k < k_total:
        b = min(options.block, k_total - k)
        # (b, R, zdim) so the per-step slice is a contiguous view
        z_block = np.stack([problem.draw(g, b) for g in gens], axis=1)
        alphas = schedule.step(np.arange(k + 1, k + b + 1))
        for i in range(b):
            k += 1
            alpha = alphas[i]
            x_next, nu = sfb_step(problem, x, z_block[i], alpha)
            norms_sq = np.einsum("ij,ij->i", x_next, x_next)
            # frozen rows keep their last value once diverged
            if not np.all(norms_sq <= bound_sq):
                bad = ~(norms_sq <= bound_sq)       # catches NaN as well
                alive &= ~bad
                any_dead = True
            if any_dead:
                x = np.where(alive[:, None], x_next, x)
                xbar += np.where(alive[:, None], (x - xbar) / k, 0.0)
            else:
                x = x_next
                xbar += (x - xbar) / k

            if check_survival and k >= options.k0:
                diff = x - x_star
                inside = np.einsum("ij,ij->i", diff, diff) <= delta_sq
                survived &= inside | ~alive  # dead rows drop out via `alive`

            if track_dist:
                mask = alive & survived
                n_mask = int(np.count_nonzero(mask))
                if n_mask:
                    d = manifold.distance(x[mask]) if n_mask < reps \
                        else manifold.distance(x)
                    d2_sum[k] += float(np.sum(d * d))
                    d2_count[k] += n_mask

            if track_shadow:
                y_next = manifold.project(x)
                ptnu = _tangent_apply(manifold, y, nu)
                e = (y_next - y) / alpha + f_m(y) + ptnu
                mask = alive & survived
                n_mask = int(np.count_nonzero(mask))
                if n_mask:
                    e_used = e if n_mask == reps else e[mask]
                    e2_sum[k] += float(np.einsum("ij,ij->", e_used, e_used))
                    e2_count[k] += n_mask
                pm = ptnu if not any_dead else ptnu[alive]
                ptnu_sum += pm.sum(axis=0)
                ptnu_sumsq += (pm * pm).sum(axis=0)
                ptnu_count += pm.shape[0]
                y = y_next

            if k in snapshot_at:
                snapshots[k] = xbar.copy()

    return BatchResult(
        rep_count=reps,
        x_final=x,
        xbar_final=xbar,
        snapshots=snapshots,
        diverged=~alive,
        survived=survived & alive,
        d2_sum=d2_sum,
        d2_count=d2_count,
        e2_sum=e2_sum,
        e2_count=e2_count,
        ptnu_sum=ptnu_sum,
        ptnu_sumsq=ptnu_sumsq,
        ptnu_count=ptnu_count,
    )


def _merge(results) -> BatchResult:
    first = results[0]
    merged = BatchResult(
        rep_count=sum(r.rep_count for r in results),
        x_final=np.concatenate([r.x_final for r in results]),
        xbar_final=np.concatenate([r.xbar_final for r in results]),
        snapshots={
            k: np.concatenate([r.snapshots[k] for r in results])
            for k in first.snapshots
        },
        diverged=np.concatenate([r.diverged for r in results]),
        survived=np.concatenate([r.survived for r in results]),
    )
    for name in ("d2_sum", "d2_count", "e2_sum", "e2_count", "ptnu_sum", "ptnu_sumsq"):
        parts = [getattr(r, name) for r in results]
        if parts[0] is not None:
            total = parts[0].copy()
            for p in parts[1:]:
                total += p
            setattr(merged, name, total)
    merged.ptnu_count = sum(r.ptnu_count for r in results)
    return merged


def _chunk_ranges(reps, n_chunks=N_CHUNKS):
    """Fixed chunking of replication indices, independent of worker count."""
    n_chunks = min(reps, n_chunks)
    bounds = np.linspace(0, reps, n_chunks + 1).astype(int)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(n_chunks)
            if bounds[i + 1] > bounds[i]]


def _worker(payload):
    lo, hi = payload["range"]
    bundle = get_instance(payload["instance"])
    seeds = np.random.SeedSequence(payload["master_seed"]).spawn(payload["reps"])[lo:hi]
    options = BatchOptions(**payload["options"])
    return run_batch_chunk(
        bundle.vi,
        StepSchedule(**payload["schedule"]),
        payload["iterations"],
        seeds,
        payload["x0"],
        manifold=bundle.manifold,
        f_m=bundle.f_m,
        options=options,
    )


def default_threads():
    env = os.environ.get("SVILAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_batch(problem, schedule, iterations, reps, master_seed, x0=None,
              manifold=None, f_m=None, options=BatchOptions(),
              threads=None, instance_token=None) -> BatchResult:
    """Run ``reps`` replications, chunked for parallelism.

    ``instance_token`` names a built-in instance so worker processes can
    rebuild the problem; without it (custom problems with code-level
    oracles) the chunks run serially in-process.  Results are identical
    either way and for any thread count.
    """
    if threads is None:
        threads = default_threads()
    ranges = _chunk_ranges(reps, n_chunks=max(threads, 1))
    seeds = np.random.SeedSequence(master_seed).spawn(reps)

    if threads > 1 and instance_token is not None and len(ranges) > 1:
        payloads = [
            {
                "range": r,
                "instance": instance_token,
                "reps": reps,
                "master_seed": master_seed,
                "schedule": {"c": schedule.c, "gamma": schedule.gamma},
                "iterations": iterations,
                "x0": None if x0 is None else np.asarray(x0, dtype=float),
                "options": {
                    "snapshots": tuple(options.snapshots),
                    "track_distance": options.track_distance,
                    "track_shadow": options.track_shadow,
                    "k0": options.k0,
                    "delta": options.delta,
                    "x_star": None if options.x_star is None else np.asarray(options.x_star),
                    "divergence_bound": options.divergence_bound,
                    "block": options.block,
                },
            }
            for r in ranges
        ]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, payloads))
    else:
        # one chunk: per-replication outputs are identical to the chunked
        # run; only cross-replication accumulator sums may differ by ~1 ulp
        results = [
            run_batch_chunk(problem, schedule, iterations, seeds, x0,
                            manifold=manifold, f_m=f_m, options=options)
        ]
    return _merge(results)
