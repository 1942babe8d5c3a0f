"""KKT analysis at a candidate solution and the predicted limiting covariance.

The covariance of the rescaled estimator error is predicted from problem
geometry alone: with P_T the projector onto the orthogonal complement of the
active constraint gradients, Sigma = P_T Hess_L P_T the tangent-restricted
Lagrangian Hessian, and J = Sigma^+ its pseudoinverse, the limit law of
sqrt(k) (estimate - x*) is N(0, J Cov(A(x*, z)) J^T).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    RankDeficient,
    pinv_on_subspace,
    tangent_basis,
    tangent_projector,
)
from .problems import NLPProblem, StochasticVIProblem

SC_WARN_TOL = 1e-6
SOSC_TOL = 1e-10


class Infeasible(Exception):
    """The candidate point violates an inequality beyond tolerance."""


@dataclass(eq=False)
class KKTReport:
    active_set: list
    multipliers: np.ndarray            # full length, zeros off the active set
    licq_ok: bool
    licq_min_singular_value: float
    strict_complementarity_margin: float
    sosc_min_eig: float
    stationarity_residual: float


@dataclass(eq=False)
class AsymptoticsReport:
    kkt: KKTReport
    tangent_projector: np.ndarray
    tangent_basis: np.ndarray          # columns span the tangent space
    covariant_hessian: np.ndarray
    solution_jacobian: np.ndarray
    noise_covariance: np.ndarray
    noise_covariance_se: Optional[np.ndarray]
    predicted_covariance: np.ndarray

    @property
    def tangent_dim(self):
        return self.tangent_basis.shape[1]

    def tangent_variances(self):
        """Predicted variances of the tangent coordinates (in the U basis)."""
        u = self.tangent_basis
        return np.diag(u.T @ self.predicted_covariance @ u)

    def to_json_dict(self):
        return {
            "active_set": [int(i) for i in self.kkt.active_set],
            "multipliers": [float(v) for v in self.kkt.multipliers],
            "licq_min_singular_value": float(self.kkt.licq_min_singular_value),
            "sc_margin": float(self.kkt.strict_complementarity_margin),
            "sosc_min_eig": float(self.kkt.sosc_min_eig),
            "tangent_dim": int(self.tangent_dim),
            "predicted_covariance": [[float(v) for v in row]
                                     for row in self.predicted_covariance],
        }


def active_set(nlp: NLPProblem, x, tol=1e-8):
    """Indices i with |g_i(x)| <= tol, plus all equality indices (0-based).

    Raises Infeasible when an inequality constraint exceeds +tol.
    """
    x = np.asarray(x, dtype=float)
    active = []
    for i, c in enumerate(nlp.constraints):
        v = c.value(x)
        if c.kind == "equality":
            active.append(i)
        elif v > tol:
            raise Infeasible(f"constraint {i} has value {v:.3e} > tol={tol:.1e}")
        elif abs(v) <= tol:
            active.append(i)
    return active


def lagrange_multipliers(nlp: NLPProblem, x, active):
    """Least-squares multipliers for grad f(x) + sum_i y_i grad g_i(x) = 0.

    Returns (y, residual) where y has the problem's full constraint length
    with zeros off the active set.  Raises RankDeficient when the active
    gradients are not linearly independent (LICQ failure).
    """
    x = np.asarray(x, dtype=float)
    grad_f = np.asarray(nlp.objective_grad(x), dtype=float)
    y = np.zeros(len(nlp.constraints))
    if not active:
        return y, float(np.linalg.norm(grad_f))
    mat = nlp.constraint_grads(x, active).T          # d x |I|
    svals = np.linalg.svd(mat, compute_uv=False)
    if svals[-1] <= 1e-10 * svals[0]:
        raise RankDeficient("active constraint gradients are linearly dependent")
    sol, *_ = np.linalg.lstsq(mat, -grad_f, rcond=None)
    for j, i in enumerate(active):
        y[i] = sol[j]
    residual = float(np.linalg.norm(grad_f + mat @ sol))
    return y, residual


def lagrangian_hess(nlp: NLPProblem, x, y):
    """Full Hessian of the Lagrangian, Hess f(x) + sum_i y_i Hess g_i(x)."""
    x = np.asarray(x, dtype=float)
    hess = np.asarray(nlp.objective_hess(x), dtype=float).copy()
    for yi, c in zip(np.asarray(y, dtype=float), nlp.constraints):
        hess += yi * np.asarray(c.hess(x), dtype=float)
    return hess


def covariant_hessian(nlp: NLPProblem, x, y):
    """P_T Hess_L(x, y) P_T with P_T from the active constraint gradients."""
    x = np.asarray(x, dtype=float)
    hess = lagrangian_hess(nlp, x, y)
    act = active_set(nlp, x)
    p_t = tangent_projector(nlp.constraint_grads(x, act)) if act else np.eye(nlp.dim)
    out = p_t @ hess @ p_t
    return 0.5 * (out + out.T)


def lagrangian_grad(nlp: NLPProblem, x, y):
    """grad_x L(x, y); used by the finite-difference validation tests."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(nlp.objective_grad(x), dtype=float).copy()
    for yi, c in zip(np.asarray(y, dtype=float), nlp.constraints):
        g += yi * np.asarray(c.grad(x), dtype=float)
    return g


def solution_jacobian(cov_hessian, p_t):
    """Jacobian of the solution map: the pseudoinverse of the covariant
    Hessian on the tangent space.  Raises SingularOnTangent when the
    tangent restriction is not positive definite above SOSC_TOL."""
    return pinv_on_subspace(cov_hessian, p_t, min_eig_tol=SOSC_TOL)


def estimate_noise_covariance(problem: StochasticVIProblem, x, mc_samples, seed=0):
    """Monte Carlo Cov(A(x, z)) with componentwise standard errors."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z = problem.draw(rng, mc_samples)
    vals = np.asarray(problem.sample_map(np.asarray(x, dtype=float), z), dtype=float)
    if vals.ndim == 1:
        return np.zeros((problem.dim, problem.dim)), np.zeros((problem.dim, problem.dim))
    centered = vals - vals.mean(axis=0)
    cov = centered.T @ centered / (len(vals) - 1)
    # standard error of each covariance entry from fourth moments
    prod = centered[:, :, None] * centered[:, None, :]
    se = prod.std(axis=0, ddof=1) / np.sqrt(len(vals))
    return cov, se


def kkt_report(nlp: NLPProblem, x, tol=1e-8) -> KKTReport:
    x = np.asarray(x, dtype=float)
    act = active_set(nlp, x, tol)
    y, residual = lagrange_multipliers(nlp, x, act)
    if act:
        mat = nlp.constraint_grads(x, act)
        svals = np.linalg.svd(mat, compute_uv=False)
        licq_min = float(svals[-1])
        licq_ok = bool(svals[-1] > 1e-10 * svals[0])
        p_t = tangent_projector(mat)
    else:
        licq_min = np.inf
        licq_ok = True
        p_t = np.eye(nlp.dim)
    active_ineq = [i for i in act if nlp.constraints[i].kind == "inequality"]
    sc_margin = float(min((y[i] for i in active_ineq), default=np.inf))
    sigma = covariant_hessian(nlp, x, y)
    basis = tangent_basis(p_t)
    if basis.shape[1] > 0:
        restricted = basis.T @ sigma @ basis
        sosc_min = float(np.linalg.eigvalsh(0.5 * (restricted + restricted.T))[0])
    else:
        sosc_min = np.inf
    return KKTReport(
        active_set=act,
        multipliers=y,
        licq_ok=licq_ok,
        licq_min_singular_value=licq_min,
        strict_complementarity_margin=sc_margin,
        sosc_min_eig=sosc_min,
        stationarity_residual=residual,
    )


def predicted_covariance(problem: StochasticVIProblem, nlp: NLPProblem, x,
                         mc_samples=100_000, seed=0, tol=1e-8) -> AsymptoticsReport:
    """Assemble J Cov(A(x, z)) J^T at the candidate solution x.

    The noise covariance comes from the problem's closed form when declared,
    else from Monte Carlo at the supplied point (never at an algorithmic
    estimate) with reported standard errors.  Gates: LICQ, strict
    complementarity, and tangent positive definiteness; margins below 1e-6
    only warn, matching the graded-reporting policy.
    """
    x = np.asarray(x, dtype=float)
    report = kkt_report(nlp, x, tol)
    if not report.licq_ok:
        raise RankDeficient("LICQ fails at the candidate point")
    if report.strict_complementarity_margin < SC_WARN_TOL:
        warnings.warn(
            f"strict complementarity margin {report.strict_complementarity_margin:.2e} "
            "is below 1e-6; the active manifold may be unstable",
            stacklevel=2,
        )
    act = report.active_set
    p_t = tangent_projector(nlp.constraint_grads(x, act)) if act else np.eye(nlp.dim)
    basis = tangent_basis(p_t)
    sigma = covariant_hessian(nlp, x, report.multipliers)
    jac = solution_jacobian(sigma, p_t)
    if problem.noise_covariance is not None:
        cov = np.asarray(problem.noise_covariance, dtype=float)
        cov_se = None
    else:
        cov, cov_se = estimate_noise_covariance(problem, x, mc_samples, seed)
    predicted = jac @ cov @ jac.T
    predicted = 0.5 * (predicted + predicted.T)
    return AsymptoticsReport(
        kkt=report,
        tangent_projector=p_t,
        tangent_basis=basis,
        covariant_hessian=sigma,
        solution_jacobian=jac,
        noise_covariance=cov,
        noise_covariance_se=cov_se,
        predicted_covariance=predicted,
    )
