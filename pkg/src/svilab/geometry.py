"""Euclidean projections, proximal maps, and embedded-manifold primitives.

Everything here is a pure function of its inputs; objects are immutable
after construction and safe to share across threads.  All membership
predicates use the absolute tolerance ``MEMBERSHIP_TOL``, and rank
decisions use the singular-value ratio ``RANK_RTOL``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

MEMBERSHIP_TOL = 1e-10
RANK_RTOL = 1e-10


class RankDeficient(Exception):
    """A matrix expected to have full row rank does not."""


class NoConvergence(Exception):
    """An iterative scheme ran out of iterations; carries the final residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class OutOfChart(Exception):
    """An iterate left the neighborhood on which a manifold chart is valid."""


class SingularOnTangent(Exception):
    """The tangent-restricted operator is (numerically) singular."""


# ---------------------------------------------------------------------------
# linear algebra on tangent/normal subspaces
# ---------------------------------------------------------------------------

def tangent_projector(jac):
    """Orthogonal projector onto the null space of a full-row-rank matrix.

    For a constraint Jacobian J (n x d) this is P = I - J^T (J J^T)^-1 J,
    the projector onto the tangent space of {G = 0}.  An empty J (n = 0)
    yields the identity.

    Raises RankDeficient when the smallest singular value of J falls below
    RANK_RTOL times the largest (LICQ failure).
    """
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    n, d = jac.shape
    if n == 0 or jac.size == 0:
        return np.eye(int(d) if d else 0)
    svals = np.linalg.svd(jac, compute_uv=False)
    if svals[-1] <= RANK_RTOL * svals[0]:
        raise RankDeficient(
            f"row rank below {n}: smallest/largest singular value "
            f"{svals[-1]:.3e}/{svals[0]:.3e}"
        )
    # solve instead of forming the inverse of J J^T
    coef = np.linalg.solve(jac @ jac.T, jac)
    p = np.eye(d) - jac.T @ coef
    return 0.5 * (p + p.T)


def tangent_basis(projector, tol=0.5):
    """Orthonormal basis U (d x m) of the range of a symmetric projector.

    Columns are eigenvectors of the projector with eigenvalue above ``tol``,
    sign-fixed so the largest-magnitude entry of each column is positive.
    """
    projector = np.asarray(projector, dtype=float)
    w, v = np.linalg.eigh(projector)
    cols = v[:, w > tol]
    for j in range(cols.shape[1]):
        i = np.argmax(np.abs(cols[:, j]))
        if cols[i, j] < 0:
            cols[:, j] = -cols[:, j]
    return cols


def pinv_on_subspace(m, p_t, min_eig_tol=RANK_RTOL):
    """Moore-Penrose pseudoinverse of P M P restricted to range(P).

    ``p_t`` must be a symmetric idempotent matrix.  The restriction of
    P M P to range(P) is inverted exactly; range and co-range of the result
    lie inside range(P), so (P M P)^+ (P M P) = P when the restriction is
    nonsingular.

    Raises SingularOnTangent when the smallest eigenvalue of the symmetrized
    restriction is below ``min_eig_tol`` (failure of tangent positive
    definiteness).
    """
    m = np.asarray(m, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    if np.linalg.norm(p_t - p_t.T) > 1e-8 or np.linalg.norm(p_t @ p_t - p_t) > 1e-8:
        raise ValueError("p_t is not a symmetric idempotent projector")
    basis = tangent_basis(p_t)
    if basis.shape[1] == 0:
        return np.zeros_like(m)
    restricted = basis.T @ m @ basis
    eigs = np.linalg.eigvalsh(0.5 * (restricted + restricted.T))
    if eigs[0] < min_eig_tol:
        raise SingularOnTangent(
            f"smallest tangent eigenvalue {eigs[0]:.3e} below {min_eig_tol:.0e}"
        )
    return basis @ np.linalg.solve(restricted, basis.T)


# ---------------------------------------------------------------------------
# closed sets with projections
# ---------------------------------------------------------------------------

class ClosedSet:
    """Base class: a closed set with a nearest-point projection.

    ``project`` accepts arrays of shape (..., d) and broadcasts over leading
    axes.  ``membership_residual`` measures constraint violation (zero on the
    set); ``contains`` compares it against MEMBERSHIP_TOL.
    """

    kind = "abstract"
    convex = True

    def project(self, x):
        raise NotImplementedError

    def membership_residual(self, x):
        raise NotImplementedError

    def contains(self, x, tol=MEMBERSHIP_TOL):
        return bool(np.all(self.membership_residual(x) <= tol))


@dataclass(frozen=True, eq=False)
class Ball(ClosedSet):
    center: np.ndarray
    radius: float
    kind = "ball"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def project(self, x):
        x = np.asarray(x, dtype=float)
        v = x - self.center
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(norm, 1e-300))
        return self.center + v * scale

    def membership_residual(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(np.linalg.norm(x - self.center, axis=-1) - self.radius, 0.0)


@dataclass(frozen=True, eq=False)
class Box(ClosedSet):
    lo: np.ndarray
    hi: np.ndarray
    kind = "box"

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.lo > self.hi):
            raise ValueError("box requires lo <= hi")

    def project(self, x):
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def membership_residual(self, x):
        x = np.asarray(x, dtype=float)
        over = np.maximum(x - self.hi, 0.0)
        under = np.maximum(self.lo - x, 0.0)
        return np.max(np.maximum(over, under), axis=-1)


@dataclass(frozen=True, eq=False)
class Halfspace(ClosedSet):
    """{x : <a, x> <= b} with a != 0."""

    a: np.ndarray
    b: float
    kind = "halfspace"

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if np.linalg.norm(a) == 0:
            raise ValueError("halfspace normal must be nonzero")
        object.__setattr__(self, "a", a)

    def project(self, x):
        x = np.asarray(x, dtype=float)
        slack = x @ self.a - self.b
        excess = np.maximum(slack, 0.0) / (self.a @ self.a)
        return x - excess[..., None] * self.a

    def membership_residual(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(x @ self.a - self.b, 0.0) / np.linalg.norm(self.a)


def dykstra(x, sets: Sequence[ClosedSet], max_sweeps=10_000, tol=1e-12):
    """Dykstra's alternating projections onto an intersection of convex sets.

    Exact for convex intersections.  Stops when a full sweep moves the
    iterate by less than ``tol``; raises NoConvergence (with the final sweep
    movement) after ``max_sweeps``.
    """
    y = np.array(x, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    increments = [np.zeros_like(y) for _ in sets]
    for _ in range(max_sweeps):
        start = y.copy()
        for i, s in enumerate(sets):
            w = y + increments[i]
            y = s.project(w)
            increments[i] = w - y
        move = np.max(np.linalg.norm(y - start, axis=-1))
        if move < tol:
            return y[0] if single else y
    raise NoConvergence(
        f"Dykstra did not converge in {max_sweeps} sweeps", residual=float(move)
    )


def _two_ball_geometry(b1: Ball, b2: Ball):
    """Rim circle of the lens: (axis unit vector, circle center, radius,
    tie-break direction for points on the axis)."""
    u = b2.center - b1.center
    dcc = np.linalg.norm(u)
    if dcc == 0:
        raise ValueError("concentric balls: use the smaller ball directly")
    u = u / dcc
    t = (dcc**2 + b1.radius**2 - b2.radius**2) / (2 * dcc)
    rho_sq = b1.radius**2 - t**2
    if rho_sq <= 0:
        raise ValueError("balls do not intersect in a full-dimensional lens")
    e = np.zeros_like(u)
    e[int(np.argmin(np.abs(u)))] = 1.0
    e = e - (e @ u) * u
    e = e / np.linalg.norm(e)
    return u, b1.center + t * u, np.sqrt(rho_sq), e


def _project_two_balls(x, b1: Ball, b2: Ball, geometry=None):
    """Exact nearest point in the intersection of two balls (the "lens").

    Case analysis: a feasible point is its own projection; otherwise the
    single-ball projection that lands in the other ball is optimal; otherwise
    the projection lies on the rim circle where both sphere constraints are
    active.  Points on the center axis project to an arbitrary fixed rim
    point (measure-zero tie).  Runs inside the solver step, so everything is
    flat elementwise arithmetic on squared distances.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    axis, rim_center, rim_radius, tie_dir = (
        _two_ball_geometry(b1, b2) if geometry is None else geometry
    )
    c1, r1 = b1.center, b1.radius
    c2, r2 = b2.center, b2.radius

    v1 = pts - c1
    v2 = pts - c2
    d1sq = (v1 * v1).sum(axis=-1)
    d2sq = (v2 * v2).sum(axis=-1)
    feas = (d1sq <= r1 * r1) & (d2sq <= r2 * r2)
    if feas.all():
        return x

    s1 = r1 / np.sqrt(np.maximum(d1sq, 1e-300))
    s2 = r2 / np.sqrt(np.maximum(d2sq, 1e-300))
    p1 = c1 + v1 * s1[..., None]
    p2 = c2 + v2 * s2[..., None]
    w1 = p1 - c2
    w2 = p2 - c1
    ok1 = (w1 * w1).sum(axis=-1) <= r2 * r2 + 1e-12
    ok2 = (w2 * w2).sum(axis=-1) <= r1 * r1 + 1e-12

    w = pts - rim_center
    axial = w @ axis
    radial = w - axial[..., None] * axis
    rsq = (radial * radial).sum(axis=-1)
    degenerate = rsq < 1e-300
    if degenerate.any():
        radial = np.where(degenerate[..., None], tie_dir, radial)
        rsq = np.where(degenerate, 1.0, rsq)
    rim = rim_center + radial * (rim_radius / np.sqrt(rsq))[..., None]

    g1 = p1 - pts
    g2 = p2 - pts
    gr = rim - pts
    dd1 = np.where(ok1, (g1 * g1).sum(axis=-1), np.inf)
    dd2 = np.where(ok2, (g2 * g2).sum(axis=-1), np.inf)
    ddr = (gr * gr).sum(axis=-1)
    use1 = dd1 <= np.minimum(dd2, ddr)
    use2 = ~use1 & (dd2 <= ddr)
    out = np.where(use1[..., None], p1, np.where(use2[..., None], p2, rim))
    out = np.where(feas[..., None], pts, out)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class BallIntersection(ClosedSet):
    """Intersection of balls.

    ``strategy`` selects the projection routine: "dykstra" (any number of
    balls) or "two_ball_exact" (closed form, exactly two balls).  Two-ball
    intersections default to the exact form; it agrees with Dykstra and is
    cheap enough for per-step use inside solvers.
    """

    balls: tuple
    strategy: str = "auto"
    max_sweeps: int = 10_000
    sweep_tol: float = 1e-12
    kind = "intersection"

    def __post_init__(self):
        balls = tuple(self.balls)
        if not balls:
            raise ValueError("intersection needs at least one ball")
        object.__setattr__(self, "balls", balls)
        strategy = self.strategy
        if strategy == "auto":
            strategy = "two_ball_exact" if len(balls) == 2 else "dykstra"
        if strategy == "two_ball_exact" and len(balls) != 2:
            raise ValueError("two_ball_exact requires exactly two balls")
        if strategy not in ("dykstra", "two_ball_exact"):
            raise ValueError(f"unknown projection strategy {strategy!r}")
        object.__setattr__(self, "strategy", strategy)
        if strategy == "two_ball_exact":
            object.__setattr__(self, "_geometry",
                               _two_ball_geometry(balls[0], balls[1]))

    def project(self, x):
        if len(self.balls) == 1:
            return self.balls[0].project(x)
        if self.strategy == "two_ball_exact":
            return _project_two_balls(x, self.balls[0], self.balls[1],
                                      self._geometry)
        return dykstra(x, self.balls, self.max_sweeps, self.sweep_tol)

    def membership_residual(self, x):
        res = [b.membership_residual(x) for b in self.balls]
        return np.max(np.stack(res, axis=-1), axis=-1)


@dataclass(frozen=True, eq=False)
class ConvexIntersection(ClosedSet):
    """Dykstra-projected intersection of arbitrary convex primitive sets."""

    sets: tuple
    max_sweeps: int = 10_000
    sweep_tol: float = 1e-12
    kind = "intersection"

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))

    def project(self, x):
        if len(self.sets) == 1:
            return self.sets[0].project(x)
        return dykstra(x, self.sets, self.max_sweeps, self.sweep_tol)

    def membership_residual(self, x):
        res = [s.membership_residual(x) for s in self.sets]
        return np.max(np.stack(res, axis=-1), axis=-1)


@dataclass(frozen=True, eq=False)
class SublevelSet(ClosedSet):
    """{x : g_i(x) <= 0 for all i} for smooth scalar constraints.

    Projection onto a single smooth sublevel set runs Gauss-Newton on its
    zero surface when the point is infeasible; several constraints are
    combined with Dykstra.  Only suitable for convex constraints.
    """

    values: tuple      # callables g_i
    grads: tuple       # callables grad g_i
    kind = "sublevel"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "grads", tuple(self.grads))

    def _project_one(self, i, x):
        g, dg = self.values[i], self.grads[i]
        x = np.asarray(x, dtype=float)
        if x.ndim > 1:
            return np.stack([self._project_one(i, row) for row in x])
        if g(x) <= 0:
            return x
        y = x.copy()
        for _ in range(100):
            val = g(y)
            grad = np.asarray(dg(y), dtype=float)
            nrm2 = grad @ grad
            if nrm2 == 0:
                raise NoConvergence("vanishing constraint gradient", residual=abs(val))
            y = y - (val / nrm2) * grad
            if abs(g(y)) <= MEMBERSHIP_TOL:
                # tangential correction toward x on {g = 0}
                grad = np.asarray(dg(y), dtype=float)
                tang = (x - y) - ((x - y) @ grad / (grad @ grad)) * grad
                if np.linalg.norm(tang) <= 1e-12:
                    return y
                y = y + tang
        raise NoConvergence("sublevel projection stalled", residual=abs(float(g(y))))

    def project(self, x):
        if len(self.values) == 1:
            return self._project_one(0, x)

        class _One(ClosedSet):
            def __init__(self, outer, i):
                self.outer, self.i = outer, i

            def project(self, z):
                return self.outer._project_one(self.i, z)

        return dykstra(x, [_One(self, i) for i in range(len(self.values))])

    def membership_residual(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.stack([np.maximum(np.apply_along_axis(g, -1, x), 0.0)
                         for g in self.values], axis=-1)
        return np.max(vals, axis=-1)


def project_set(x, s: ClosedSet):
    """Nearest-point projection onto a closed set; see ClosedSet.project."""
    return s.project(x)


# ---------------------------------------------------------------------------
# proximal maps
# ---------------------------------------------------------------------------

class ProxFunction:
    """A closed function f with an exact proximal map prox_{alpha f}."""

    kind = "abstract"

    def prox(self, x, alpha):
        raise NotImplementedError

    def value(self, x):
        raise NotImplementedError

    def domain_residual(self, x):
        """Violation of dom f; zero except for indicator kinds."""
        return np.zeros(np.asarray(x).shape[:-1])


class ZeroProx(ProxFunction):
    kind = "zero"

    def prox(self, x, alpha):
        return np.asarray(x, dtype=float)

    def value(self, x):
        return 0.0


@dataclass(frozen=True, eq=False)
class IndicatorProx(ProxFunction):
    set: ClosedSet
    kind = "indicator"

    def prox(self, x, alpha):
        return self.set.project(x)

    def value(self, x):
        return 0.0 if self.set.contains(x) else np.inf

    def domain_residual(self, x):
        return self.set.membership_residual(x)


@dataclass(frozen=True)
class OneNormProx(ProxFunction):
    """f(x) = weight * ||x||_1; prox is soft thresholding."""

    weight: float = 1.0
    kind = "one_norm"

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")

    def prox(self, x, alpha):
        x = np.asarray(x, dtype=float)
        t = alpha * self.weight
        return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)

    def value(self, x):
        return self.weight * float(np.sum(np.abs(x)))


@dataclass(frozen=True)
class CustomProx(ProxFunction):
    value_oracle: Callable
    prox_oracle: Callable
    kind = "custom"

    def prox(self, x, alpha):
        return np.asarray(self.prox_oracle(x, alpha), dtype=float)

    def value(self, x):
        return float(self.value_oracle(x))


def prox(f: ProxFunction, alpha, x):
    """argmin_y f(y) + ||y - x||^2 / (2 alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return f.prox(np.asarray(x, dtype=float), alpha)


# ---------------------------------------------------------------------------
# embedded manifolds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Manifold:
    """An embedded manifold given by defining equations G(x) = 0.

    ``jacobian`` returns the (codim x d) matrix of the defining map; it must
    have full row rank on the manifold (checked through tangent_projector).
    ``closed_form_projection``, when present, must broadcast over leading
    axes; the generic nearest-point projection is Gauss-Newton based and
    valid for points within ``chart_radius`` of the manifold.
    """

    defining_map: Callable
    jacobian: Callable
    ambient_dim: int
    codim: int
    closed_form_projection: Optional[Callable] = None
    distance_map: Optional[Callable] = None
    tangent_apply: Optional[Callable] = None   # (y, v) -> P_T(y) v, broadcastable
    chart_radius: float = 1.0
    name: str = "manifold"

    def tangent_projector_at(self, y):
        return tangent_projector(self.jacobian(np.asarray(y, dtype=float)))

    def tangent_basis_at(self, y):
        return tangent_basis(self.tangent_projector_at(y))

    def project(self, x, tol=MEMBERSHIP_TOL, tangential_tol=1e-10, max_iter=100):
        x = np.asarray(x, dtype=float)
        if self.closed_form_projection is not None:
            return self.closed_form_projection(x)
        if x.ndim > 1:
            return np.stack(
                [self.project(row, tol, tangential_tol, max_iter) for row in x]
            )
        return _gauss_newton_project(self, x, tol, tangential_tol, max_iter)

    def distance(self, x):
        if self.distance_map is not None:
            return self.distance_map(np.asarray(x, dtype=float))
        return np.linalg.norm(np.asarray(x, dtype=float) - self.project(x), axis=-1)

    def residual(self, x):
        return np.linalg.norm(np.atleast_1d(self.defining_map(x)))


def _retract(manifold, y, tol, max_iter=50):
    """Zero-residual Gauss-Newton retraction onto {G = 0}."""
    for _ in range(max_iter):
        g = np.atleast_1d(np.asarray(manifold.defining_map(y), dtype=float))
        if np.linalg.norm(g) <= tol:
            return y
        jac = np.atleast_2d(np.asarray(manifold.jacobian(y), dtype=float))
        y = y - jac.T @ np.linalg.solve(jac @ jac.T, g)
    g = np.atleast_1d(manifold.defining_map(y))
    raise NoConvergence("retraction stalled", residual=float(np.linalg.norm(g)))


def _gauss_newton_project(manifold, x, tol, tangential_tol, max_iter):
    """Nearest point on the manifold via alternating tangent steps.

    Solves the stationarity system (y - x perpendicular to T(y), G(y) = 0):
    each pass moves along the current tangent residual P_T(y)(x - y) and
    re-retracts onto the zero set.
    """
    y = _retract(manifold, x.copy(), tol)
    if np.linalg.norm(y - x) > manifold.chart_radius:
        raise OutOfChart(
            f"point at distance {np.linalg.norm(y - x):.3e} exceeds chart radius "
            f"{manifold.chart_radius:.3e}"
        )
    for _ in range(max_iter):
        p_t = manifold.tangent_projector_at(y)
        tang = p_t @ (x - y)
        if np.linalg.norm(tang) <= tangential_tol:
            return y
        y = _retract(manifold, y + tang, tol)
        if np.linalg.norm(y - x) > 2 * manifold.chart_radius:
            raise OutOfChart("projection iterate left the chart neighborhood")
    p_t = manifold.tangent_projector_at(y)
    raise NoConvergence(
        "manifold projection stalled",
        residual=float(np.linalg.norm(p_t @ (x - y))),
    )


def project_manifold(x, m: Manifold, **kwargs):
    """Nearest-point projection onto an embedded manifold."""
    return m.project(x, **kwargs)
