"""Problem models for the inclusion 0 in E[A(x,z)] + dg(x) + df(x).

A stochastic variational inequality is specified by a sampled map A(x, z),
an optional mean map A(x) = E A(x, z), a subgradient oracle for the locally
Lipschitz part g, and a proximal-friendly part f.  Nonlinear programs reduce
to this form with A = the sampled objective gradient and f the indicator of
the feasible set.

Problems are immutable and shareable; every trajectory owns an independent
random generator derived from (master seed, replication index).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import (
    Ball,
    BallIntersection,
    ClosedSet,
    IndicatorProx,
    Manifold,
    ProxFunction,
    ZeroProx,
)

SQRT3 = np.sqrt(3.0)


class MissingMeanMap(Exception):
    """A diagnostic needed the exact mean map and refuses to estimate it."""


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Declared noise regularity: a fourth-moment bound and whether the
    decomposition nu = nu1 + nu2(x) is available in closed form."""

    fourth_moment_bound: Callable  # q(x) with E||nu||^4 <= q(x)
    decomposable: bool = False


@dataclass(frozen=True, eq=False)
class StochasticVIProblem:
    """The data (A(.,z), g, f) plus a sampler for z.

    ``sample_map`` and ``mean_map`` must broadcast over leading axes of x
    (and z), which the batched Monte Carlo layer relies on.  ``draw(rng, n)``
    returns n stacked samples of z using only the supplied generator.
    """

    dim: int
    sample_map: Callable               # A(x, z)
    draw: Callable                     # (rng, n) -> (n, zdim)
    mean_map: Optional[Callable] = None
    g_subgrad: Optional[Callable] = None
    f_part: ProxFunction = field(default_factory=ZeroProx)
    solution_hint: Optional[np.ndarray] = None
    noise_covariance: Optional[np.ndarray] = None   # Cov(A(x*, z)) if known
    noise_model: Optional[NoiseModel] = None
    name: str = "vi"

    def mean(self, x):
        if self.mean_map is None:
            raise MissingMeanMap(f"problem {self.name!r} declares no mean map")
        return self.mean_map(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class Constraint:
    """Smooth scalar constraint with gradient and Hessian oracles."""

    value: Callable
    grad: Callable
    hess: Callable
    kind: str = "inequality"          # or "equality"

    def __post_init__(self):
        if self.kind not in ("inequality", "equality"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class NLPProblem:
    """min E f(x, z) subject to smooth constraints.

    Mean-objective oracles feed the KKT analysis; the sampled gradient
    realizes A(x, z) under the VI reduction.
    """

    dim: int
    objective_value: Callable          # mean objective
    objective_grad: Callable
    objective_hess: Callable
    objective_sample_value: Callable   # f(x, z)
    objective_sample_grad: Callable    # grad_x f(x, z)
    constraints: tuple
    draw: Callable
    feasible_set: Optional[ClosedSet] = None
    solution_hint: Optional[np.ndarray] = None
    noise_covariance: Optional[np.ndarray] = None
    name: str = "nlp"

    def constraint_values(self, x):
        return np.array([c.value(x) for c in self.constraints])

    def constraint_grads(self, x, indices=None):
        idx = list(range(len(self.constraints))) if indices is None else list(indices)
        return np.array([self.constraints[i].grad(x) for i in idx],
                        dtype=float).reshape(len(idx), self.dim)


def nlp_to_vi(nlp: NLPProblem, noise_model=None) -> StochasticVIProblem:
    """VI reduction of an NLP: A = sampled gradient, f = indicator of the
    feasible set, g = 0."""
    if nlp.feasible_set is None:
        raise ValueError("NLP needs a feasible_set with a projection to reduce to a VI")
    return StochasticVIProblem(
        dim=nlp.dim,
        sample_map=nlp.objective_sample_grad,
        draw=nlp.draw,
        mean_map=nlp.objective_grad,
        g_subgrad=None,
        f_part=IndicatorProx(nlp.feasible_set),
        solution_hint=nlp.solution_hint,
        noise_covariance=nlp.noise_covariance,
        noise_model=noise_model,
        name=nlp.name,
    )


def evaluate_noise(problem: StochasticVIProblem, x, z):
    """Decompose the oracle noise at (x, z) into nu = nu1 + nu2(x).

    nu  = A(x, z) - A(x)
    nu1 = A(x*, z) - A(x*)   (evaluated at the declared solution)
    nu2 = nu - nu1
    """
    if problem.mean_map is None:
        raise MissingMeanMap("noise decomposition requires the exact mean map")
    if problem.solution_hint is None:
        raise MissingMeanMap("noise decomposition requires a declared solution point")
    x = np.asarray(x, dtype=float)
    xs = np.asarray(problem.solution_hint, dtype=float)
    nu = problem.sample_map(x, z) - problem.mean_map(x)
    nu1 = problem.sample_map(xs, z) - problem.mean_map(xs)
    return nu, nu1, nu - nu1


# ---------------------------------------------------------------------------
# built-in instances
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InstanceBundle:
    vi: StochasticVIProblem
    nlp: Optional[NLPProblem]
    manifold: Optional[Manifold]
    x_star: np.ndarray
    f_m: Optional[Callable] = None    # covariant mean field on the manifold


def _circle_manifold():
    """M = {x1 = 0, x2^2 + x3^2 = 3}: the rim of the two-ball lens."""

    def defining_map(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0], x[..., 1] ** 2 + x[..., 2] ** 2 - 3.0], axis=-1)

    def jacobian(x):
        x = np.asarray(x, dtype=float)
        return np.array([[1.0, 0.0, 0.0], [0.0, 2.0 * x[1], 2.0 * x[2]]])

    def closed_form(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(x[..., 1] ** 2 + x[..., 2] ** 2)
        safe = np.where(r < 1e-300, 1.0, r)
        out = np.empty_like(x)
        out[..., 0] = 0.0
        out[..., 1] = np.where(r < 1e-300, 0.0, SQRT3 * x[..., 1] / safe)
        out[..., 2] = np.where(r < 1e-300, SQRT3, SQRT3 * x[..., 2] / safe)
        return out

    def distance_map(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(x[..., 1] ** 2 + x[..., 2] ** 2)
        return np.sqrt(x[..., 0] ** 2 + (r - SQRT3) ** 2)

    def tangent_apply(y, v):
        # unit tangent at y on the circle is (0, -y3, y2) / sqrt(3)
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        t2 = -y[..., 2] / SQRT3
        t3 = y[..., 1] / SQRT3
        inner = t2 * v[..., 1] + t3 * v[..., 2]
        out = np.zeros_like(v)
        out[..., 1] = inner * t2
        out[..., 2] = inner * t3
        return out

    return Manifold(
        defining_map=defining_map,
        jacobian=jacobian,
        ambient_dim=3,
        codim=2,
        closed_form_projection=closed_form,
        distance_map=distance_map,
        tangent_apply=tangent_apply,
        chart_radius=0.9 * SQRT3,
        name="two_ball_rim",
    )


def build_two_ball_instance() -> InstanceBundle:
    """Linear objective over the intersection of two balls of radius 2
    centered at (-1,0,0) and (1,0,0), with additive Gaussian gradient noise.

    The objective is f(x, z) = -x3 + <z, x> with z ~ N(0, I3); the solution
    (0, 0, sqrt(3)) sits on the rim circle with both ball constraints active
    and strictly positive multipliers 1/(4 sqrt(3)).
    """
    c1 = np.array([-1.0, 0.0, 0.0])
    c2 = np.array([1.0, 0.0, 0.0])
    radius = 2.0
    drift = np.array([0.0, 0.0, -1.0])
    x_star = np.array([0.0, 0.0, SQRT3])

    lens = BallIntersection((Ball(c1, radius), Ball(c2, radius)))

    def make_sq_constraint(center):
        center = np.asarray(center, dtype=float)

        def value(x):
            d = np.asarray(x, dtype=float) - center
            return float(d @ d - radius**2)

        def grad(x):
            return 2.0 * (np.asarray(x, dtype=float) - center)

        def hess(x):
            return 2.0 * np.eye(3)

        return Constraint(value, grad, hess, kind="inequality")

    def draw(rng, n):
        return rng.standard_normal((n, 3))

    def sample_grad(x, z):
        return drift + np.asarray(z, dtype=float)

    nlp = NLPProblem(
        dim=3,
        objective_value=lambda x: -float(np.asarray(x)[2]),
        # read-only broadcast view: the solver hot loop never mutates it
        objective_grad=lambda x: np.broadcast_to(drift, np.asarray(x).shape),
        objective_hess=lambda x: np.zeros((3, 3)),
        objective_sample_value=lambda x, z: float(-np.asarray(x)[2] + np.asarray(z) @ np.asarray(x)),
        objective_sample_grad=sample_grad,
        constraints=(make_sq_constraint(c1), make_sq_constraint(c2)),
        draw=draw,
        feasible_set=lens,
        solution_hint=x_star,
        noise_covariance=np.eye(3),
        name="two_ball",
    )
    noise = NoiseModel(fourth_moment_bound=lambda x: 30.0, decomposable=True)
    vi = nlp_to_vi(nlp, noise_model=noise)
    manifold = _circle_manifold()

    def f_m(y):
        """Covariant mean field P_T(y) A(y) on the rim; the covariant
        gradients of g = 0 and f = indicator vanish there."""
        y = np.asarray(y, dtype=float)
        t2 = -y[..., 2] / SQRT3
        t3 = y[..., 1] / SQRT3
        inner = t2 * drift[1] + t3 * drift[2]
        out = np.zeros_like(y)
        out[..., 1] = inner * t2
        out[..., 2] = inner * t3
        return out

    return InstanceBundle(vi=vi, nlp=nlp, manifold=manifold, x_star=x_star, f_m=f_m)


def build_quadratic_instance(dim=3, mu=None, name="quadratic") -> InstanceBundle:
    """Unconstrained sample-mean problem: min E ||x - z||^2 / 2, z ~ N(mu, I).

    A(x, z) = x - z, the solution is mu, and the SAA estimator is exactly
    the sample mean.  The active manifold is the whole space.
    """
    mu = np.zeros(dim) if mu is None else np.asarray(mu, dtype=float)

    def draw(rng, n):
        return mu + rng.standard_normal((n, dim))

    def sample_grad(x, z):
        return np.asarray(x, dtype=float) - np.asarray(z, dtype=float)

    def hess(x):
        return np.eye(dim)

    nlp = NLPProblem(
        dim=dim,
        objective_value=lambda x: 0.5 * float(np.sum((np.asarray(x) - mu) ** 2)) + 0.5 * dim,
        objective_grad=lambda x: np.asarray(x, dtype=float) - mu,
        objective_hess=hess,
        objective_sample_value=lambda x, z: 0.5 * float(np.sum((np.asarray(x) - np.asarray(z)) ** 2)),
        objective_sample_grad=sample_grad,
        constraints=(),
        draw=draw,
        feasible_set=None,
        solution_hint=mu,
        noise_covariance=np.eye(dim),
        name=name,
    )
    vi = StochasticVIProblem(
        dim=dim,
        sample_map=sample_grad,
        draw=draw,
        mean_map=nlp.objective_grad,
        f_part=ZeroProx(),
        solution_hint=mu,
        noise_covariance=np.eye(dim),
        noise_model=NoiseModel(fourth_moment_bound=lambda x: 3.0 * dim**2, decomposable=True),
        name=name,
    )

    def full_space_defining(x):
        return np.zeros(np.asarray(x).shape[:-1] + (0,))

    manifold = Manifold(
        defining_map=full_space_defining,
        jacobian=lambda x: np.zeros((0, dim)),
        ambient_dim=dim,
        codim=0,
        closed_form_projection=lambda x: np.asarray(x, dtype=float),
        distance_map=lambda x: np.zeros(np.asarray(x).shape[:-1]),
        chart_radius=np.inf,
        name="full_space",
    )
    return InstanceBundle(vi=vi, nlp=nlp, manifold=manifold, x_star=mu,
                          f_m=lambda y: np.asarray(y, dtype=float) - mu)


def build_halfspace_instance() -> InstanceBundle:
    """min x1 over {x : -x1 <= 0} in R^3; x* = 0 with multiplier 1."""
    e1 = np.array([1.0, 0.0, 0.0])

    def draw(rng, n):
        return np.zeros((n, 0))

    cons = Constraint(
        value=lambda x: -float(np.asarray(x)[0]),
        grad=lambda x: -e1.copy(),
        hess=lambda x: np.zeros((3, 3)),
        kind="inequality",
    )
    from .geometry import Halfspace

    feasible = Halfspace(a=-e1, b=0.0)
    nlp = NLPProblem(
        dim=3,
        objective_value=lambda x: float(np.asarray(x)[0]),
        objective_grad=lambda x: e1.copy(),
        objective_hess=lambda x: np.zeros((3, 3)),
        objective_sample_value=lambda x, z: float(np.asarray(x)[0]),
        objective_sample_grad=lambda x, z: np.broadcast_to(e1, np.asarray(x).shape).copy(),
        constraints=(cons,),
        draw=draw,
        feasible_set=feasible,
        solution_hint=np.zeros(3),
        noise_covariance=np.zeros((3, 3)),
        name="halfspace",
    )
    vi = nlp_to_vi(nlp)
    return InstanceBundle(vi=vi, nlp=nlp, manifold=None, x_star=np.zeros(3))


def build_box_linear_instance(drift=None, dim=3, name="box_linear") -> InstanceBundle:
    """Deterministic linear objective <c, x> over the unit box [0, 1]^d."""
    from .geometry import Box

    drift = np.array([1.0, -1.0, 0.5][:dim]) if drift is None else np.asarray(drift, dtype=float)

    def draw(rng, n):
        return np.zeros((n, 0))

    box = Box(np.zeros(dim), np.ones(dim))
    x_star = np.where(drift > 0, 0.0, np.where(drift < 0, 1.0, 0.0))

    def make_bound_constraint(i, sign):
        # sign=-1: -x_i <= 0 ; sign=+1: x_i - 1 <= 0
        def value(x):
            xi = float(np.asarray(x)[i])
            return -xi if sign < 0 else xi - 1.0

        def grad(x):
            g = np.zeros(dim)
            g[i] = -1.0 if sign < 0 else 1.0
            return g

        return Constraint(value, grad, lambda x: np.zeros((dim, dim)), kind="inequality")

    cons = tuple(make_bound_constraint(i, s) for i in range(dim) for s in (-1, +1))
    nlp = NLPProblem(
        dim=dim,
        objective_value=lambda x: float(drift @ np.asarray(x)),
        objective_grad=lambda x: np.broadcast_to(drift, np.asarray(x).shape).copy()
        if np.asarray(x).ndim > 1
        else drift.copy(),
        objective_hess=lambda x: np.zeros((dim, dim)),
        objective_sample_value=lambda x, z: float(drift @ np.asarray(x)),
        objective_sample_grad=lambda x, z: np.broadcast_to(drift, np.asarray(x).shape).copy(),
        constraints=cons,
        draw=draw,
        feasible_set=box,
        solution_hint=x_star,
        noise_covariance=np.zeros((dim, dim)),
        name=name,
    )
    vi = nlp_to_vi(nlp)
    return InstanceBundle(vi=vi, nlp=nlp, manifold=None, x_star=x_star)


INSTANCE_BUILDERS = {
    "two_ball": build_two_ball_instance,
    "quadratic": build_quadratic_instance,
    "halfspace": build_halfspace_instance,
    "box_linear": build_box_linear_instance,
}


def get_instance(name: str) -> InstanceBundle:
    try:
        return INSTANCE_BUILDERS[name]()
    except KeyError:
        raise KeyError(
            f"unknown instance {name!r}; built-ins: {sorted(INSTANCE_BUILDERS)}"
        ) from None
