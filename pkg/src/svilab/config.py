"""Declarative experiment configs: TOML parsing, validation, and the inline
NLP instance builder (polynomial objectives over ball/box/halfspace
constraints)."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .geometry import (
    Ball,
    BallIntersection,
    Box,
    ConvexIntersection,
    Halfspace,
    Manifold,
)
from .problems import (
    Constraint,
    InstanceBundle,
    NLPProblem,
    get_instance,
    nlp_to_vi,
)


class ConfigError(Exception):
    """Invalid experiment configuration; the message names the offending key."""


KNOWN_DIAGNOSTICS = ("kkt", "clt", "saa", "decay", "shadow", "regularity")

_TOP_KEYS = {
    "instance", "seed", "K", "R", "gamma", "c", "diagnostics", "out_dir",
    "x0", "clt", "saa", "decay", "shadow", "regularity", "tolerances",
}
_SECTION_KEYS = {
    "clt": {"reps"},
    "saa": {"samples", "runs"},
    "decay": {"k0", "delta", "reps"},
    "shadow": {"k0", "delta", "reps"},
    "regularity": {"samples", "delta"},
    "tolerances": {"active_set_tol", "mc_samples"},
}
_INSTANCE_KEYS = {"kind", "dim", "x_star", "objective", "constraints", "chart_radius"}
_OBJECTIVE_KEYS = {"type", "c", "q", "terms", "noise_sigma"}
_CONSTRAINT_KEYS = {"type", "center", "radius", "lo", "hi", "a", "b"}


@dataclass
class ExperimentConfig:
    instance: object                 # name or inline table
    seed: int = 0
    iterations: int = 100_000
    reps: int = 200
    gamma: float = 0.75
    c: float = 1.0
    diagnostics: tuple = ("kkt", "clt")
    out_dir: str = "svilab_out"
    x0: Optional[list] = None
    clt: dict = field(default_factory=dict)
    saa: dict = field(default_factory=lambda: {"samples": 10_000, "runs": 200})
    decay: dict = field(default_factory=lambda: {"k0": 100, "delta": 0.5, "reps": 100})
    shadow: dict = field(default_factory=lambda: {"k0": 100, "delta": 0.5, "reps": 100})
    regularity: dict = field(default_factory=lambda: {"samples": 1000, "delta": 0.3})
    tolerances: dict = field(default_factory=lambda: {"active_set_tol": 1e-8,
                                                      "mc_samples": 100_000})

    def validate(self):
        if not 0.5 < self.gamma <= 1.0:
            raise ConfigError(f"gamma={self.gamma} must lie in (0.5, 1]")
        if self.c <= 0:
            raise ConfigError(f"c={self.c} must be positive")
        if self.iterations < 10:
            raise ConfigError(f"K={self.iterations} must be >= 10")
        if self.reps < 1:
            raise ConfigError(f"R={self.reps} must be >= 1")
        for d in self.diagnostics:
            if d not in KNOWN_DIAGNOSTICS:
                raise ConfigError(f"unknown diagnostic {d!r}")
        return self


def _reject_unknown(table, allowed, context):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {context}")


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, _TOP_KEYS, "config")
    for section, keys in _SECTION_KEYS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"{section} must be a table")
            _reject_unknown(raw[section], keys, f"[{section}]")
    if "instance" not in raw:
        raise ConfigError("missing required key 'instance'")
    instance = raw["instance"]
    if isinstance(instance, dict):
        _validate_inline_instance(instance)
    elif not isinstance(instance, str):
        raise ConfigError("instance must be a name or an inline table")

    cfg = ExperimentConfig(instance=instance)
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "K" in raw:
        cfg.iterations = int(raw["K"])
    if "R" in raw:
        cfg.reps = int(raw["R"])
    if "gamma" in raw:
        cfg.gamma = float(raw["gamma"])
    if "c" in raw:
        cfg.c = float(raw["c"])
    if "diagnostics" in raw:
        cfg.diagnostics = tuple(raw["diagnostics"])
    if "out_dir" in raw:
        cfg.out_dir = str(raw["out_dir"])
    if "x0" in raw:
        cfg.x0 = [float(v) for v in raw["x0"]]
    for section in _SECTION_KEYS:
        if section in raw:
            merged = dict(getattr(cfg, section))
            merged.update(raw[section])
            setattr(cfg, section, merged)
    return cfg.validate()


def _validate_inline_instance(table):
    _reject_unknown(table, _INSTANCE_KEYS, "[instance]")
    if table.get("kind") != "nlp":
        raise ConfigError("inline instances require kind = 'nlp'")
    if "dim" not in table or "objective" not in table:
        raise ConfigError("[instance] needs 'dim' and 'objective'")
    _reject_unknown(table["objective"], _OBJECTIVE_KEYS, "[instance.objective]")
    for i, cons in enumerate(table.get("constraints", [])):
        _reject_unknown(cons, _CONSTRAINT_KEYS, f"[instance.constraints[{i}]]")
        if cons.get("type") not in ("ball", "box", "halfspace"):
            raise ConfigError(
                f"constraint type {cons.get('type')!r} not in ball/box/halfspace"
            )


# ---------------------------------------------------------------------------
# inline NLP builder
# ---------------------------------------------------------------------------

def _polynomial_oracles(dim, terms):
    """Value/grad/hess oracles for sum_t coef * prod_i x_i^powers_i."""
    terms = [(float(t["coef"]), np.asarray(t["powers"], dtype=int)) for t in terms]
    for _, powers in terms:
        if len(powers) != dim or np.any(powers < 0):
            raise ConfigError("each monomial needs nonnegative 'powers' of length dim")

    def value(x):
        x = np.asarray(x, dtype=float)
        return float(sum(c * np.prod(x**p) for c, p in terms))

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(dim)
        for c, p in terms:
            for j in range(dim):
                if p[j] > 0:
                    q = p.copy()
                    q[j] -= 1
                    g[j] += c * p[j] * np.prod(x**q)
        return g

    def hess(x):
        x = np.asarray(x, dtype=float)
        h = np.zeros((dim, dim))
        for c, p in terms:
            for j in range(dim):
                if p[j] == 0:
                    continue
                for l in range(dim):
                    q = p.copy()
                    q[j] -= 1
                    if j == l:
                        if q[l] == 0:
                            continue
                        coef = c * p[j] * q[l]
                        q[l] -= 1
                    else:
                        if p[l] == 0:
                            continue
                        coef = c * p[j] * p[l]
                        q[l] -= 1
                    h[j, l] += coef * np.prod(x**q)
        return 0.5 * (h + h.T)

    return value, grad, hess


def _objective_oracles(dim, table):
    kind = table.get("type", "linear")
    if kind == "linear":
        c = np.asarray(table.get("c", np.zeros(dim)), dtype=float)
        return (lambda x: float(c @ np.asarray(x, dtype=float)),
                lambda x: np.broadcast_to(c, np.asarray(x).shape).copy(),
                lambda x: np.zeros((dim, dim)))
    if kind == "quadratic":
        q = np.asarray(table.get("q", np.eye(dim)), dtype=float)
        q = 0.5 * (q + q.T)
        c = np.asarray(table.get("c", np.zeros(dim)), dtype=float)
        return (lambda x: float(0.5 * np.asarray(x) @ q @ np.asarray(x) + c @ np.asarray(x)),
                lambda x: np.asarray(x, dtype=float) @ q.T + c,
                lambda x: q.copy())
    if kind == "polynomial":
        if "terms" not in table:
            raise ConfigError("polynomial objective needs 'terms'")
        return _polynomial_oracles(dim, table["terms"])
    raise ConfigError(f"unknown objective type {kind!r}")


def _constraint_from_table(dim, table):
    kind = table["type"]
    if kind == "ball":
        center = np.asarray(table["center"], dtype=float)
        radius = float(table["radius"])
        # squared form keeps the Hessian smooth at the center
        cons = [Constraint(
            value=lambda x, c=center, r=radius: float(
                (np.asarray(x) - c) @ (np.asarray(x) - c) - r * r),
            grad=lambda x, c=center: 2.0 * (np.asarray(x, dtype=float) - c),
            hess=lambda x: 2.0 * np.eye(dim),
        )]
        return cons, Ball(center, radius)
    if kind == "box":
        lo = np.asarray(table["lo"], dtype=float)
        hi = np.asarray(table["hi"], dtype=float)
        cons = []
        for i in range(dim):
            if np.isfinite(lo[i]):
                cons.append(Constraint(
                    value=lambda x, i=i, v=lo[i]: float(v - np.asarray(x)[i]),
                    grad=lambda x, i=i: -_unit(dim, i),
                    hess=lambda x: np.zeros((dim, dim)),
                ))
            if np.isfinite(hi[i]):
                cons.append(Constraint(
                    value=lambda x, i=i, v=hi[i]: float(np.asarray(x)[i] - v),
                    grad=lambda x, i=i: _unit(dim, i),
                    hess=lambda x: np.zeros((dim, dim)),
                ))
        return cons, Box(lo, hi)
    if kind == "halfspace":
        a = np.asarray(table["a"], dtype=float)
        b = float(table["b"])
        cons = [Constraint(
            value=lambda x: float(a @ np.asarray(x) - b),
            grad=lambda x: a.copy(),
            hess=lambda x: np.zeros((dim, dim)),
        )]
        return cons, Halfspace(a, b)
    raise ConfigError(f"unknown constraint type {kind!r}")


def _unit(dim, i):
    e = np.zeros(dim)
    e[i] = 1.0
    return e


def build_inline_instance(table) -> InstanceBundle:
    """Materialize an inline NLP: polynomial-family objective with additive
    Gaussian gradient noise over an intersection of primitive convex sets."""
    dim = int(table["dim"])
    value, grad, hess = _objective_oracles(dim, table["objective"])
    sigma = float(table["objective"].get("noise_sigma", 1.0))

    constraints, sets = [], []
    for cons_table in table.get("constraints", []):
        cons, s = _constraint_from_table(dim, cons_table)
        constraints.extend(cons)
        sets.append(s)
    if not sets:
        feasible = None
    elif len(sets) == 1:
        feasible = sets[0]
    elif all(isinstance(s, Ball) for s in sets) and len(sets) == 2:
        feasible = BallIntersection(tuple(sets))
    else:
        feasible = ConvexIntersection(tuple(sets))

    def draw(rng, n):
        return sigma * rng.standard_normal((n, dim)) if sigma > 0 else np.zeros((n, dim))

    def sample_grad(x, z):
        return grad(x) + np.asarray(z, dtype=float)

    x_star = None
    if "x_star" in table:
        x_star = np.asarray(table["x_star"], dtype=float)

    nlp = NLPProblem(
        dim=dim,
        objective_value=value,
        objective_grad=grad,
        objective_hess=hess,
        objective_sample_value=lambda x, z: value(x) + float(np.asarray(z) @ np.asarray(x)),
        objective_sample_grad=sample_grad,
        constraints=tuple(constraints),
        draw=draw,
        feasible_set=feasible,
        solution_hint=x_star,
        noise_covariance=sigma**2 * np.eye(dim),
        name="inline_nlp",
    )
    if feasible is None:
        from .geometry import ZeroProx
        from .problems import StochasticVIProblem

        vi = StochasticVIProblem(
            dim=dim,
            sample_map=sample_grad,
            draw=draw,
            mean_map=grad,
            f_part=ZeroProx(),
            solution_hint=x_star,
            noise_covariance=sigma**2 * np.eye(dim),
            name="inline_nlp",
        )
    else:
        vi = nlp_to_vi(nlp)

    manifold = None
    if x_star is not None and constraints:
        manifold = _manifold_from_active(nlp, x_star,
                                         float(table.get("chart_radius", 1.0)))
    return InstanceBundle(vi=vi, nlp=nlp, manifold=manifold, x_star=x_star)


def _manifold_from_active(nlp: NLPProblem, x_star, chart_radius):
    """Active manifold {g_i = 0, i active at x_star} with Gauss-Newton
    projection (no closed form for inline instances)."""
    from .asymptotics import active_set

    act = active_set(nlp, x_star)
    if not act:
        dim = nlp.dim
        return Manifold(
            defining_map=lambda x: np.zeros(np.asarray(x).shape[:-1] + (0,)),
            jacobian=lambda x: np.zeros((0, dim)),
            ambient_dim=dim,
            codim=0,
            closed_form_projection=lambda x: np.asarray(x, dtype=float),
            distance_map=lambda x: np.zeros(np.asarray(x).shape[:-1]),
            chart_radius=np.inf,
            name="full_space",
        )

    def defining_map(x):
        return np.array([nlp.constraints[i].value(x) for i in act])

    def jacobian(x):
        return nlp.constraint_grads(x, act)

    return Manifold(
        defining_map=defining_map,
        jacobian=jacobian,
        ambient_dim=nlp.dim,
        codim=len(act),
        chart_radius=chart_radius,
        name="inline_active_manifold",
    )


def resolve_instance(spec) -> tuple:
    """Returns (bundle, token) where token names a registry instance for
    process-parallel workers (None for inline instances)."""
    if isinstance(spec, str):
        return get_instance(spec), spec
    return build_inline_instance(spec), None
