"""Declarative PDE systems: linear matrix operators, zeroth-order terms, boundaries.

A system couples a theta-free linear operator (rows of weighted partial
derivatives acting on named components) with a zeroth-order function f that
absorbs all nonlinearity and every unknown parameter.  Nonlinear scalar PDEs
enter through :func:`augment`, which introduces one component per remainder
derivative and chains derivatives at the lowest possible order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .kernels import MultiIndex, as_orders, nu_for_order

__all__ = [
    "OperatorTerm",
    "LinearOperatorSpec",
    "ZerothOrderFn",
    "DirichletCondition",
    "OperatorCondition",
    "ChainRelation",
    "PdeSystem",
    "AugmentationInput",
    "ComprehensiveOperator",
    "augment",
    "builtin_system",
    "comprehensive_extension",
    "validate_zeroth_order",
    "BUILTIN_NAMES",
]


@dataclass(frozen=True)
class OperatorTerm:
    """One weighted partial derivative acting on one component."""

    component: int
    alpha: MultiIndex
    weight: float = 1.0

    def __post_init__(self):
        if not isinstance(self.alpha, MultiIndex):
            object.__setattr__(self, "alpha", MultiIndex(tuple(self.alpha)))
        object.__setattr__(self, "weight", float(self.weight))
        if self.component < 0:
            raise ValueError("component index must be non-negative")


@dataclass(frozen=True)
class LinearOperatorSpec:
    """Rows of theta-free derivative terms over an l-component state."""

    rows: tuple[tuple[OperatorTerm, ...], ...]
    p: int
    l: int

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        for row in rows:
            for t in row:
                if t.component >= self.l:
                    raise ValueError(
                        f"term targets component {t.component}, system has l={self.l}"
                    )
                if len(t.alpha) != self.p:
                    raise ValueError("multi-index length does not match input dimension")

    def max_order_for(self, component: int) -> int:
        orders = [
            t.alpha.max_order for row in self.rows for t in row if t.component == component
        ]
        return max(orders, default=0)

    @property
    def max_order(self) -> int:
        return max((t.alpha.max_order for row in self.rows for t in row), default=0)


@dataclass(frozen=True)
class ZerothOrderFn:
    """Vectorised zeroth-order term with analytic Jacobians.

    ``eval(X, U, theta)`` maps points ``X`` (m, p), component values ``U``
    (m, l) and parameters ``theta`` (d,) to an (m, l) array of row values.
    ``grad_u`` returns (m, l, l) with entry [q, i, k] = d f_i / d u_k at point
    q, ``grad_theta`` returns (m, l, d).  Values may depend on u only, never on
    derivatives of u.
    """

    n_components: int
    theta_dim: int
    eval: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    grad_u: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    grad_theta: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def validate_zeroth_order(
    f: ZerothOrderFn,
    domain: Sequence[Sequence[float]],
    theta_bounds: Sequence[Sequence[float]],
    seed: int = 0,
    n_points: int = 12,
    tol: float = 1e-5,
) -> None:
    """Check the declared Jacobians of f against central finite differences.

    Raises ValueError on disagreement; run at system-construction time so a
    wrong hand-coded gradient fails loudly instead of corrupting inference.
    """
    rng = np.random.default_rng(seed)
    dom = np.asarray(domain, dtype=float)
    X = rng.uniform(dom[:, 0], dom[:, 1], size=(n_points, dom.shape[0]))
    U = rng.normal(0.0, 1.0, size=(n_points, f.n_components))
    tb = np.asarray(theta_bounds, dtype=float)
    mid = 0.5 * (tb[:, 0] + tb[:, 1])
    span = np.minimum(tb[:, 1] - tb[:, 0], 4.0)
    theta = mid + rng.uniform(-0.25, 0.25, size=f.theta_dim) * span

    gu = f.grad_u(X, U, theta)
    gth = f.grad_theta(X, U, theta)
    h = 1e-6
    for k in range(f.n_components):
        Up = U.copy(); Up[:, k] += h
        Um = U.copy(); Um[:, k] -= h
        fd = (f.eval(X, Up, theta) - f.eval(X, Um, theta)) / (2 * h)
        if not np.allclose(gu[:, :, k], fd, rtol=tol, atol=1e-6):
            raise ValueError(f"grad_u mismatch in component {k} of zeroth-order term")
    for j in range(f.theta_dim):
        tp = theta.copy(); tp[j] += h
        tm = theta.copy(); tm[j] -= h
        fd = (f.eval(X, U, tp) - f.eval(X, U, tm)) / (2 * h)
        if not np.allclose(gth[:, :, j], fd, rtol=tol, atol=1e-6):
            raise ValueError(f"grad_theta mismatch in parameter {j} of zeroth-order term")


@dataclass(frozen=True)
class DirichletCondition:
    """Known component values on a boundary region, sampled on demand."""

    component: int
    value: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[int], np.ndarray]
    contains: Callable[[np.ndarray], np.ndarray]
    weight: float = 1.0
    label: str = ""

    kind = "dirichlet"


@dataclass(frozen=True)
class OperatorCondition:
    """Non-Dirichlet condition: one operator row equated to a right-hand side b2.

    ``rhs_*`` follow the per-row conventions of :class:`ZerothOrderFn`
    restricted to a single output; ``None`` means b2 = 0.
    """

    terms: tuple[OperatorTerm, ...]
    sampler: Callable[[int], np.ndarray]
    contains: Callable[[np.ndarray], np.ndarray]
    weight: float = 1.0
    label: str = ""
    rhs_value: Optional[Callable] = None
    rhs_grad_u: Optional[Callable] = None
    rhs_grad_theta: Optional[Callable] = None

    kind = "operator"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))


@dataclass(frozen=True)
class ChainRelation:
    """Derived component identity: u_component = sum_w weight * D^alpha u_source."""

    component: int
    source: int
    terms: tuple[tuple[MultiIndex, float], ...]


@dataclass(frozen=True)
class PdeSystem:
    """Complete inverse-problem declaration for one (possibly augmented) PDE."""

    name: str
    domain: tuple[tuple[float, float], ...]
    operator: LinearOperatorSpec
    f: ZerothOrderFn
    theta_dim: int
    theta_bounds: tuple[tuple[float, float], ...]
    observed_components: tuple[int, ...]
    boundary_conditions: tuple = ()
    true_solution: Optional[Callable[[np.ndarray], np.ndarray]] = None
    theta0: Optional[tuple[float, ...]] = None
    chains: tuple[ChainRelation, ...] = ()
    donor_map: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.observed_components:
            raise ValueError("observed_components must be non-empty")
        if self.f.n_components != self.operator.l:
            raise ValueError("operator and zeroth-order term disagree on l")
        if self.f.theta_dim != self.theta_dim:
            raise ValueError("zeroth-order term disagrees on theta dimension")
        if len(self.domain) != self.operator.p:
            raise ValueError("domain box does not match input dimension")
        if len(self.theta_bounds) != self.theta_dim:
            raise ValueError("theta_bounds does not match theta_dim")
        object.__setattr__(self, "domain", tuple(tuple(map(float, b)) for b in self.domain))
        object.__setattr__(
            self, "theta_bounds", tuple(tuple(map(float, b)) for b in self.theta_bounds)
        )
        object.__setattr__(self, "observed_components", tuple(self.observed_components))

    @property
    def l(self) -> int:
        return self.operator.l

    @property
    def p(self) -> int:
        return self.operator.p

    @property
    def dirichlet_conditions(self) -> tuple[DirichletCondition, ...]:
        return tuple(c for c in self.boundary_conditions if c.kind == "dirichlet")

    @property
    def operator_conditions(self) -> tuple[OperatorCondition, ...]:
        return tuple(c for c in self.boundary_conditions if c.kind == "operator")

    @property
    def max_order(self) -> int:
        orders = [self.operator.max_order]
        orders += [
            t.alpha.max_order for c in self.operator_conditions for t in c.terms
        ]
        return max(orders)

    def component_order(self, k: int) -> int:
        """Max per-coordinate derivative order applied to component k anywhere.

        Components no operator term ever differentiates share the system-wide
        order, so their priors stay as smooth as the rest of the state.
        """
        orders = [self.operator.max_order_for(k)]
        orders += [
            t.alpha.max_order
            for c in self.operator_conditions
            for t in c.terms
            if t.component == k
        ]
        a = max(orders)
        return a if a > 0 else self.max_order

    def nu_for_component(self, k: int) -> float:
        return nu_for_order(self.component_order(k))

    def donor_for(self, k: int) -> Optional[int]:
        for comp, donor in self.donor_map:
            if comp == k:
                return donor
        return None

    def chain_for(self, k: int) -> Optional[ChainRelation]:
        for c in self.chains:
            if c.component == k:
                return c
        return None


# ---------------------------------------------------------------------------
# Boundary-region samplers on axis-aligned boxes


def _open_grid(lo: float, hi: float, m: int) -> np.ndarray:
    k = np.arange(1, m + 1)
    return lo + (hi - lo) * k / (m + 1)


def _closed_grid(lo: float, hi: float, m: int) -> np.ndarray:
    if m == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, m)


def _face_sampler(domain, axis: int, value: float, open_grid: bool):
    """Evenly spaced points on the box face {x_axis = value}."""
    dom = [tuple(map(float, b)) for b in domain]
    free = [i for i in range(len(dom)) if i != axis]

    def sampler(m: int) -> np.ndarray:
        if m <= 0:
            return np.zeros((0, len(dom)))
        g = max(1, math.ceil(m ** (1.0 / len(free))))
        axes = []
        for i in free:
            lo, hi = dom[i]
            axes.append(_open_grid(lo, hi, g) if open_grid else _closed_grid(lo, hi, g))
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m_.ravel() for m_ in mesh], axis=1)[:m]
        out = np.empty((pts.shape[0], len(dom)))
        out[:, axis] = value
        for j, i in enumerate(free):
            out[:, i] = pts[:, j]
        return out

    return sampler


def _face_contains(domain, axis: int, value: float):
    dom = np.asarray(domain, dtype=float)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(dom))))

    def contains(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        ok = np.abs(pts[:, axis] - value) <= tol
        for i in range(dom.shape[0]):
            ok &= (pts[:, i] >= dom[i, 0] - tol) & (pts[:, i] <= dom[i, 1] + tol)
        return ok

    return contains


def _dirichlet_face(domain, axis, value_at, component, value_fn, open_grid, weight, label):
    return DirichletCondition(
        component=component,
        value=value_fn,
        sampler=_face_sampler(domain, axis, value_at, open_grid),
        contains=_face_contains(domain, axis, value_at),
        weight=weight,
        label=label,
    )


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentationInput:
    """A scalar PDE in lead/remainder form: D^lead u = coupling(...) + f(x, u, theta).

    ``coupling`` consumes the augmented component values (u itself plus one
    component per remainder derivative, in declaration order); ``f`` consumes
    u alone.  Either may be None (zero).
    """

    name: str
    domain: tuple[tuple[float, float], ...]
    lead_alpha: MultiIndex
    remainder_alphas: tuple[MultiIndex, ...]
    theta_dim: int
    theta_bounds: tuple[tuple[float, float], ...]
    f: Optional[Callable] = None            # (X, u1, theta) -> (m,)
    f_grad_u: Optional[Callable] = None     # (X, u1, theta) -> (m,)
    f_grad_theta: Optional[Callable] = None  # (X, u1, theta) -> (m, d)
    coupling: Optional[Callable] = None          # (X, theta, U) -> (m,)
    coupling_grad_u: Optional[Callable] = None   # (X, theta, U) -> (m, l)
    coupling_grad_theta: Optional[Callable] = None  # (X, theta, U) -> (m, d)
    boundary_conditions: tuple = ()
    observed_components: tuple[int, ...] = (0,)
    true_solution: Optional[Callable] = None
    theta0: Optional[tuple[float, ...]] = None


def _build_chains(p: int, remainders: Sequence[MultiIndex]):
    """Pick one defining row per derived component at the lowest derivative order.

    Candidates chain through u or any lower-order remainder; the winner
    minimises the maximum per-coordinate order of the applied derivative, then
    its total order.
    """
    known: dict[tuple[int, ...], int] = {tuple([0] * p): 0}
    order = sorted(range(len(remainders)), key=lambda j: (remainders[j].total, j))
    rows: dict[int, tuple[int, MultiIndex]] = {}
    for j in order:
        alpha = remainders[j]
        comp = j + 1
        if alpha.orders in known:
            raise ValueError(f"remainder derivative {alpha.orders} declared twice")
        best = None
        for src_orders, src_comp in known.items():
            gamma = tuple(a - s for a, s in zip(alpha.orders, src_orders))
            if any(g < 0 for g in gamma) or all(g == 0 for g in gamma):
                continue
            key = (max(gamma), sum(gamma))
            if best is None or key < best[0]:
                best = (key, src_comp, gamma)
        if best is None:
            raise ValueError(
                f"remainder derivative {alpha.orders} is not reachable from the "
                "declared derivative set"
            )
        rows[comp] = (best[1], MultiIndex(best[2]))
        known[alpha.orders] = comp
    return [rows[c] for c in sorted(rows)]


def augment(spec: AugmentationInput) -> PdeSystem:
    """Build the equivalent multi-component system with a theta-free operator.

    One component is added per remainder derivative; derivative chains follow
    the lowest-order rule, nonlinearity and parameters move into the
    zeroth-order term.
    """
    p = len(spec.domain)
    lead = spec.lead_alpha if isinstance(spec.lead_alpha, MultiIndex) else MultiIndex(
        tuple(spec.lead_alpha)
    )
    remainders = tuple(
        a if isinstance(a, MultiIndex) else MultiIndex(tuple(a)) for a in spec.remainder_alphas
    )
    l = 1 + len(remainders)
    chain_defs = _build_chains(p, remainders)

    rows: list[tuple[OperatorTerm, ...]] = []
    for comp, (src, gamma) in enumerate(chain_defs, start=1):
        rows.append((OperatorTerm(src, gamma, 1.0),))
    rows.append((OperatorTerm(0, lead, 1.0),))
    operator = LinearOperatorSpec(rows=tuple(rows), p=p, l=l)

    d = spec.theta_dim

    def aug_eval(X, U, theta):
        m = X.shape[0]
        out = np.zeros((m, l))
        for j in range(l - 1):
            out[:, j] = U[:, j + 1]
        last = np.zeros(m)
        if spec.f is not None:
            last = last + spec.f(X, U[:, 0], theta)
        if spec.coupling is not None:
            last = last + spec.coupling(X, theta, U)
        out[:, l - 1] = last
        return out

    def aug_grad_u(X, U, theta):
        m = X.shape[0]
        out = np.zeros((m, l, l))
        for j in range(l - 1):
            out[:, j, j + 1] = 1.0
        if spec.f is not None:
            out[:, l - 1, 0] += spec.f_grad_u(X, U[:, 0], theta)
        if spec.coupling is not None:
            out[:, l - 1, :] += spec.coupling_grad_u(X, theta, U)
        return out

    def aug_grad_theta(X, U, theta):
        m = X.shape[0]
        out = np.zeros((m, l, d))
        if spec.f is not None:
            out[:, l - 1, :] += spec.f_grad_theta(X, U[:, 0], theta)
        if spec.coupling is not None:
            out[:, l - 1, :] += spec.coupling_grad_theta(X, theta, U)
        return out

    f = ZerothOrderFn(
        n_components=l, theta_dim=d,
        eval=aug_eval, grad_u=aug_grad_u, grad_theta=aug_grad_theta,
    )

    chains = tuple(
        ChainRelation(component=j + 1, source=0, terms=((remainders[j], 1.0),))
        for j in range(len(remainders))
    )

    true_solution = None
    if spec.true_solution is not None:
        scalar = spec.true_solution

        def true_solution(X):  # noqa: F811 - deliberate shadowing
            vals = np.full((X.shape[0], l), np.nan)
            vals[:, 0] = scalar(X)
            return vals

    sys = PdeSystem(
        name=spec.name,
        domain=spec.domain,
        operator=operator,
        f=f,
        theta_dim=d,
        theta_bounds=spec.theta_bounds,
        observed_components=spec.observed_components,
        boundary_conditions=tuple(spec.boundary_conditions),
        true_solution=true_solution,
        theta0=spec.theta0,
        chains=chains,
    )
    validate_zeroth_order(f, spec.domain, spec.theta_bounds)
    return sys


# ---------------------------------------------------------------------------
# Built-in systems

BUILTIN_NAMES = ("toy_disease", "lidar", "burgers", "brusselator")


def _toy_disease() -> PdeSystem:
    # du/dt + du/da = (t1 + t2 a + t3 a^2) u on [0,1]^2, x = (t, a)
    domain = ((0.0, 1.0), (0.0, 1.0))
    operator = LinearOperatorSpec(
        rows=((OperatorTerm(0, MultiIndex((1, 0)), 1.0), OperatorTerm(0, MultiIndex((0, 1)), 1.0)),),
        p=2, l=1,
    )

    def f_eval(X, U, theta):
        a = X[:, 1]
        poly = theta[0] + theta[1] * a + theta[2] * a * a
        return (poly * U[:, 0])[:, None]

    def f_grad_u(X, U, theta):
        a = X[:, 1]
        out = np.zeros((X.shape[0], 1, 1))
        out[:, 0, 0] = theta[0] + theta[1] * a + theta[2] * a * a
        return out

    def f_grad_theta(X, U, theta):
        a = X[:, 1]
        out = np.empty((X.shape[0], 1, 3))
        out[:, 0, 0] = U[:, 0]
        out[:, 0, 1] = a * U[:, 0]
        out[:, 0, 2] = a * a * U[:, 0]
        return out

    f = ZerothOrderFn(1, 3, f_eval, f_grad_u, f_grad_theta)

    def truth(X):
        return np.exp(X[:, 0] - X[:, 1] ** 2)[:, None]

    sys = PdeSystem(
        name="toy_disease",
        domain=domain,
        operator=operator,
        f=f,
        theta_dim=3,
        theta_bounds=((-10.0, 10.0),) * 3,
        observed_components=(0,),
        boundary_conditions=(),
        true_solution=truth,
        theta0=(1.0, -2.0, 0.0),
    )
    validate_zeroth_order(f, domain, sys.theta_bounds)
    return sys


def _lidar() -> PdeSystem:
    # du/dt = tD d2u/ds2 + tS du/ds + tA u, theta = (tD, tS, tA), x = (t, s)
    domain = ((0.0, 20.0), (0.0, 40.0))

    def coupling(X, theta, U):
        return theta[0] * U[:, 2] + theta[1] * U[:, 1] + theta[2] * U[:, 0]

    def coupling_grad_u(X, theta, U):
        out = np.zeros((X.shape[0], 3))
        out[:, 0] = theta[2]
        out[:, 1] = theta[1]
        out[:, 2] = theta[0]
        return out

    def coupling_grad_theta(X, theta, U):
        out = np.empty((X.shape[0], 3))
        out[:, 0] = U[:, 2]
        out[:, 1] = U[:, 1]
        out[:, 2] = U[:, 0]
        return out

    def initial_profile(pts):
        s = pts[:, 1]
        return 1.0 / (1.0 + 0.1 * (20.0 - s) ** 2)

    conditions = (
        _dirichlet_face(domain, 1, 0.0, 0, lambda pts: np.zeros(len(pts)), True, 3.0, "s=0"),
        _dirichlet_face(domain, 1, 40.0, 0, lambda pts: np.zeros(len(pts)), True, 3.0, "s=40"),
        _dirichlet_face(domain, 0, 0.0, 0, initial_profile, False, 4.0, "t=0"),
    )
    return augment(AugmentationInput(
        name="lidar",
        domain=domain,
        lead_alpha=MultiIndex((1, 0)),
        remainder_alphas=(MultiIndex((0, 1)), MultiIndex((0, 2))),
        theta_dim=3,
        theta_bounds=((-5.0, 5.0),) * 3,
        coupling=coupling,
        coupling_grad_u=coupling_grad_u,
        coupling_grad_theta=coupling_grad_theta,
        boundary_conditions=conditions,
        theta0=(1.0, 0.1, 0.1),
    ))


def _burgers() -> PdeSystem:
    # Viscous flow: du/dt = -t1 u du/ds + t2 d2u/ds2, theta0 = (1, 0.1), x = (t, s)
    domain = ((0.0, 0.1), (0.0, 1.0))

    def coupling(X, theta, U):
        return -theta[0] * U[:, 0] * U[:, 1] + theta[1] * U[:, 2]

    def coupling_grad_u(X, theta, U):
        out = np.zeros((X.shape[0], 3))
        out[:, 0] = -theta[0] * U[:, 1]
        out[:, 1] = -theta[0] * U[:, 0]
        out[:, 2] = theta[1]
        return out

    def coupling_grad_theta(X, theta, U):
        out = np.empty((X.shape[0], 2))
        out[:, 0] = -U[:, 0] * U[:, 1]
        out[:, 1] = U[:, 2]
        return out

    def initial_profile(pts):
        s = pts[:, 1]
        return np.exp(-100.0 * (s - 0.5) ** 2)

    conditions = (
        _dirichlet_face(domain, 1, 0.0, 0, lambda pts: np.zeros(len(pts)), True, 3.0, "s=0"),
        _dirichlet_face(domain, 1, 1.0, 0, lambda pts: np.zeros(len(pts)), True, 3.0, "s=1"),
        _dirichlet_face(domain, 0, 0.0, 0, initial_profile, False, 4.0, "t=0"),
    )
    return augment(AugmentationInput(
        name="burgers",
        domain=domain,
        lead_alpha=MultiIndex((1, 0)),
        remainder_alphas=(MultiIndex((0, 1)), MultiIndex((0, 2))),
        theta_dim=2,
        theta_bounds=((-5.0, 5.0), (-5.0, 5.0)),
        coupling=coupling,
        coupling_grad_u=coupling_grad_u,
        coupling_grad_theta=coupling_grad_theta,
        boundary_conditions=conditions,
        theta0=(1.0, 0.1),
    ))


def _brusselator(observed_components: tuple[int, ...] = (0, 2)) -> PdeSystem:
    # Reaction-diffusion pair on x = (t, s1, s2) in [0,1]^3 with components
    # (u, lap u, v, lap v); adiabatic Neumann walls, linear initial profiles.
    domain = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
    lap = (MultiIndex((0, 2, 0)), MultiIndex((0, 0, 2)))
    rows = (
        (OperatorTerm(0, lap[0], 1.0), OperatorTerm(0, lap[1], 1.0)),
        (OperatorTerm(2, lap[0], 1.0), OperatorTerm(2, lap[1], 1.0)),
        (OperatorTerm(0, MultiIndex((1, 0, 0)), 1.0),),
        (OperatorTerm(2, MultiIndex((1, 0, 0)), 1.0),),
    )
    operator = LinearOperatorSpec(rows=rows, p=3, l=4)

    def f_eval(X, U, theta):
        u, w, v, q = U[:, 0], U[:, 1], U[:, 2], U[:, 3]
        out = np.empty((X.shape[0], 4))
        out[:, 0] = w
        out[:, 1] = q
        out[:, 2] = theta[0] * w + theta[2] - (theta[1] + 1.0) * u + u * u * v
        out[:, 3] = theta[0] * q + theta[1] * u - u * u * v
        return out

    def f_grad_u(X, U, theta):
        u, v = U[:, 0], U[:, 2]
        out = np.zeros((X.shape[0], 4, 4))
        out[:, 0, 1] = 1.0
        out[:, 1, 3] = 1.0
        out[:, 2, 0] = -(theta[1] + 1.0) + 2.0 * u * v
        out[:, 2, 1] = theta[0]
        out[:, 2, 2] = u * u
        out[:, 3, 0] = theta[1] - 2.0 * u * v
        out[:, 3, 2] = -u * u
        out[:, 3, 3] = theta[0]
        return out

    def f_grad_theta(X, U, theta):
        u, w, v, q = U[:, 0], U[:, 1], U[:, 2], U[:, 3]
        out = np.zeros((X.shape[0], 4, 3))
        out[:, 2, 0] = w
        out[:, 2, 1] = -u
        out[:, 2, 2] = 1.0
        out[:, 3, 0] = q
        out[:, 3, 1] = u
        return out

    f = ZerothOrderFn(4, 3, f_eval, f_grad_u, f_grad_theta)

    dirichlet = (
        _dirichlet_face(domain, 0, 0.0, 0, lambda pts: 2.0 + 0.25 * pts[:, 2], False, 1.0, "t=0:u"),
        _dirichlet_face(domain, 0, 0.0, 2, lambda pts: 1.0 + 0.8 * pts[:, 1], False, 1.0, "t=0:v"),
    )
    neumann = []
    for axis, value, sign in ((1, 0.0, -1.0), (1, 1.0, 1.0), (2, 0.0, -1.0), (2, 1.0, 1.0)):
        grad_alpha = MultiIndex(tuple(1 if i == axis else 0 for i in range(3)))
        for comp, tag in ((0, "u"), (2, "v")):
            neumann.append(OperatorCondition(
                terms=(OperatorTerm(comp, grad_alpha, sign),),
                sampler=_face_sampler(domain, axis, value, True),
                contains=_face_contains(domain, axis, value),
                weight=1.0,
                label=f"s{axis}={value:g}:{tag}",
            ))

    sys = PdeSystem(
        name="brusselator",
        domain=domain,
        operator=operator,
        f=f,
        theta_dim=3,
        theta_bounds=((-0.5, 1.5), (-1.0, 6.0), (-1.0, 6.0)),
        observed_components=observed_components,
        boundary_conditions=dirichlet + tuple(neumann),
        theta0=(0.1, 2.0, 1.0),
        chains=(
            ChainRelation(1, 0, ((lap[0], 1.0), (lap[1], 1.0))),
            ChainRelation(3, 2, ((lap[0], 1.0), (lap[1], 1.0))),
        ),
        donor_map=((2, 0), (3, 1)),
    )
    validate_zeroth_order(f, domain, sys.theta_bounds)
    return sys


def builtin_system(name: str, observed_components: Optional[Sequence[int]] = None) -> PdeSystem:
    """One of the four packaged systems; optionally override what is observed."""
    builders = {
        "toy_disease": _toy_disease,
        "lidar": _lidar,
        "burgers": _burgers,
        "brusselator": _brusselator,
    }
    if name not in builders:
        raise ValueError(f"unknown system {name!r}; choose one of {BUILTIN_NAMES}")
    if name == "brusselator" and observed_components is not None:
        return _brusselator(tuple(observed_components))
    sys = builders[name]()
    if observed_components is not None:
        sys = replace(sys, observed_components=tuple(observed_components))
    return sys


# ---------------------------------------------------------------------------
# Comprehensive operator (interior rows + boundary-operator rows on I2)


@dataclass(frozen=True)
class BoundaryGroup:
    condition: OperatorCondition
    points: np.ndarray


@dataclass(frozen=True)
class ComprehensiveOperator:
    """Interior operator rows on I plus boundary-operator rows on I2."""

    sys: PdeSystem
    boundary: tuple[BoundaryGroup, ...]

    @property
    def boundary_points(self) -> np.ndarray:
        if not self.boundary:
            return np.zeros((0, self.sys.p))
        return np.vstack([g.points for g in self.boundary])

    @property
    def n_boundary_rows(self) -> int:
        return sum(len(g.points) for g in self.boundary)

    def row_count(self, n_interior: int) -> int:
        return self.sys.l * n_interior + self.n_boundary_rows


def comprehensive_extension(sys: PdeSystem, i2=None) -> ComprehensiveOperator:
    """Replace the PDE rows by boundary-operator rows on the given I2 points.

    ``i2`` may be empty/None, a raw (m, p) point array (points are matched to
    every declared non-Dirichlet condition containing them), or an explicit
    list of ``(condition, points)`` pairs.
    """
    groups: list[BoundaryGroup] = []
    if i2 is None:
        entries: list = []
    elif isinstance(i2, np.ndarray):
        conditions = sys.operator_conditions
        matched = np.zeros(len(i2), dtype=bool)
        entries = []
        for cond in conditions:
            mask = cond.contains(i2)
            if mask.any():
                entries.append((cond, np.atleast_2d(i2[mask])))
                matched |= mask
        if not matched.all():
            bad = np.atleast_2d(i2[~matched])[0]
            raise ValueError(
                f"I2 point {bad} does not lie on any declared non-Dirichlet region"
            )
    else:
        entries = list(i2)
    for cond, pts in entries:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if len(pts) == 0:
            continue
        if not np.all(cond.contains(pts)):
            bad = pts[~cond.contains(pts)][0]
            raise ValueError(f"I2 point {bad} is outside region {cond.label!r}")
        groups.append(BoundaryGroup(condition=cond, points=pts))
    return ComprehensiveOperator(sys=sys, boundary=tuple(groups))
