"""End-to-end fitting workflow shared by the CLI and the benchmark harness.

Order of stages: train component GPs from data, build the discretization set,
sample boundary sets, initialise augmented components, assemble the posterior,
run MAP (optionally Laplace).  The two-stage baseline lives here too because
it shares the first (GP) stage with the initializer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from . import design, gp, inference, posterior
from .design import PointSet, split_by_condition
from .kernels import KernelDerivativeTable, chol_jitter
from .pde import PdeSystem
from .posterior import ComponentData, PosteriorContext, PosteriorState

__all__ = [
    "FitOptions",
    "FitArtifacts",
    "fit_pigp",
    "two_stage_theta",
    "tsm_predict",
    "predict_components",
    "derive_seed",
]


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """Stable per-stage seed derived by hashing (master, stage, index)."""
    import hashlib

    digest = hashlib.sha256(f"{master}:{stage}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class FitOptions:
    n_discretization: Optional[int] = None
    seed: int = 0
    ibc: Optional[bool] = None              # None: on whenever conditions are declared
    n1: Optional[int] = None
    n2: Optional[int] = None
    map_method: str = "first_order_adaptive"
    map_iterations: Optional[int] = None
    learning_rate: float = 0.02
    beta: Optional[float] = None
    temper_scope: str = "joint"
    # tail fraction 1e-8, not the looser 1e-4: trained lengthscales are often
    # long relative to the domain and a 1e-4 tail then starves the basis
    kl_threshold: float = 1.0 - 1e-8
    run_laplace: bool = True
    fixed_sigma: Optional[dict] = None
    distance_space: str = "unit"
    theta_init: Optional[np.ndarray] = None


@dataclass
class FitArtifacts:
    sys: PdeSystem
    data: list
    design: PointSet
    i1: Optional[PointSet]
    i2: Optional[PointSet]
    models: list
    ctx: PosteriorContext
    u_init: np.ndarray
    theta_init: np.ndarray
    tsm_theta: Optional[np.ndarray]
    map_result: inference.MapResult
    laplace: Optional[inference.LaplaceResult]
    sigma_e2_init: dict
    timings: dict

    @property
    def theta_hat(self) -> np.ndarray:
        return self.map_result.state.theta

    def sigma_e2_hat(self) -> np.ndarray:
        return self.ctx.sigma_e2(self.map_result.state)

    def u_hat(self) -> np.ndarray:
        """MAP state values on the full state point set, one row per component."""
        return self.ctx.u_state(self.map_result.state)


def _merge_tau(data: Sequence[ComponentData]) -> np.ndarray:
    pts = [d.x for d in data]
    merged = pts[0]
    for extra in pts[1:]:
        scale = max(1.0, float(np.max(np.abs(merged))))
        for row in extra:
            if not np.any(np.all(np.abs(merged - row) <= 1e-9 * scale, axis=1)):
                merged = np.vstack([merged, row])
    return merged


def _default_boundary_counts(sys: PdeSystem, opts: FitOptions) -> tuple[int, int]:
    n1 = opts.n1
    n2 = opts.n2
    if n1 is None:
        n1 = (31 if sys.p == 2 else 50) if sys.dirichlet_conditions else 0
    if n2 is None:
        n2 = 4 * len(sys.operator_conditions)
    return n1, n2


def _project_z(ctx: PosteriorContext, u_init: np.ndarray) -> list:
    zs = []
    for k in range(ctx.sys.l):
        model = ctx.models[k]
        lam = model.eigen_values[: model.M]
        phi = model.eigen_vectors[:, : model.M]
        resid = u_init[k] - model.mu
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(lam > 0, (phi.T @ resid) / np.sqrt(np.maximum(lam, 1e-300)), 0.0)
        zs.append(z)
    return zs


def fit_pigp(sys: PdeSystem, data, options: Optional[FitOptions] = None) -> FitArtifacts:
    """Algorithm workflow: GP training, design, IBC sets, posterior, MAP, Laplace."""
    opts = options or FitOptions()
    if hasattr(data, "component_data"):
        data = data.component_data()
    data = sorted(data, key=lambda d: d.component)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    models_obs: dict[int, gp.GpComponentModel] = {}
    data_map: dict[int, tuple] = {}
    sigma_init: dict[int, float] = {}
    for cd in data:
        model, s2 = gp.train_hyperparams(
            cd.x, cd.y, nu=sys.nu_for_component(cd.component), domain=sys.domain,
            seed=derive_seed(opts.seed, "gp-train", cd.component),
        )
        models_obs[cd.component] = model
        data_map[cd.component] = (cd.x, cd.y, s2)
        sigma_init[cd.component] = s2
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tau = _merge_tau(data)
    n_i = opts.n_discretization or design.default_n_discretization(len(tau))
    I = design.build_discretization(
        tau, n_i, sys.domain, seed=derive_seed(opts.seed, "design"),
        distance_space=opts.distance_space,
    )
    use_ibc = opts.ibc if opts.ibc is not None else bool(sys.boundary_conditions)
    i1 = i2 = None
    if use_ibc and sys.boundary_conditions:
        n1, n2 = _default_boundary_counts(sys, opts)
        i1, i2 = design.sample_boundary_sets(sys, n1, n2)
    timings["design"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    state_pts = I.points
    if i2 is not None and len(i2):
        entries = split_by_condition(i2, sys.operator_conditions)
        if entries:
            state_pts = np.vstack([I.points] + [pts for _, pts in entries])
    models, u_init = gp.init_augmented_components(
        models_obs, data_map, sys, state_pts, seed=derive_seed(opts.seed, "gp-init"),
    )
    timings["init"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ctx = posterior.build_context(
        sys, I, models, data, i1=i1, i2=i2, beta=opts.beta,
        temper_scope=opts.temper_scope, kl_threshold=opts.kl_threshold,
        fixed_sigma=opts.fixed_sigma,
    )
    timings["context"] = time.perf_counter() - t0

    tsm_theta = None
    if opts.theta_init is not None:
        theta0 = np.asarray(opts.theta_init, dtype=float)
    else:
        try:
            tsm_theta = two_stage_theta(sys, models_obs, data_map, I.points)
            theta0 = tsm_theta.copy()
        except ValueError:
            theta0 = np.array([0.5 * (lo + hi) for lo, hi in sys.theta_bounds])
    lo = np.array([b[0] for b in sys.theta_bounds])
    hi = np.array([b[1] for b in sys.theta_bounds])
    margin = 1e-3 * (hi - lo)
    theta0 = np.clip(theta0, lo + margin, hi - margin)

    z0 = _project_z(ctx, u_init)
    if opts.fixed_sigma is None:
        s0 = np.array([
            posterior.noise_coord_from_sigma(sigma_init[ob.component], ob.psi1)
            for ob in ctx.obs
        ])
    else:
        s0 = np.zeros(len(ctx.obs))
    init_state = PosteriorState(theta=theta0, z=tuple(z0), log_sigma_e2=s0)

    t0 = time.perf_counter()
    map_result = inference.map_optimize(
        ctx, init_state, method=opts.map_method, max_iter=opts.map_iterations,
        learning_rate=opts.learning_rate,
    )
    timings["map"] = time.perf_counter() - t0

    laplace = None
    if opts.run_laplace:
        t0 = time.perf_counter()
        laplace = inference.laplace_approx(ctx, map_result)
        timings["laplace"] = time.perf_counter() - t0

    return FitArtifacts(
        sys=sys, data=data, design=I, i1=i1, i2=i2, models=models, ctx=ctx,
        u_init=u_init, theta_init=theta0, tsm_theta=tsm_theta,
        map_result=map_result, laplace=laplace, sigma_e2_init=sigma_init,
        timings=timings,
    )


def predict_components(ctx: PosteriorContext, state: PosteriorState, x_new: np.ndarray,
                       components: Optional[Sequence[int]] = None):
    """Off-grid conditional means and variances per component at the MAP state."""
    u = ctx.u_state(state)
    comps = list(components) if components is not None else list(range(ctx.sys.l))
    out = {}
    for k in comps:
        mean, var, _ = gp.predict(
            ctx.models[k], ctx.state_pts, u[k], x_new, domain=ctx.sys.domain
        )
        out[k] = (mean, var)
    return out


# ---------------------------------------------------------------------------
# Two-stage baseline (shares the trained first-stage GP with the initializer)


def _trace_to_observed(sys: PdeSystem, component: int):
    """Express a component as weighted derivatives of an observed component."""
    if component in sys.observed_components:
        return component, ((tuple([0] * sys.p), 1.0),)
    chain = sys.chain_for(component)
    if chain is not None and chain.source in sys.observed_components:
        return chain.source, tuple((a.orders, w) for a, w in chain.terms)
    raise ValueError(
        f"two-stage baseline needs component {component} observable; it is censored"
    )


def two_stage_theta(
    sys: PdeSystem,
    models: dict,
    data_map: dict,
    I_pts: np.ndarray,
) -> np.ndarray:
    """Two-stage estimate: GP derivatives on I plugged into the PDE, then least squares.

    Uses exactly the models trained for the main fit (shared first stage).
    Raises when a required component is censored.
    """
    I_pts = np.atleast_2d(np.asarray(I_pts, dtype=float))
    n = len(I_pts)

    # resolve every needed (observed source, alpha) derivative
    comp_expr = {}
    needed: set = set()
    for k in range(sys.l):
        src, terms = _trace_to_observed(sys, k)
        comp_expr[k] = (src, terms)
        for orders, _ in terms:
            needed.add((src, orders))
    for row in sys.operator.rows:
        for t in row:
            src, terms = comp_expr[t.component]
            for orders, _ in terms:
                combined = tuple(a + b for a, b in zip(t.alpha.orders, orders))
                needed.add((src, combined))

    deriv_vals: dict = {}
    weights_by_src: dict = {}
    for src in {s for s, _ in needed}:
        model = models[src]
        x, y, s2 = data_map[src]
        K_dd = KernelDerivativeTable(x, x, model.hp).matrix(None, None)
        from scipy.linalg import cho_factor, cho_solve

        factor = cho_factor(
            K_dd + max(s2, gp.NOISE_RATIO_FLOOR * model.hp.psi1) * np.eye(len(x)),
            lower=True,
        )
        weights_by_src[src] = cho_solve(factor, np.asarray(y, float) - model.mu)
        table = KernelDerivativeTable(I_pts, x, model.hp)
        for s_, orders in needed:
            if s_ != src:
                continue
            base = table.matrix(orders, None) @ weights_by_src[src]
            if sum(orders) == 0:
                base = base + model.mu
            deriv_vals[(src, orders)] = base

    def comp_values(k):
        src, terms = comp_expr[k]
        out = np.zeros(n)
        for orders, w in terms:
            out += w * deriv_vals[(src, orders)]
        return out

    U_hat = np.stack([comp_values(k) for k in range(sys.l)], axis=1)

    lhs = np.zeros((len(sys.operator.rows), n))
    for i, row in enumerate(sys.operator.rows):
        for t in row:
            src, terms = comp_expr[t.component]
            for orders, w in terms:
                combined = tuple(a + b for a, b in zip(t.alpha.orders, orders))
                lhs[i] += t.weight * w * deriv_vals[(src, combined)]

    def residual(theta):
        F = sys.f.eval(I_pts, U_hat, theta)
        return (lhs.T - F).ravel()

    def jac(theta):
        G = sys.f.grad_theta(I_pts, U_hat, theta)
        return -G.reshape(-1, sys.theta_dim)

    lo = np.array([b[0] for b in sys.theta_bounds])
    hi = np.array([b[1] for b in sys.theta_bounds])
    x0 = 0.5 * (lo + hi)
    res = least_squares(residual, x0, jac=jac, bounds=(lo, hi), method="trf")
    return res.x


def tsm_predict(models: dict, data_map: dict, x_new: np.ndarray, component: int) -> np.ndarray:
    """Stage-one kriging interpolation of an observed component at new points."""
    model = models[component]
    x, y, s2 = data_map[component]
    return gp.conditional_mean(model, x, y, s2, x_new)
