"""MAP optimisation, normal (Laplace) approximation, and Hamiltonian Monte Carlo."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import norm

from .posterior import (
    PosteriorContext,
    PosteriorState,
    log_posterior_terms,
    pack_state,
    unpack_state,
    value_and_grad,
)

__all__ = [
    "MapResult",
    "LaplaceResult",
    "HmcResult",
    "map_optimize",
    "laplace_approx",
    "hmc_core",
    "hmc_sample",
    "coverage_eval",
]


@dataclass
class MapResult:
    state: PosteriorState
    log_posterior: float
    iterations: int
    converged: bool
    term_breakdown: dict
    grad_norm: float
    method: str


@dataclass
class LaplaceResult:
    mean: np.ndarray
    hessian: np.ndarray
    covariance: np.ndarray
    intervals: np.ndarray        # (dim, 2) at level 1 - alpha
    alpha: float
    theta_dim: int
    unreliable: bool
    warning: str = ""

    @property
    def theta_intervals(self) -> np.ndarray:
        return self.intervals[: self.theta_dim]

    @property
    def theta_half_widths(self) -> np.ndarray:
        iv = self.theta_intervals
        return 0.5 * (iv[:, 1] - iv[:, 0])


@dataclass
class HmcResult:
    samples: np.ndarray          # (draws, state_dim) in MAP coordinates
    acceptance_rate: float
    step_size: float
    n_leapfrog: int
    burn_in: int
    accept_trace: np.ndarray
    theta_dim: int

    def theta_samples(self) -> np.ndarray:
        return self.samples[:, : self.theta_dim]

    def theta_quantile_intervals(self, alpha: float = 0.05) -> np.ndarray:
        lo = np.quantile(self.theta_samples(), alpha / 2, axis=0)
        hi = np.quantile(self.theta_samples(), 1 - alpha / 2, axis=0)
        return np.stack([lo, hi], axis=1)


def _grad_tolerance_met(val: float, grad: np.ndarray, gtol: float) -> bool:
    return float(np.max(np.abs(grad))) <= gtol * (1.0 + abs(val))


def map_optimize(
    ctx: PosteriorContext,
    init: PosteriorState,
    method: str = "first_order_adaptive",
    max_iter: Optional[int] = None,
    learning_rate: float = 0.02,
    gtol: float = 1e-6,
) -> MapResult:
    """Maximise the log posterior from ``init``.

    ``first_order_adaptive`` is adaptive-moment gradient ascent (default 2500
    iterations, theta projected into its bounds after each step);
    ``quasi_newton`` is bounded limited-memory quasi-Newton (default 1500
    iterations).  The reported state is the best value seen, so the incumbent
    never decreases.
    """
    x0 = pack_state(ctx, init)
    val0, g0 = value_and_grad(ctx, x0)
    if not np.isfinite(val0):
        raise ValueError("log posterior is not finite at the initial state")
    bounds_theta = list(ctx.sys.theta_bounds)
    lo = np.array([b[0] for b in bounds_theta])
    hi = np.array([b[1] for b in bounds_theta])
    d = ctx.theta_dim

    best_x, best_val = x0.copy(), val0

    if method == "first_order_adaptive":
        iters = 2500 if max_iter is None else max_iter
        m = np.zeros_like(x0)
        v = np.zeros_like(x0)
        x = x0.copy()
        val, g = val0, g0
        n_done = 0
        converged = _grad_tolerance_met(val, g, gtol)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for it in range(1, iters + 1):
            if converged:
                break
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**it)
            vh = v / (1 - b2**it)
            x = x + learning_rate * mh / (np.sqrt(vh) + eps)
            x[:d] = np.clip(x[:d], lo, hi)
            val, g = value_and_grad(ctx, x)
            n_done = it
            if not np.isfinite(val):
                raise RuntimeError("log posterior diverged during adaptive ascent")
            if val > best_val:
                best_val, best_x = val, x.copy()
            converged = _grad_tolerance_met(val, g, gtol)
        iterations = n_done
    elif method == "quasi_newton":
        iters = 1500 if max_iter is None else max_iter
        tracker = {"best_val": best_val, "best_x": best_x, "evals": 0}

        def negfun(x):
            v_, g_ = value_and_grad(ctx, x)
            tracker["evals"] += 1
            if np.isfinite(v_) and v_ > tracker["best_val"]:
                tracker["best_val"] = v_
                tracker["best_x"] = x.copy()
            if not np.isfinite(v_):
                return 1e300, np.zeros_like(x)
            return -v_, -g_

        bounds = [(lo[i], hi[i]) for i in range(d)]
        bounds += [(None, None)] * (len(x0) - d)
        res = minimize(
            negfun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": iters, "maxfun": 10 * iters, "ftol": 1e-12, "gtol": 1e-10},
        )
        best_val = tracker["best_val"]
        best_x = tracker["best_x"]
        iterations = int(res.nit)
        _, g = value_and_grad(ctx, best_x)
        converged = _grad_tolerance_met(best_val, g, gtol) or bool(res.success)
    else:
        raise ValueError("method must be 'first_order_adaptive' or 'quasi_newton'")

    final_val, final_g = value_and_grad(ctx, best_x)
    state = unpack_state(ctx, best_x)
    return MapResult(
        state=state,
        log_posterior=final_val,
        iterations=iterations,
        converged=bool(converged or _grad_tolerance_met(final_val, final_g, gtol)),
        term_breakdown=log_posterior_terms(ctx, state),
        grad_norm=float(np.max(np.abs(final_g))),
        method=method,
    )


def laplace_approx(
    ctx: PosteriorContext,
    map_result: MapResult,
    alpha: float = 0.05,
    step: float = 1e-4,
) -> LaplaceResult:
    """Normal approximation N(map, H^-1) with per-coordinate credible intervals.

    H is minus the log-posterior Hessian, obtained by central finite
    differences of the analytic gradient with per-coordinate steps scaled by
    the coordinate magnitude, then symmetrised; a ridge ladder handles
    indefiniteness.  Emits a reliability warning when the implied posterior
    correlations saturate or H is ill-conditioned (the normal approximation is
    known to fail for strongly coupled states).
    """
    if not map_result.converged:
        warnings.warn("Laplace approximation at a MAP that did not formally converge")
    x0 = pack_state(ctx, map_result.state)
    dim = len(x0)
    H = np.empty((dim, dim))
    for i in range(dim):
        h = step * max(1.0, abs(x0[i]))
        xp = x0.copy(); xp[i] += h
        xm = x0.copy(); xm[i] -= h
        _, gp_ = value_and_grad(ctx, xp)
        _, gm_ = value_and_grad(ctx, xm)
        H[:, i] = -(gp_ - gm_) / (2 * h)
    H = 0.5 * (H + H.T)

    scale = float(np.mean(np.abs(np.diag(H)))) or 1.0
    ridge = 0.0
    factor = None
    for attempt in range(8):
        try:
            factor = cho_factor(H + ridge * np.eye(dim), lower=True)
            break
        except np.linalg.LinAlgError:
            ridge = 1e-10 * scale * 10.0**attempt
    if factor is None:
        raise np.linalg.LinAlgError("Hessian is singular beyond the ridge ladder")
    cov = cho_solve(factor, np.eye(dim))

    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    q = norm.ppf(1 - alpha / 2)
    intervals = np.stack([x0 - q * sd, x0 + q * sd], axis=1)

    denom = np.outer(sd, sd)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cov / denom, 0.0)
    np.fill_diagonal(corr, 0.0)
    max_corr = float(np.max(np.abs(corr))) if dim > 1 else 0.0
    cond = float(np.linalg.cond(H + ridge * np.eye(dim)))
    unreliable = max_corr > 0.999 or cond > 1e8
    message = ""
    if unreliable:
        message = (
            f"normal approximation may be unreliable: max |corr| = {max_corr:.4f}, "
            f"cond(H) = {cond:.2e}; posterior variances can be underestimated"
        )
        warnings.warn(message)
    return LaplaceResult(
        mean=x0, hessian=H, covariance=cov, intervals=intervals, alpha=alpha,
        theta_dim=ctx.theta_dim, unreliable=unreliable, warning=message,
    )


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo


class _BoxMap:
    """Logit map between a finite box and R^d, with log-Jacobian terms."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = lo
        self.width = hi - lo
        if np.any(~np.isfinite(self.width)) or np.any(self.width <= 0):
            raise ValueError("theta bounds must be finite with positive width")

    def to_unconstrained(self, theta: np.ndarray) -> np.ndarray:
        frac = np.clip((theta - self.lo) / self.width, 1e-12, 1 - 1e-12)
        return logit(frac)

    def to_theta(self, q: np.ndarray) -> np.ndarray:
        return self.lo + self.width * expit(q)

    def log_jac(self, q: np.ndarray) -> float:
        e = expit(q)
        return float(np.sum(np.log(self.width) + np.log(e) + np.log1p(-e)))

    def dtheta_dq(self, q: np.ndarray) -> np.ndarray:
        e = expit(q)
        return self.width * e * (1 - e)

    def dlogjac_dq(self, q: np.ndarray) -> np.ndarray:
        return 1.0 - 2.0 * expit(q)


def hmc_core(
    logp_and_grad: Callable[[np.ndarray], tuple],
    x0: np.ndarray,
    n_samples: int,
    burn_in: int,
    n_leapfrog: int,
    step_size: float,
    seed: int,
    target_low: float = 0.6,
    target_high: float = 0.9,
    adapt_window: int = 100,
) -> dict:
    """Plain HMC: identity mass, fixed leapfrog count, burn-in step tuning.

    The step size is multiplied by 1.1 / 0.9 whenever the acceptance rate over
    the last ``adapt_window`` burn-in iterations leaves [0.6, 0.9], then frozen.
    Deterministic given the seed.
    """
    if step_size <= 0:
        raise ValueError("step size must be positive")
    if n_leapfrog < 1:
        raise ValueError("need at least one leapfrog step")
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float).copy()
    val, grad = logp_and_grad(x)
    if not np.isfinite(val):
        raise ValueError("HMC started at a state with non-finite density")

    total = burn_in + n_samples
    samples = np.empty((n_samples, len(x)))
    accept_trace = np.zeros(total, dtype=bool)
    eps = step_size
    window: list[bool] = []

    for it in range(total):
        p0 = rng.standard_normal(len(x))
        xq = x.copy()
        g = grad
        # leapfrog with potential U = -logp, so dU/dq = -grad
        pq = p0 + 0.5 * eps * g
        bad = False
        v_new = val
        for step in range(n_leapfrog):
            xq = xq + eps * pq
            v_new, g = logp_and_grad(xq)
            if not np.isfinite(v_new):
                bad = True
                break
            if step < n_leapfrog - 1:
                pq = pq + eps * g
        if not bad:
            pq = pq + 0.5 * eps * g
            h0 = -val + 0.5 * float(p0 @ p0)
            h1 = -v_new + 0.5 * float(pq @ pq)
            accept = math.log(rng.uniform()) < min(0.0, h0 - h1)
        else:
            accept = False
        if accept:
            x, val, grad = xq, v_new, g
        accept_trace[it] = accept

        if it < burn_in:
            window.append(accept)
            if len(window) >= adapt_window:
                rate = float(np.mean(window[-adapt_window:]))
                if rate > target_high:
                    eps *= 1.1
                elif rate < target_low:
                    eps *= 0.9
                window = []
        else:
            samples[it - burn_in] = x
            done = it - burn_in + 1
            if done in (200, 500) and accept_trace[burn_in:it + 1].mean() < 0.1:
                raise RuntimeError(
                    "HMC acceptance collapsed below 10% after burn-in; re-tune the "
                    "step size (smaller step_size or more burn-in)"
                )

    post = accept_trace[burn_in:]
    rate = float(post.mean()) if len(post) else 0.0
    if len(post) and rate < 0.1:
        raise RuntimeError(
            "HMC acceptance stayed below 10% after burn-in; re-tune the step size"
        )
    return {
        "samples": samples,
        "acceptance_rate": rate,
        "step_size": eps,
        "accept_trace": accept_trace,
    }


def hmc_sample(
    ctx: PosteriorContext,
    init: PosteriorState,
    n_samples: int = 20000,
    burn_in: int = 2000,
    n_leapfrog: int = 200,
    step_size: float = 0.01,
    seed: int = 0,
) -> HmcResult:
    """Posterior HMC in unconstrained coordinates (theta mapped by a logit box).

    The logit Jacobian is part of the sampled density, so the returned draws
    (transformed back to plain theta) target exactly the MAP-coordinate
    posterior.  Initialise from the MAP estimate.
    """
    lo = np.array([b[0] for b in ctx.sys.theta_bounds])
    hi = np.array([b[1] for b in ctx.sys.theta_bounds])
    box = _BoxMap(lo, hi)
    d = ctx.theta_dim

    def logp_q(q):
        x = q.copy()
        x[:d] = box.to_theta(q[:d])
        val, grad = value_and_grad(ctx, x)
        if not np.isfinite(val):
            return val, np.zeros_like(q)
        val = val + box.log_jac(q[:d])
        gq = grad.copy()
        gq[:d] = grad[:d] * box.dtheta_dq(q[:d]) + box.dlogjac_dq(q[:d])
        return val, gq

    x0 = pack_state(ctx, init)
    q0 = x0.copy()
    q0[:d] = box.to_unconstrained(x0[:d])
    out = hmc_core(
        logp_q, q0, n_samples=n_samples, burn_in=burn_in,
        n_leapfrog=n_leapfrog, step_size=step_size, seed=seed,
    )
    samples = out["samples"]
    samples[:, :d] = box.to_theta(samples[:, :d])
    return HmcResult(
        samples=samples,
        acceptance_rate=out["acceptance_rate"],
        step_size=out["step_size"],
        n_leapfrog=n_leapfrog,
        burn_in=burn_in,
        accept_trace=out["accept_trace"],
        theta_dim=d,
    )


def coverage_eval(true_theta: Sequence[float], results: Sequence) -> np.ndarray:
    """Fraction of replicates whose 95% interval contains each true parameter.

    Accepts LaplaceResult (normal intervals) and HmcResult (sample quantiles).
    """
    if len(results) == 0:
        raise ValueError("need at least one result")
    truth = np.asarray(true_theta, dtype=float)
    hits = np.zeros(len(truth))
    for res in results:
        if isinstance(res, LaplaceResult):
            iv = res.theta_intervals
        elif isinstance(res, HmcResult):
            iv = res.theta_quantile_intervals()
        else:
            raise TypeError(f"unsupported result type {type(res)!r}")
        hits += (iv[:, 0] <= truth) & (truth <= iv[:, 1])
    return hits / len(results)
