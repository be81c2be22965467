"""Per-component GP priors: marginal-likelihood training, KL expansion, prediction.

Hyperparameters are trained once from data and then frozen for posterior
inference (modularization).  The constant mean and output variance are
profiled out analytically, so the optimizer only sees log lengthscales and a
bounded noise-to-signal ratio.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import expit, logit

from .kernels import (
    KernelDerivativeTable,
    MaternHyperparams,
    chol_jitter,
    chol_logdet,
)
from .pde import PdeSystem

__all__ = [
    "GpComponentModel",
    "train_hyperparams",
    "init_augmented_components",
    "kl_decompose",
    "predict",
    "save_models",
    "load_models",
    "NOISE_RATIO_FLOOR",
]

# sigma_e^2 is confined to [1e-6 psi1, psi1]; the floor doubles as the nugget.
NOISE_RATIO_FLOOR = 1e-6
_TRAIN_POINT_CAP = 256


@dataclass(frozen=True)
class GpComponentModel:
    """Constant-mean product-Matern prior for one PDE component."""

    mu: float
    hp: MaternHyperparams
    eigen_values: Optional[np.ndarray] = None   # full spectrum, clamped, descending
    eigen_vectors: Optional[np.ndarray] = None  # (n, n) orthonormal columns
    M: Optional[int] = None                     # truncation rank

    @property
    def has_eigen(self) -> bool:
        return self.eigen_values is not None

    def basis(self) -> np.ndarray:
        """KL map B with u(I) = mu + B z, columns scaled by sqrt(eigenvalue)."""
        if not self.has_eigen:
            raise ValueError("component model has no eigendecomposition yet")
        lam = self.eigen_values[: self.M]
        return self.eigen_vectors[:, : self.M] * np.sqrt(lam)


def _noise_ratio(w: float) -> float:
    return NOISE_RATIO_FLOOR + (1.0 - NOISE_RATIO_FLOOR) * expit(w)


def _noise_ratio_grad(w: float) -> float:
    e = expit(w)
    return (1.0 - NOISE_RATIO_FLOOR) * e * (1.0 - e)


def _noise_ratio_inv(t: float) -> float:
    frac = (t - NOISE_RATIO_FLOOR) / (1.0 - NOISE_RATIO_FLOOR)
    return float(logit(np.clip(frac, 1e-12, 1.0 - 1e-12)))


class _MarginalLikelihood:
    """Profiled negative log marginal likelihood and its analytic gradient.

    Profiles the constant mean (GLS) and the output variance (closed form),
    leaving log lengthscales and optionally the logit noise ratio.  Gradients
    use the envelope theorem, so only the correlation derivative enters.
    """

    def __init__(self, x, y, nu, fixed_noise_ratio=None):
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.y = np.asarray(y, dtype=float)
        self.n, self.p = self.x.shape
        self.nu = nu
        self.fixed_noise_ratio = fixed_noise_ratio
        self.absdiff = [
            np.abs(self.x[:, None, i] - self.x[None, :, i]) for i in range(self.p)
        ]
        self._pref = 2.0 ** (1.0 - nu) / math.gamma(nu)

    def _factors(self, psi2):
        from .kernels import _a_scaled  # shared Bessel evaluation path

        ks, gs = [], []
        for i in range(self.p):
            r = self.absdiff[i] * (math.sqrt(2.0 * self.nu) / psi2[i])
            ks.append(self._pref * _a_scaled(self.nu, r))
            # d k/d log psi2 = r^2 A_(nu-1)(r) * pref  (via dk/dr = -pref r A_(nu-1))
            gs.append(self._pref * r * r * _a_scaled(self.nu - 1.0, r))
        return ks, gs

    def value_and_grad(self, v):
        psi2 = np.exp(v[: self.p])
        if self.fixed_noise_ratio is None:
            t = _noise_ratio(v[self.p])
        else:
            t = self.fixed_noise_ratio
        try:
            ks, gs = self._factors(psi2)
            R = ks[0].copy()
            for k in ks[1:]:
                R *= k
            Rt = R + t * np.eye(self.n)
            factor = cho_factor(Rt, lower=True)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(v)
        ones = np.ones(self.n)
        Ri_one = cho_solve(factor, ones)
        Ri_y = cho_solve(factor, self.y)
        mu = float(ones @ Ri_y / (ones @ Ri_one))
        resid = self.y - mu
        alpha = Ri_y - mu * Ri_one
        quad = float(resid @ alpha)
        if quad <= 0:
            return np.inf, np.zeros_like(v)
        psi1 = quad / self.n
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        nll = 0.5 * (self.n * math.log(psi1) + logdet + self.n)

        grad = np.zeros_like(v)
        Rinv = cho_solve(factor, np.eye(self.n))
        for i in range(self.p):
            dR = gs[i]
            for j in range(self.p):
                if j != i:
                    dR = dR * ks[j]
            grad[i] = 0.5 * (np.sum(Rinv * dR) - (alpha @ dR @ alpha) / psi1)
        if self.fixed_noise_ratio is None:
            dt = _noise_ratio_grad(v[self.p])
            grad[self.p] = 0.5 * dt * (np.trace(Rinv) - (alpha @ alpha) / psi1)
        return nll, grad

    def finish(self, v):
        """Profiled (mu, psi1, sigma_e^2) at the optimum v."""
        psi2 = np.exp(v[: self.p])
        t = self.fixed_noise_ratio if self.fixed_noise_ratio is not None else _noise_ratio(v[self.p])
        ks, _ = self._factors(psi2)
        R = ks[0].copy()
        for k in ks[1:]:
            R *= k
        factor = cho_factor(R + t * np.eye(self.n), lower=True)
        ones = np.ones(self.n)
        Ri_one = cho_solve(factor, ones)
        Ri_y = cho_solve(factor, self.y)
        mu = float(ones @ Ri_y / (ones @ Ri_one))
        resid = self.y - mu
        psi1 = float(resid @ (Ri_y - mu * Ri_one)) / self.n
        return mu, psi1, psi2, t


def train_hyperparams(
    x: np.ndarray,
    y: np.ndarray,
    nu: float,
    domain: Sequence[Sequence[float]],
    fixed_noise_ratio: Optional[float] = None,
    n_starts: int = 8,
    max_points: int = _TRAIN_POINT_CAP,
    seed: int = 0,
):
    """Maximise the Gaussian marginal likelihood for one component.

    Returns ``(model, sigma_e2_init)`` with the hyperparameters frozen
    afterwards.  Multi-start L-BFGS over log-spaced lengthscale fractions of
    the domain widths; the noise variance lives in [1e-6 psi1, psi1] through a
    logit reparameterization unless ``fixed_noise_ratio`` pins it (used for
    noise-free synthetic data).

    Degenerate constant data yields a flat model with a warning instead of an
    optimizer run.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) < 3:
        raise ValueError("need at least 3 observations to train hyperparameters")
    dom = np.asarray(domain, dtype=float)
    widths = dom[:, 1] - dom[:, 0]
    widths[widths == 0] = 1.0

    if np.ptp(y) == 0.0:
        warnings.warn("constant observations: returning a flat GP model")
        psi1 = max((1e-4 * (1.0 + abs(float(y[0])))) ** 2, 1e-12)
        hp = MaternHyperparams(psi1, tuple(widths), nu)
        return GpComponentModel(mu=float(y[0]), hp=hp), NOISE_RATIO_FLOOR * psi1

    if len(y) > max_points:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(y), size=max_points, replace=False)
        x, y = x[keep], y[keep]

    ml = _MarginalLikelihood(x, y, nu, fixed_noise_ratio)
    if fixed_noise_ratio is None:
        fracs = np.geomspace(0.05, 2.0, max(1, n_starts // 2))
        starts = [
            np.concatenate([np.log(f * widths), [_noise_ratio_inv(t0)]])
            for f in fracs
            for t0 in (1e-2, 1e-4)
        ]
    else:
        fracs = np.geomspace(0.05, 2.0, n_starts)
        starts = [np.log(f * widths) for f in fracs]

    best = None
    start_values = []
    for v0 in starts[:n_starts]:
        val0, _ = ml.value_and_grad(v0)
        start_values.append(val0)
        try:
            res = minimize(
                ml.value_and_grad, v0, jac=True, method="L-BFGS-B",
                options={"maxiter": 200},
            )
        except (np.linalg.LinAlgError, ValueError):
            continue
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise RuntimeError("hyperparameter optimisation failed from every start")
    finite_starts = [s for s in start_values if np.isfinite(s)]
    if finite_starts and best.fun > min(finite_starts) + 1e-9:
        # should not happen: the optimum can never be worse than a start
        raise RuntimeError("optimizer returned a value above its starting point")

    mu, psi1, psi2, t = ml.finish(best.x)
    psi1 = max(psi1, 1e-300)
    hp = MaternHyperparams(psi1, tuple(psi2), nu)
    sigma_e2 = float(np.clip(t, NOISE_RATIO_FLOOR, 1.0)) * psi1
    return GpComponentModel(mu=mu, hp=hp), sigma_e2


def conditional_mean(model: GpComponentModel, x_data, y_data, sigma_e2, x_new):
    """Posterior mean of the component at x_new given noisy data."""
    x_data = np.atleast_2d(np.asarray(x_data, dtype=float))
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    K_dd = KernelDerivativeTable(x_data, x_data, model.hp).matrix(None, None)
    K_nd = KernelDerivativeTable(x_new, x_data, model.hp).matrix(None, None)
    factor = cho_factor(K_dd + max(sigma_e2, NOISE_RATIO_FLOOR * model.hp.psi1) * np.eye(len(x_data)), lower=True)
    return model.mu + K_nd @ cho_solve(factor, np.asarray(y_data, float) - model.mu)


def init_augmented_components(
    models: dict,
    data: dict,
    sys: PdeSystem,
    I_pts: np.ndarray,
    seed: int = 0,
):
    """Fill in GP models for derived and missing components.

    ``models``/``data`` map observed component indices to trained models and
    ``(x, y, sigma_e2)`` triples.  Chain components get synthetic data from the
    derivative of their source's posterior mean on I, then their own
    hyperparameter fit with the noise pinned at the nugget floor; fully missing
    components copy their donor's hyperparameters bitwise.

    Returns ``(model_list, u_init)`` with ``u_init`` of shape (l, |I|) holding
    the initial state values for every component.
    """
    I_pts = np.atleast_2d(np.asarray(I_pts, dtype=float))
    n = len(I_pts)
    l = sys.l
    out_models: list[Optional[GpComponentModel]] = [None] * l
    u_init = np.zeros((l, n))
    u_on_I: dict[int, np.ndarray] = {}

    for c in sys.observed_components:
        if c not in models:
            raise ValueError(f"missing trained model for observed component {c}")
        model = models[c]
        x, y, s2 = data[c]
        u_on_I[c] = conditional_mean(model, x, y, s2, I_pts)
        out_models[c] = model
        u_init[c] = u_on_I[c]

    remaining = [k for k in range(l) if out_models[k] is None]
    progress = True
    while remaining and progress:
        progress = False
        for k in list(remaining):
            chain = sys.chain_for(k)
            if chain is not None and chain.source in u_on_I:
                src_model = out_models[chain.source]
                table = KernelDerivativeTable(I_pts, I_pts, src_model.hp)
                C = table.matrix(None, None)
                factor, _ = chol_jitter(C, scale=src_model.hp.psi1, name=f"C of component {chain.source}")
                coeff = cho_solve(factor, u_on_I[chain.source] - src_model.mu)
                synth = np.zeros(n)
                for alpha, w in chain.terms:
                    synth += w * (table.matrix(alpha, None) @ coeff)
                model, _ = train_hyperparams(
                    I_pts, synth, nu=sys.nu_for_component(k), domain=sys.domain,
                    fixed_noise_ratio=NOISE_RATIO_FLOOR, seed=seed + k,
                )
                out_models[k] = model
                u_on_I[k] = synth
                u_init[k] = synth
                remaining.remove(k)
                progress = True
    for k in list(remaining):
        donor = sys.donor_for(k)
        if donor is None or out_models[donor] is None:
            raise ValueError(
                f"component {k} is neither observed, derivable by a chain, nor has a donor"
            )
        donor_model = out_models[donor]
        out_models[k] = replace(donor_model)
        u_init[k] = donor_model.mu
        remaining.remove(k)
    return out_models, u_init


def kl_decompose(C: np.ndarray, threshold: float = 0.9999):
    """Eigendecomposition of a (post-jitter) prior covariance block.

    Negative eigenvalues are clamped to zero; M is the smallest rank whose
    cumulative spectrum reaches the threshold fraction of the total.
    """
    C = 0.5 * (C + C.T)
    try:
        vals, vecs = np.linalg.eigh(C)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("eigendecomposition of prior covariance failed") from exc
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    vals[vals < 0] = 0.0
    total = vals.sum()
    if total <= 0:
        return vals, vecs, 1
    cum = np.cumsum(vals) / total
    M = int(np.searchsorted(cum, threshold - 1e-15) + 1)
    M = min(M, len(vals))
    return vals, vecs, M


def attach_eigen(model: GpComponentModel, I_pts: np.ndarray, threshold: float = 0.9999,
                 jitter: Optional[float] = None) -> GpComponentModel:
    """Compute and attach the KL decomposition of this component's C(I, I)."""
    C = KernelDerivativeTable(I_pts, I_pts, model.hp).matrix(None, None)
    jit = jitter if jitter is not None else 1e-10 * model.hp.psi1
    vals, vecs, M = kl_decompose(C + jit * np.eye(len(C)), threshold)
    return replace(model, eigen_values=vals, eigen_vectors=vecs, M=M)


def predict(model: GpComponentModel, I_pts, u_I, x_new, domain=None):
    """Conditional mean and pointwise variance at new points given u(I).

    Returns ``(mean, variance, outside)`` where ``outside`` flags points that
    fell outside the domain box (still computed, with a warning).
    """
    I_pts = np.atleast_2d(np.asarray(I_pts, dtype=float))
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    u_I = np.asarray(u_I, dtype=float)
    if len(u_I) != len(I_pts):
        raise ValueError("u_I length does not match I")
    outside = np.zeros(len(x_new), dtype=bool)
    if domain is not None:
        dom = np.asarray(domain, dtype=float)
        tol = 1e-12
        for i in range(dom.shape[0]):
            outside |= (x_new[:, i] < dom[i, 0] - tol) | (x_new[:, i] > dom[i, 1] + tol)
        if outside.any():
            warnings.warn(f"{int(outside.sum())} prediction points outside the domain box")
    C = KernelDerivativeTable(I_pts, I_pts, model.hp).matrix(None, None)
    factor, _ = chol_jitter(C, scale=model.hp.psi1, name="C(I,I) for prediction")
    K_star = KernelDerivativeTable(x_new, I_pts, model.hp).matrix(None, None)
    coeff = cho_solve(factor, u_I - model.mu)
    mean = model.mu + K_star @ coeff
    half = cho_solve(factor, K_star.T)
    var = model.hp.psi1 - np.einsum("ij,ji->i", K_star, half)
    return mean, np.maximum(var, 0.0), outside


# ---------------------------------------------------------------------------
# Serialization: hyperparameters travel, eigenvectors are rebuilt from I


def _points_checksum(I_pts: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(I_pts, dtype=np.float64).tobytes()).hexdigest()


def save_models(path, models: Sequence[GpComponentModel], I_pts: np.ndarray) -> None:
    payload = {
        "format_version": 1,
        "i_checksum": _points_checksum(I_pts),
        "components": [
            {
                "mu": m.mu,
                "psi1": m.hp.psi1,
                "psi2": list(m.hp.psi2),
                "nu": m.hp.nu,
                "M": m.M,
            }
            for m in models
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_models(path, I_pts: np.ndarray, threshold: float = 0.9999):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != 1:
        raise ValueError("unsupported model file version")
    if payload["i_checksum"] != _points_checksum(I_pts):
        raise ValueError("discretization set does not match the saved checksum")
    models = []
    for entry in payload["components"]:
        hp = MaternHyperparams(entry["psi1"], tuple(entry["psi2"]), entry["nu"])
        model = GpComponentModel(mu=entry["mu"], hp=hp)
        if entry["M"] is not None:
            model = attach_eigen(model, I_pts, threshold)
            if model.M != entry["M"]:
                model = replace(model, M=entry["M"])
        models.append(model)
    return models
