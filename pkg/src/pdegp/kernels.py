"""Product Matern kernels, their analytic mixed derivatives, and covariance blocks.

The kernel on R^p is ``psi1 * prod_i k_nu(r_i)`` with scaled distances
``r_i = sqrt(2 nu) |x_i - x'_i| / psi2_i`` and ``k_nu`` the normalised
one-dimensional Matern correlation.  All derivatives of the correlation are
expressed through ``A_nu(r) = r^nu B_nu(r)`` (``B_nu`` the modified Bessel
function of the second kind), which satisfies

    d^k A_nu / dr^k = -r d^(k-1) A_(nu-1) / dr^(k-1) - (k-1) d^(k-2) A_(nu-1) / dr^(k-2)

and stays finite on [0, inf) as long as the shifted order is positive.  With
the smoothness convention ``nu = 2a + 0.1`` every derivative of per-coordinate
order up to ``2a`` is therefore well defined, including at coincident points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gamma as _gamma_fn
from scipy.special import kv as _bessel_kv

__all__ = [
    "MultiIndex",
    "MaternHyperparams",
    "CovarianceBlocks",
    "ConditioningError",
    "KernelDerivativeTable",
    "as_orders",
    "nu_for_order",
    "matern_base",
    "matern_derivative",
    "product_kernel_mixed_derivative",
    "assemble_blocks",
    "chol_jitter",
    "chol_logdet",
]

# Below this scaled distance the r -> 0 limit of each A_(nu-j) is used; the
# neglected correction enters only through terms carrying positive powers of r.
_SMALL_R = 1e-8
_JITTER_BASE = 1e-10
_JITTER_MAX = 1e-6


class ConditioningError(np.linalg.LinAlgError):
    """Cholesky kept failing after the jitter ladder was exhausted."""


def nu_for_order(a: int) -> float:
    """Smoothness for a kernel that must admit per-coordinate derivatives up to 2a."""
    return 2.0 * a + 0.1


@dataclass(frozen=True)
class MultiIndex:
    """Per-coordinate derivative orders ``alpha = (a_1, ..., a_p)``."""

    orders: tuple[int, ...]

    def __post_init__(self):
        orders = tuple(int(o) for o in self.orders)
        if any(o < 0 for o in orders):
            raise ValueError(f"derivative orders must be non-negative, got {orders}")
        object.__setattr__(self, "orders", orders)

    @property
    def total(self) -> int:
        return sum(self.orders)

    @property
    def max_order(self) -> int:
        return max(self.orders) if self.orders else 0

    @staticmethod
    def zero(p: int) -> "MultiIndex":
        return MultiIndex((0,) * p)

    def __len__(self) -> int:
        return len(self.orders)

    def __iter__(self):
        return iter(self.orders)


def as_orders(alpha, p: Optional[int] = None) -> tuple[int, ...]:
    """Normalise a MultiIndex / sequence / None into a tuple of orders."""
    if alpha is None:
        if p is None:
            raise ValueError("need p to build a zero multi-index")
        return (0,) * p
    if isinstance(alpha, MultiIndex):
        orders = alpha.orders
    else:
        orders = tuple(int(o) for o in alpha)
    if p is not None and len(orders) != p:
        raise ValueError(f"multi-index length {len(orders)} != input dimension {p}")
    if any(o < 0 for o in orders):
        raise ValueError(f"negative derivative order in {orders}")
    return orders


@dataclass(frozen=True)
class MaternHyperparams:
    """Output variance psi1, per-coordinate lengthscales psi2, smoothness nu."""

    psi1: float
    psi2: tuple[float, ...]
    nu: float

    def __post_init__(self):
        object.__setattr__(self, "psi1", float(self.psi1))
        object.__setattr__(self, "psi2", tuple(float(v) for v in self.psi2))
        object.__setattr__(self, "nu", float(self.nu))
        if not (self.psi1 > 0 and math.isfinite(self.psi1)):
            raise ValueError(f"psi1 must be positive, got {self.psi1}")
        if any(not (v > 0 and math.isfinite(v)) for v in self.psi2):
            raise ValueError(f"psi2 must be positive, got {self.psi2}")
        if not (self.nu > 0 and math.isfinite(self.nu)):
            raise ValueError(f"nu must be positive, got {self.nu}")

    @property
    def p(self) -> int:
        return len(self.psi2)

    @classmethod
    def for_order(cls, a: int, psi1: float, psi2: Sequence[float]) -> "MaternHyperparams":
        """Hyperparameters with nu pinned at 2a + 0.1 for max per-coordinate order a."""
        return cls(psi1, tuple(psi2), nu_for_order(a))


def _a_scaled(w: float, r: np.ndarray) -> np.ndarray:
    """A_w(r) = r^w B_w(r), continuously extended to A_w(0) = 2^(w-1) Gamma(w)."""
    if w <= 0:
        raise ValueError(f"A_w requires w > 0, got w={w}")
    out = np.empty_like(r)
    small = r < _SMALL_R
    if small.any():
        out[small] = 2.0 ** (w - 1.0) * _gamma_fn(w)
    if (~small).any():
        rs = r[~small]
        out[~small] = rs**w * _bessel_kv(w, rs)
    return out


def matern_base(r, nu: float):
    """Normalised 1-D Matern correlation k_nu(r) in the scaled-distance variable.

    ``k_nu(r) = 2^(1-nu)/Gamma(nu) * r^nu * B_nu(r)``, with ``k_nu(0) = 1``.
    """
    if nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    arr = np.asarray(r, dtype=float)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite distance passed to matern_base")
    if (arr < 0).any():
        raise ValueError("scaled distances must be non-negative")
    out = 2.0 ** (1.0 - nu) / _gamma_fn(nu) * _a_scaled(nu, np.atleast_1d(arr))
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def matern_derivative(r, nu: float, k: int):
    """k-th derivative of the 1-D Matern correlation with respect to scaled r.

    Evaluated through the A_nu recurrence, so the value is finite at r = 0 for
    every k below the kernel's smoothness.  ``k = 0`` reduces to
    :func:`matern_base`.
    """
    k = int(k)
    if k < 0:
        raise ValueError("derivative order must be non-negative")
    if k == 0:
        return matern_base(r, nu)
    if nu - k <= 0:
        raise ValueError(
            f"order k={k} exceeds the smoothness of a Matern kernel with nu={nu} "
            f"(needs k <= 2a with nu = 2a + 0.1)"
        )
    arr = np.asarray(r, dtype=float)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite distance passed to matern_derivative")
    if (arr < 0).any():
        raise ValueError("scaled distances must be non-negative")
    flat = np.atleast_1d(arr)

    cache: dict[tuple[int, int], np.ndarray] = {}

    def rec(order: int, shift: int) -> np.ndarray:
        key = (order, shift)
        if key not in cache:
            if order == 0:
                cache[key] = _a_scaled(nu - shift, flat)
            else:
                val = -flat * rec(order - 1, shift + 1)
                if order >= 2:
                    val = val - (order - 1) * rec(order - 2, shift + 1)
                cache[key] = val
        return cache[key]

    out = 2.0 ** (1.0 - nu) / _gamma_fn(nu) * rec(k, 0)
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


class KernelDerivativeTable:
    """Mixed-derivative matrices of one product Matern kernel on a pair grid.

    Caches the per-coordinate Bessel evaluations so that repeated operator
    terms over the same point sets reuse them across derivative orders.  All
    entries are ``d^(|a|+|a'|) K(x, x') / dx^a dx'^a'`` with the continuous
    sign extension at coincident coordinates (odd per-coordinate total order
    evaluates to zero there).
    """

    def __init__(self, x: np.ndarray, xp: np.ndarray, hp: MaternHyperparams):
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.xp = np.atleast_2d(np.asarray(xp, dtype=float))
        if not (np.isfinite(self.x).all() and np.isfinite(self.xp).all()):
            raise ValueError("non-finite points passed to kernel evaluation")
        self.hp = hp
        self.p = self.x.shape[1]
        if self.xp.shape[1] != self.p:
            raise ValueError("point sets have mismatched dimensions")
        if hp.p != self.p:
            raise ValueError("hyperparameter dimension does not match points")
        nu = hp.nu
        self._pref = 2.0 ** (1.0 - nu) / _gamma_fn(nu)
        self._scale = [math.sqrt(2.0 * nu) / hp.psi2[i] for i in range(self.p)]
        self._delta = [self.x[:, None, i] - self.xp[None, :, i] for i in range(self.p)]
        self._r = [np.abs(d) * self._scale[i] for i, d in enumerate(self._delta)]
        self._a_cache: dict[tuple[int, int], np.ndarray] = {}
        self._d_cache: dict[tuple[int, int, int], np.ndarray] = {}

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape[0], self.xp.shape[0]

    def _a(self, i: int, shift: int) -> np.ndarray:
        key = (i, shift)
        if key not in self._a_cache:
            w = self.hp.nu - shift
            if w <= 0:
                raise ValueError(
                    f"per-coordinate derivative order too high for nu={self.hp.nu}"
                )
            self._a_cache[key] = _a_scaled(w, self._r[i])
        return self._a_cache[key]

    def _d(self, i: int, k: int, shift: int) -> np.ndarray:
        key = (i, k, shift)
        if key not in self._d_cache:
            if k == 0:
                val = self._a(i, shift)
            else:
                val = -self._r[i] * self._d(i, k - 1, shift + 1)
                if k >= 2:
                    val = val - (k - 1) * self._d(i, k - 2, shift + 1)
            self._d_cache[key] = val
        return self._d_cache[key]

    def matrix(self, alpha=None, alpha_prime=None) -> np.ndarray:
        """Matrix of mixed partial derivatives, orders alpha in x, alpha' in x'."""
        a = as_orders(alpha, self.p)
        ap = as_orders(alpha_prime, self.p)
        out = np.full(self.shape, self.hp.psi1)
        for i in range(self.p):
            m = a[i] + ap[i]
            if m == 0:
                fac = self._pref * self._d(i, 0, 0)
            else:
                if self.hp.nu - m <= 0:
                    raise ValueError(
                        f"per-coordinate order {m} exceeds smoothness nu={self.hp.nu}"
                    )
                fac = self._pref * self._d(i, m, 0) * self._scale[i] ** m
                if ap[i] % 2 == 1:
                    fac = -fac
                if m % 2 == 1:
                    fac = fac * np.sign(self._delta[i])
            out = out * fac
        return out


def product_kernel_mixed_derivative(x, xp, hp: MaternHyperparams, alpha, alpha_prime) -> float:
    """Mixed derivative of the product kernel at a single point pair."""
    table = KernelDerivativeTable(
        np.asarray(x, dtype=float).reshape(1, -1),
        np.asarray(xp, dtype=float).reshape(1, -1),
        hp,
    )
    return float(table.matrix(alpha, alpha_prime)[0, 0])


def chol_jitter(mat: np.ndarray, scale: Optional[float] = None, name: str = "matrix"):
    """Lower Cholesky of ``mat + jitter*I`` with an escalating jitter ladder.

    Starts at 1e-10 of the diagonal scale and escalates tenfold up to 1e-6
    before giving up with a :class:`ConditioningError` naming the offending
    block and an eigenvalue-based conditioning estimate.
    """
    n = mat.shape[0]
    if scale is None:
        diag = np.abs(np.diag(mat))
        scale = float(np.mean(diag)) if diag.size and np.mean(diag) > 0 else 1.0
    jit = _JITTER_BASE * scale
    eye = np.eye(n)
    while True:
        try:
            factor = cho_factor(mat + jit * eye, lower=True)
            return factor, jit
        except np.linalg.LinAlgError:
            pass
        jit *= 10.0
        if jit > _JITTER_MAX * scale * (1.0 + 1e-12):
            try:
                ev = np.linalg.eigvalsh(mat)
                cond = f"eigenvalue range [{ev[0]:.3e}, {ev[-1]:.3e}]"
            except np.linalg.LinAlgError:
                cond = "eigenvalues unavailable"
            raise ConditioningError(
                f"Cholesky of {name} failed at maximum jitter "
                f"{_JITTER_MAX * scale:.3e}; {cond}"
            ) from None


def chol_logdet(factor) -> float:
    """log-determinant from a cho_factor result."""
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


@dataclass
class CovarianceBlocks:
    """Covariance blocks of (U(I), L U(I)) for a linear matrix operator L.

    ``C`` is block-diagonal across components (independent priors), ``m`` the
    conditional-mean map ``LK C^-1`` and ``K`` the conditional covariance
    ``LKL - LK C^-1 KL``.
    """

    C: np.ndarray
    LK: np.ndarray
    KL: np.ndarray
    LKL: np.ndarray
    m: np.ndarray
    K: np.ndarray
    n_points: int
    n_components: int
    jitter_c: float


def _op_rows(op) -> list[list]:
    rows = []
    for row in op.rows:
        rows.append(list(row))
    return rows


def assemble_blocks(op, points: np.ndarray, hp_per_component: Sequence[MaternHyperparams]) -> CovarianceBlocks:
    """Assemble C, LK, KL, LKL, m, K for one operator applied at every point.

    ``op`` provides ``rows``: per output row a list of terms carrying
    ``component``, ``alpha`` and ``weight``.  Component priors are independent,
    so ``C`` is block-diagonal and cross blocks appear only where two rows
    differentiate the same component.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    comps = len(hp_per_component)
    rows = _op_rows(op)
    n_rows = len(rows)

    tables = [KernelDerivativeTable(pts, pts, hp) for hp in hp_per_component]

    C = np.zeros((comps * n, comps * n))
    for k, table in enumerate(tables):
        C[k * n : (k + 1) * n, k * n : (k + 1) * n] = table.matrix(None, None)

    LK = np.zeros((n_rows * n, comps * n))
    for i, row in enumerate(rows):
        for term in row:
            k = term.component
            if k >= comps:
                raise ValueError(f"operator term targets component {k} of {comps}")
            block = tables[k].matrix(term.alpha, None) * term.weight
            LK[i * n : (i + 1) * n, k * n : (k + 1) * n] += block
    KL = LK.T.copy()

    LKL = np.zeros((n_rows * n, n_rows * n))
    for i, row_i in enumerate(rows):
        for j, row_j in enumerate(rows):
            if j < i:
                LKL[i * n : (i + 1) * n, j * n : (j + 1) * n] = LKL[
                    j * n : (j + 1) * n, i * n : (i + 1) * n
                ].T
                continue
            acc = None
            for t in row_i:
                for tp in row_j:
                    if t.component != tp.component:
                        continue
                    block = tables[t.component].matrix(t.alpha, tp.alpha) * (
                        t.weight * tp.weight
                    )
                    acc = block if acc is None else acc + block
            if acc is not None:
                LKL[i * n : (i + 1) * n, j * n : (j + 1) * n] = acc

    m = np.zeros_like(LK)
    jit_used = 0.0
    for k in range(comps):
        sl = slice(k * n, (k + 1) * n)
        factor, jit = chol_jitter(
            C[sl, sl], scale=hp_per_component[k].psi1, name=f"C of component {k}"
        )
        jit_used = max(jit_used, jit)
        m[:, sl] = cho_solve(factor, LK[:, sl].T).T

    K = LKL - m @ KL
    K = 0.5 * (K + K.T)
    return CovarianceBlocks(
        C=C, LK=LK, KL=KL, LKL=LKL, m=m, K=K,
        n_points=n, n_components=comps, jitter_c=jit_used,
    )
