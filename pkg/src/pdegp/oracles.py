"""Finite-difference reference solvers used only to make synthetic data and test oracles.

The inference path never touches this module: it is imported lazily by the
benchmark code and by tests, which is asserted by the quarantine test in the
suite.  Truth is produced on fine grids, validated by grid-doubling, and
interpolated to observation points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

__all__ = [
    "GridSolution",
    "reference_solve",
    "convergence_check",
    "clear_cache",
]

_CACHE: dict = {}


@dataclass
class GridSolution:
    """Gridded reference solution with interpolation helpers."""

    name: str
    axes: tuple
    values: dict  # component index -> ndarray over meshgrid(indexing="ij")

    def interp(self, pts: np.ndarray, component: int = 0, method: str = "linear") -> np.ndarray:
        # linear on the storage grid: the grids are fine enough that the
        # interpolation error sits orders of magnitude below the data noise
        interp = RegularGridInterpolator(self.axes, self.values[component], method=method)
        return interp(np.atleast_2d(pts))

    def derivative_values(self, pts: np.ndarray, component: int, alpha) -> np.ndarray:
        """Grid finite-difference derivative of the stored field, interpolated linearly."""
        field = self.values[component]
        for axis, order in enumerate(alpha):
            for _ in range(int(order)):
                field = np.gradient(field, self.axes[axis], axis=axis, edge_order=2)
        interp = RegularGridInterpolator(self.axes, field, method="linear")
        return interp(np.atleast_2d(pts))


def _thin_time(t: np.ndarray, fields: dict, max_slices: int = 2001):
    """Drop intermediate time slices to bound storage; stride keeps the endpoints."""
    stride = max(1, (len(t) - 1) // (max_slices - 1))
    if (len(t) - 1) % stride:
        return t, fields
    return t[::stride], {k: v[::stride] for k, v in fields.items()}


def _tridiag_solve(lower, diag, upper, rhs):
    ab = np.zeros((3, len(diag)))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def _solve_semilinear_1d(
    theta,
    domain_t,
    domain_s,
    diffusion,
    advection_term,
    initial,
    nt: int,
    nx: int,
    picard: int,
):
    """Crank-Nicolson diffusion + Picard-iterated advection/reaction term.

    ``advection_term(u, u_s)`` is the non-diffusive right-hand side; Dirichlet
    zero walls are assumed by the two systems that use this path.
    """
    t = np.linspace(domain_t[0], domain_t[1], nt)
    s = np.linspace(domain_s[0], domain_s[1], nx)
    dt = t[1] - t[0]
    ds = s[1] - s[0]
    U = np.zeros((nt, nx))
    U[0] = initial(s)
    U[0, 0] = 0.0
    U[0, -1] = 0.0

    lam = diffusion * dt / (2 * ds * ds)
    n_in = nx - 2
    lower = np.full(n_in, -lam)
    diag = np.full(n_in, 1 + 2 * lam)
    upper = np.full(n_in, -lam)

    def lap(u):
        return (u[:-2] - 2 * u[1:-1] + u[2:]) / (ds * ds)

    def ds_c(u):
        return (u[2:] - u[:-2]) / (2 * ds)

    for k in range(nt - 1):
        u = U[k]
        rhs_base = u[1:-1] + 0.5 * dt * diffusion * lap(u)
        guess = u.copy()
        for _ in range(picard):
            mid = 0.5 * (u + guess)
            g = advection_term(mid[1:-1], ds_c(mid))
            new_in = _tridiag_solve(lower, diag, upper, rhs_base + dt * g)
            guess = np.zeros_like(u)
            guess[1:-1] = new_in
        U[k + 1] = guess
    t, fields = _thin_time(t, {0: U})
    return GridSolution(name="1d", axes=(t, s), values=fields)


def solve_lidar(theta, nx: int = 801, nt: int = 4001) -> GridSolution:
    """du/dt = tD d2u/ds2 + tS du/ds + tA u on [0,20]x[0,40], zero walls."""
    tD, tS, tA = float(theta[0]), float(theta[1]), float(theta[2])
    if tD <= 0:
        raise ValueError("lidar reference solve needs positive diffusion")

    def initial(s):
        return 1.0 / (1.0 + 0.1 * (20.0 - s) ** 2)

    def term(u, u_s):
        return tS * u_s + tA * u

    sol = _solve_semilinear_1d(theta, (0.0, 20.0), (0.0, 40.0), tD, term, initial,
                               nt=nt, nx=nx, picard=1)
    sol.name = "lidar"
    return sol


def solve_burgers(theta, nx: int = 1601, nt: int = 8001) -> GridSolution:
    """du/dt = -t1 u du/ds + t2 d2u/ds2 on [0,0.1]x[0,1], zero walls, Gaussian bump."""
    t1, t2 = float(theta[0]), float(theta[1])
    if t2 <= 0:
        raise ValueError("burgers reference solve needs positive viscosity")

    def initial(s):
        return np.exp(-100.0 * (s - 0.5) ** 2)

    def term(u, u_s):
        return -t1 * u * u_s

    sol = _solve_semilinear_1d(theta, (0.0, 0.1), (0.0, 1.0), t2, term, initial,
                               nt=nt, nx=nx, picard=3)
    sol.name = "burgers"
    return sol


def solve_brusselator(theta, ns: int = 81, nt: int = 5001) -> GridSolution:
    """Reaction-diffusion pair with adiabatic walls, midpoint time stepping.

    Explicit scheme: raises when the diffusion stability limit dt <= h^2/(4 t1)
    is violated, suggesting a workable step count.
    """
    t1, t2, t3 = float(theta[0]), float(theta[1]), float(theta[2])
    s = np.linspace(0.0, 1.0, ns)
    t = np.linspace(0.0, 1.0, nt)
    h = s[1] - s[0]
    dt = t[1] - t[0]
    if t1 > 0 and dt > h * h / (4 * t1):
        need = int(math.ceil(1.0 / (h * h / (4 * t1)))) + 1
        raise ValueError(
            f"explicit step dt={dt:.3e} violates the diffusion stability limit "
            f"{h * h / (4 * t1):.3e}; use nt >= {need}"
        )
    S1, S2 = np.meshgrid(s, s, indexing="ij")
    U = np.empty((nt, ns, ns))
    V = np.empty((nt, ns, ns))
    U[0] = 2.0 + 0.25 * S2
    V[0] = 1.0 + 0.8 * S1

    def lap(f):
        g = np.pad(f, 1, mode="reflect")  # mirror ghost rows: adiabatic walls
        return (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4 * f) / (h * h)

    def rhs(u, v):
        uu_v = u * u * v
        du = t1 * lap(u) + t3 - (t2 + 1.0) * u + uu_v
        dv = t1 * lap(v) + t2 * u - uu_v
        return du, dv

    for k in range(nt - 1):
        du1, dv1 = rhs(U[k], V[k])
        um = U[k] + 0.5 * dt * du1
        vm = V[k] + 0.5 * dt * dv1
        du2, dv2 = rhs(um, vm)
        U[k + 1] = U[k] + dt * du2
        V[k + 1] = V[k] + dt * dv2
    t, fields = _thin_time(t, {0: U, 2: V}, max_slices=501)
    return GridSolution(name="brusselator", axes=(t, s, s), values=fields)


_DEFAULT_RES = {
    "lidar": (801, 4001),
    "burgers": (1601, 8001),
    "brusselator": (81, 5001),
}


def reference_solve(sys_or_name, theta, grid_resolution: Optional[tuple] = None) -> GridSolution:
    """Reference solution for one of the oracle-backed systems (cached).

    ``grid_resolution`` is (n_space, n_time); defaults are validated by
    :func:`convergence_check` in the test-suite.
    """
    name = sys_or_name if isinstance(sys_or_name, str) else sys_or_name.name
    if name not in _DEFAULT_RES:
        raise ValueError(f"no reference solver for system {name!r}")
    res = tuple(grid_resolution) if grid_resolution else _DEFAULT_RES[name]
    key = (name, tuple(np.round(np.asarray(theta, float), 12)), res)
    if key not in _CACHE:
        if name == "lidar":
            _CACHE[key] = solve_lidar(theta, nx=res[0], nt=res[1])
        elif name == "burgers":
            _CACHE[key] = solve_burgers(theta, nx=res[0], nt=res[1])
        else:
            _CACHE[key] = solve_brusselator(theta, ns=res[0], nt=res[1])
    return _CACHE[key]


def convergence_check(name: str, theta, probe_pts: np.ndarray,
                      grid_resolution: Optional[tuple] = None) -> float:
    """Max-norm change of the solution on probe points when the grid is halved."""
    res = tuple(grid_resolution) if grid_resolution else _DEFAULT_RES[name]
    coarse = ((res[0] - 1) // 2 + 1, (res[1] - 1) // 2 + 1)
    fine = reference_solve(name, theta, res)
    rough = reference_solve(name, theta, coarse)
    worst = 0.0
    for comp in fine.values:
        a = fine.interp(probe_pts, comp)
        b = rough.interp(probe_pts, comp)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def clear_cache() -> None:
    _CACHE.clear()
