"""Space-filling construction of the discretization set and boundary point sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .pde import PdeSystem

__all__ = [
    "PointSet",
    "latin_hypercube",
    "build_discretization",
    "sample_boundary_sets",
    "default_n_discretization",
]

TAG_OBSERVATION = "observation"
TAG_INTERIOR = "interior"


@dataclass
class PointSet:
    """Points in the closed domain box with per-point provenance tags."""

    points: np.ndarray
    tags: list[str]

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.tags = list(self.tags)
        if len(self.tags) != len(self.points):
            raise ValueError("one tag per point required")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def p(self) -> int:
        return self.points.shape[1]


def default_n_discretization(n: int) -> int:
    """Default |I|: four points per observation, capped at 240 (never below n)."""
    return max(n, min(4 * n, 240))


def latin_hypercube(count: int, box: Sequence[Sequence[float]], seed: int) -> PointSet:
    """Midpoint Latin hypercube design: one point per axis stratum per dimension."""
    if count < 1:
        raise ValueError("count must be >= 1")
    box_arr = np.asarray(box, dtype=float)
    p = box_arr.shape[0]
    rng = np.random.default_rng(seed)
    unit = np.empty((count, p))
    for i in range(p):
        unit[:, i] = (rng.permutation(count) + 0.5) / count
    pts = box_arr[:, 0] + unit * (box_arr[:, 1] - box_arr[:, 0])
    return PointSet(pts, [TAG_INTERIOR] * count)


def build_discretization(
    tau: Union[PointSet, np.ndarray],
    n_i: int,
    box: Sequence[Sequence[float]],
    seed: int,
    distance_space: str = "unit",
) -> PointSet:
    """Grow the observation set into a size-n_i set by greedy maximin selection.

    Starts from I = tau, draws a Latin-hypercube candidate pool of size
    20 * n_i and repeatedly appends the candidate farthest from the current
    set (ties broken by lowest candidate index).  Distances are measured on
    the box rescaled to the unit cube unless ``distance_space="raw"``.
    """
    if isinstance(tau, PointSet):
        tau_pts = tau.points
        tau_tags = list(tau.tags)
    else:
        tau_pts = np.atleast_2d(np.asarray(tau, dtype=float))
        tau_tags = [TAG_OBSERVATION] * len(tau_pts)
    if n_i < len(tau_pts):
        raise ValueError(f"n_i={n_i} is smaller than |tau|={len(tau_pts)}")
    if distance_space not in ("unit", "raw"):
        raise ValueError("distance_space must be 'unit' or 'raw'")
    if n_i == len(tau_pts):
        return PointSet(tau_pts.copy(), tau_tags)

    box_arr = np.asarray(box, dtype=float)
    widths = box_arr[:, 1] - box_arr[:, 0]
    widths[widths == 0] = 1.0
    cand = latin_hypercube(20 * n_i, box, seed).points

    def to_metric(pts):
        return pts / widths if distance_space == "unit" else pts

    cand_m = to_metric(cand)
    current_m = to_metric(tau_pts)
    # min distance from every candidate to the growing set, updated incrementally
    d2 = np.min(
        ((cand_m[:, None, :] - current_m[None, :, :]) ** 2).sum(axis=2), axis=1
    )
    chosen: list[int] = []
    for _ in range(n_i - len(tau_pts)):
        idx = int(np.argmax(d2))
        chosen.append(idx)
        new = cand_m[idx]
        d2 = np.minimum(d2, ((cand_m - new) ** 2).sum(axis=1))
    pts = np.vstack([tau_pts, cand[chosen]])
    tags = tau_tags + [TAG_INTERIOR] * len(chosen)
    return PointSet(pts, tags)


def _allocate(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``total`` proportionally to ``weights``."""
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        w = np.ones_like(w)
    shares = total * w / w.sum()
    counts = np.floor(shares).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(shares - counts))
        for i in order[:short]:
            counts[i] += 1
    return counts.tolist()


def sample_boundary_sets(sys: PdeSystem, n1: int, n2: int):
    """Sample n1 Dirichlet and n2 non-Dirichlet boundary points across regions.

    Points are evenly spaced in each region's own parameterization; the budget
    is split across declared conditions proportionally to their weights by
    largest remainder.  Tags record the owning condition index.
    """
    if n1 < 0 or n2 < 0:
        raise ValueError("boundary point counts must be non-negative")
    p = sys.p

    def sample(conditions, total, tag_prefix):
        if total == 0 or not conditions:
            if total > 0:
                raise ValueError(f"no {tag_prefix} condition declared but {total} points requested")
            return PointSet(np.zeros((0, p)), [])
        counts = _allocate(total, [c.weight for c in conditions])
        pts, tags = [], []
        for i, (cond, m) in enumerate(zip(conditions, counts)):
            if m == 0:
                continue
            sampled = cond.sampler(m)
            if len(sampled) != m:
                raise ValueError(
                    f"sampler of condition {cond.label!r} returned {len(sampled)} of {m} points"
                )
            if not np.all(cond.contains(sampled)):
                raise ValueError(f"sampler of condition {cond.label!r} left its region")
            pts.append(sampled)
            tags.extend([f"{tag_prefix}:{i}"] * m)
        return PointSet(np.vstack(pts) if pts else np.zeros((0, p)), tags)

    i1 = sample(sys.dirichlet_conditions, n1, "boundary_dirichlet")
    i2 = sample(sys.operator_conditions, n2, "boundary_other")
    return i1, i2


def split_by_condition(point_set: PointSet, conditions):
    """Regroup a tagged boundary PointSet into (condition, points) pairs."""
    groups = []
    tags = np.array(point_set.tags)
    for i, cond in enumerate(conditions):
        mask = np.array([t.endswith(f":{i}") for t in tags]) if len(tags) else np.zeros(0, bool)
        if mask.any():
            groups.append((cond, point_set.points[mask]))
    return groups
