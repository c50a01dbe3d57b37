"""Post-training analysis: sparsity, pruning, KDE, constraint geometry.

The geometry half works on the two-dimensional sets
ln h(t1) + ln h(t2) = kappa.  These level sets are star-shaped about
the origin because every symmetric stable density decreases away from
its mode, so each is traced by radial bisection: walk outward along a
ray until the level equation changes sign, then bisect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .net import Model, load_checkpoint, save_checkpoint
from .stable import StableParams, log_pdf

__all__ = [
    "SparsityReport",
    "GeometryContour",
    "QuadraticObjective",
    "EmptyModel",
    "EmptyLevelSet",
    "RootNotBracketed",
    "InfeasibleBudget",
    "sparsity",
    "sparsity_fraction",
    "magnitude_prune",
    "weight_kde",
    "kappa_for_axis_radius",
    "contour_radius",
    "constraint_contour",
    "toy_lse_solve",
]


class EmptyModel(ValueError):
    pass


class EmptyLevelSet(ValueError):
    pass


class RootNotBracketed(RuntimeError):
    pass


class InfeasibleBudget(ValueError):
    pass


def _masked_weights(model: Model):
    refs = [r for r in model.parameters() if r.prior_mask]
    if not refs:
        raise EmptyModel("model has no prior-masked weight tensors")
    return refs


@dataclass(frozen=True)
class SparsityReport:
    threshold: float
    fraction: float
    per_layer: dict[str, float]
    kurtosis: float


def sparsity_fraction(model: Model, tau: float) -> float:
    refs = _masked_weights(model)
    small = 0
    total = 0
    for r in refs:
        w = model.get_param(r)
        small += int(np.count_nonzero(np.abs(w) <= tau))
        total += w.size
    return small / total


def sparsity(model: Model, tau: float) -> SparsityReport:
    """Fraction of prior-masked weights within tau of zero, per layer
    and globally, plus the fourth standardized moment of all of them."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    refs = _masked_weights(model)
    per_layer = {}
    chunks = []
    for r in refs:
        w = model.get_param(r)
        per_layer[r.key] = float(np.count_nonzero(np.abs(w) <= tau) / w.size)
        chunks.append(w.ravel())
    flat = np.concatenate(chunks)
    centered = flat - flat.mean()
    m2 = float(np.mean(centered ** 2))
    m4 = float(np.mean(centered ** 4))
    kurt = m4 / (m2 * m2) if m2 > 0 else float("nan")
    return SparsityReport(tau, sparsity_fraction(model, tau), per_layer, kurt)


def magnitude_prune(model: Model, fraction: float):
    """Zero the globally smallest-magnitude prior-masked weights.

    Exactly floor(fraction * total) weights go to zero; magnitude ties
    fall to the earlier weight in scan order (layer order, row-major
    within each tensor).  Returns (pruned copy, {param key: keep mask});
    the input model is left untouched.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    refs = _masked_weights(model)
    pruned = load_checkpoint(save_checkpoint(model))
    sizes = [model.get_param(r).size for r in refs]
    flat = np.concatenate([model.get_param(r).ravel() for r in refs])
    k = int(math.floor(fraction * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    if k:
        drop = np.argsort(np.abs(flat), kind="stable")[:k]
        keep[drop] = False
    masks = {}
    offset = 0
    for r, size in zip(refs, sizes):
        mask = keep[offset:offset + size].reshape(model.get_param(r).shape)
        masks[r.key] = mask
        pruned.get_param(r)[...] *= mask
        offset += size
    return pruned, masks


def weight_kde(model: Model, bandwidth: float, grid: np.ndarray) -> np.ndarray:
    """Gaussian-kernel density of the prior-masked weights on a grid."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid must be a 1-D array with at least two points")
    refs = _masked_weights(model)
    w = np.concatenate([model.get_param(r).ravel() for r in refs])
    z = (grid[None, :] - w[:, None]) / bandwidth
    kernel = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return kernel.mean(axis=0) / bandwidth


def _log_level(params: StableParams, x: float, y: float) -> float:
    vals = log_pdf(params, np.array([x, y]))
    return float(vals[0] + vals[1])


def kappa_for_axis_radius(params: StableParams, radius: float) -> float:
    """Level whose contour crosses the axes at the given radius."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    return _log_level(params, radius, 0.0)


def contour_radius(params: StableParams, kappa: float, angle: float,
                   tol: float = 1e-9) -> float:
    """Distance from the origin to the level set along one ray."""
    peak = _log_level(params, 0.0, 0.0)
    if kappa >= peak:
        raise EmptyLevelSet(f"kappa {kappa} is not below the maximum {peak}")
    cx, sx = math.cos(angle), math.sin(angle)

    def f(r):
        return _log_level(params, r * cx, r * sx) - kappa

    hi = 1.0
    lo = 0.0
    for _ in range(80):
        val = f(hi)
        if val < 0.0:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise RootNotBracketed(
            f"no sign change out to radius {hi}; kappa {kappa} too deep in the tail")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val) < tol:
            return mid
        if val > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(hi, 1.0):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GeometryContour:
    params: StableParams
    kappa: float
    angles: np.ndarray
    points: np.ndarray  # [resolution + 1, 2]; first row repeated at the end


def constraint_contour(params: StableParams, kappa: float,
                       resolution: int = 64) -> GeometryContour:
    """Trace the closed level set ln h(t1) + ln h(t2) = kappa."""
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    angles = np.linspace(0.0, 2.0 * math.pi, resolution, endpoint=False)
    pts = np.empty((resolution + 1, 2))
    for i, a in enumerate(angles):
        r = contour_radius(params, kappa, a)
        pts[i] = (r * math.cos(a), r * math.sin(a))
    pts[-1] = pts[0]
    return GeometryContour(params, kappa, angles, pts)


@dataclass(frozen=True)
class QuadraticObjective:
    """f(t) = (t - center)^T matrix (t - center), matrix SPD."""

    center: tuple[float, float]
    matrix: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 2) or abs(m[0, 1] - m[1, 0]) > 1e-12:
            raise ValueError("matrix must be symmetric 2x2")
        if np.any(np.linalg.eigvalsh(m) <= 0):
            raise ValueError("matrix must be positive definite")

    def value(self, point) -> float:
        d = np.asarray(point, dtype=np.float64) - np.asarray(self.center)
        return float(d @ np.asarray(self.matrix) @ d)


def toy_lse_solve(objective: QuadraticObjective, params: StableParams,
                  kappa: float, resolution: int = 256):
    """Minimize the quadratic subject to ln h(t1) + ln h(t2) >= kappa.

    The unconstrained optimum is returned when it is already feasible;
    otherwise the minimum lies on the budget contour, found by a coarse
    angular sweep followed by golden-section refinement of the angle.
    """
    peak = _log_level(params, 0.0, 0.0)
    if kappa > peak:
        raise InfeasibleBudget(f"kappa {kappa} exceeds the maximum level {peak}")
    if kappa == peak:
        return (0.0, 0.0)
    cx, cy = objective.center
    if _log_level(params, cx, cy) >= kappa:
        return (float(cx), float(cy))

    def point_at(angle):
        r = contour_radius(params, kappa, angle)
        return (r * math.cos(angle), r * math.sin(angle))

    angles = np.linspace(0.0, 2.0 * math.pi, resolution, endpoint=False)
    values = [objective.value(point_at(a)) for a in angles]
    best = int(np.argmin(values))
    step = 2.0 * math.pi / resolution
    lo, hi = angles[best] - step, angles[best] + step
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = objective.value(point_at(c)), objective.value(point_at(d))
    for _ in range(60):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = objective.value(point_at(c))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = objective.value(point_at(d))
        if b - a < 1e-12:
            break
    final = point_at(0.5 * (a + b))
    return (float(final[0]), float(final[1]))
