"""2D geometric primitives for the biomechanical terms.

Interval hinge penalties, Andrew monotone-chain convex hulls, and
point-to-convex-polygon distances (with the closest-point information the
objective needs for gradients).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateHull, InvalidInterval


def interval_penalty(x: float, lo: float, hi: float) -> float:
    """Quadratic hinge: 0 inside [lo, hi], squared overshoot outside.

    C1 everywhere; the one-sided derivatives vanish at both endpoints.
    """
    if lo > hi:
        raise InvalidInterval(f"interval lo={lo} > hi={hi}")
    if x > hi:
        return (x - hi) ** 2
    if x < lo:
        return (lo - x) ** 2
    return 0.0


def interval_penalty_grad(x: float, lo: float, hi: float) -> float:
    """Derivative of :func:`interval_penalty` with respect to ``x``."""
    if lo > hi:
        raise InvalidInterval(f"interval lo={lo} > hi={hi}")
    if x > hi:
        return 2.0 * (x - hi)
    if x < lo:
        return -2.0 * (lo - x)
    return 0.0


def interval_penalty_array(x: np.ndarray, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized hinge penalty; returns (values, derivatives).

    ``lo``/``hi`` broadcast against ``x``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InvalidInterval("interval with lo > hi")
    over = np.maximum(x - hi, 0.0)
    under = np.maximum(lo - x, 0.0)
    return over**2 + under**2, 2.0 * over - 2.0 * under


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> np.ndarray:
    """Convex hull via Andrew's monotone chain, counterclockwise.

    Collinear boundary points are dropped. Raises :class:`DegenerateHull`
    when fewer than 3 non-collinear points remain.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateHull(f"expected (n, 2) points, got {pts.shape}")
    uniq = sorted({(float(p[0]), float(p[1])) for p in pts})
    if len(uniq) < 3:
        raise DegenerateHull("fewer than 3 distinct points")

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(uniq)
    upper = half(reversed(uniq))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateHull("points are collinear")
    return np.asarray(hull, dtype=float)


def point_in_polygon(p, hull: np.ndarray) -> bool:
    """True if ``p`` lies inside or on the boundary of a CCW convex polygon."""
    p = np.asarray(p, dtype=float)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        if _cross(a, b, p) < -1e-12 * (1.0 + np.abs(hull).max()):
            return False
    return True


def closest_point_on_hull(p, hull: np.ndarray) -> np.ndarray:
    """Closest boundary point of a convex polygon to ``p``."""
    p = np.asarray(p, dtype=float)
    edges_a = hull
    edges_b = np.roll(hull, -1, axis=0)
    ab = edges_b - edges_a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p[None, :] - edges_a, ab) / denom, 0.0, 1.0)
    proj = edges_a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", proj - p[None, :], proj - p[None, :])
    return proj[int(np.argmin(d2))]


def hull_distance(p, hull: np.ndarray) -> float:
    """Euclidean distance from ``p`` to a CCW convex polygon (0 if inside)."""
    p = np.asarray(p, dtype=float)
    if point_in_polygon(p, hull):
        return 0.0
    return float(np.linalg.norm(closest_point_on_hull(p, hull) - p))


def hull_distance_grad(p, hull: np.ndarray) -> tuple[float, np.ndarray]:
    """Distance and its gradient wrt ``p`` (zero vector inside the hull)."""
    p = np.asarray(p, dtype=float)
    if point_in_polygon(p, hull):
        return 0.0, np.zeros(2)
    q = closest_point_on_hull(p, hull)
    d = float(np.linalg.norm(p - q))
    return d, (p - q) / d
