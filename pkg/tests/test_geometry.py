import numpy as np
import pytest

from motionfit.errors import DegenerateHull, InvalidInterval
from motionfit.geometry import (
    closest_point_on_hull,
    convex_hull_2d,
    hull_distance,
    hull_distance_grad,
    interval_penalty,
    interval_penalty_grad,
    point_in_polygon,
)


class TestIntervalPenalty:
    def test_inside_is_zero(self):
        assert interval_penalty(0.5, 0.0, 1.0) == 0.0

    def test_above(self):
        assert interval_penalty(1.3, 0.0, 1.0) == pytest.approx(0.09)

    def test_below(self):
        assert interval_penalty(-2.0, 0.0, 1.0) == pytest.approx(4.0)

    def test_invalid_interval(self):
        with pytest.raises(InvalidInterval):
            interval_penalty(0.0, 1.0, 0.0)

    def test_c1_at_endpoints(self):
        # one-sided derivatives on either side of lo and hi agree to 1e-8
        eps = 1e-9
        for edge in (0.0, 1.0):
            d_in = interval_penalty_grad(edge - eps if edge == 1.0 else edge + eps, 0.0, 1.0)
            d_out = interval_penalty_grad(edge + eps if edge == 1.0 else edge - eps, 0.0, 1.0)
            assert abs(d_in - d_out) < 1e-8

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.uniform(-3, 3)
            lo, hi = sorted(rng.uniform(-2, 2, 2))
            h = 1e-6
            fd = (interval_penalty(x + h, lo, hi) - interval_penalty(x - h, lo, hi)) / (2 * h)
            assert interval_penalty_grad(x, lo, hi) == pytest.approx(fd, abs=1e-6)


def brute_force_hull(points):
    """O(n^3) hull oracle: keep edges with all points on their left."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    n = len(pts)
    on_hull = set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = pts[j] - pts[i]
            cross = d[0] * (pts[:, 1] - pts[i, 1]) - d[1] * (pts[:, 0] - pts[i, 0])
            others = np.delete(cross, [i, j])
            if np.all(others > 1e-12):
                on_hull.add(i)
                on_hull.add(j)
    hull_pts = pts[sorted(on_hull)]
    center = hull_pts.mean(axis=0)
    ang = np.arctan2(hull_pts[:, 1] - center[1], hull_pts[:, 0] - center[0])
    return hull_pts[np.argsort(ang)]


class TestConvexHull:
    def test_square_with_center(self):
        pts = [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]]
        hull = convex_hull_2d(pts)
        assert len(hull) == 4
        assert {tuple(p) for p in hull} == {(0, 0), (1, 0), (1, 1), (0, 1)}

    def test_triangle(self):
        pts = [[0, 0], [2, 0], [1, 1.5]]
        hull = convex_hull_2d(pts)
        assert {tuple(p) for p in hull} == {tuple(map(float, p)) for p in pts}

    def test_ccw_orientation(self):
        hull = convex_hull_2d([[0, 0], [1, 0], [1, 1], [0, 1]])
        area2 = 0.0
        for i in range(len(hull)):
            a, b = hull[i], hull[(i + 1) % len(hull)]
            area2 += a[0] * b[1] - b[0] * a[1]
        assert area2 > 0

    def test_collinear_raises(self):
        with pytest.raises(DegenerateHull):
            convex_hull_2d([[0, 0], [1, 1], [2, 2], [3, 3]])

    def test_too_few_raises(self):
        with pytest.raises(DegenerateHull):
            convex_hull_2d([[0, 0], [1, 1]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for trial in range(200):
            pts = rng.normal(0, 1, (50, 2))
            hull = convex_hull_2d(pts)
            oracle = brute_force_hull(pts)
            assert len(hull) == len(oracle)
            # same vertex set (rotation of orderings allowed)
            got = {tuple(np.round(p, 12)) for p in hull}
            want = {tuple(np.round(p, 12)) for p in oracle}
            assert got == want


def sampled_boundary_distance(p, hull, coarse=1000, refine_iters=80):
    """Distance oracle: dense boundary sampling plus ternary refinement."""
    p = np.asarray(p, dtype=float)
    best = (np.inf, 0, 0.0)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        ts = np.linspace(0.0, 1.0, coarse)
        seg = a[None, :] + ts[:, None] * (b - a)[None, :]
        d = np.linalg.norm(seg - p[None, :], axis=1)
        k = int(np.argmin(d))
        if d[k] < best[0]:
            best = (d[k], i, ts[k])
    _, i, t0 = best
    a, b = hull[i], hull[(i + 1) % n]
    lo, hi = max(0.0, t0 - 2e-3), min(1.0, t0 + 2e-3)
    for _ in range(refine_iters):
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        d1 = np.linalg.norm(a + m1 * (b - a) - p)
        d2 = np.linalg.norm(a + m2 * (b - a) - p)
        if d1 < d2:
            hi = m2
        else:
            lo = m1
    t = (lo + hi) / 2
    return float(np.linalg.norm(a + t * (b - a) - p))


class TestHullDistance:
    unit_square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

    def test_centroid_zero(self):
        hull = convex_hull_2d([[0, 0], [3, 0], [1, 2]])
        assert hull_distance(hull.mean(axis=0), hull) == 0.0

    def test_axis_aligned(self):
        assert hull_distance([2.0, 0.5], self.unit_square) == pytest.approx(1.0)

    def test_inside_iff_zero_winding(self):
        rng = np.random.default_rng(3)
        hull = convex_hull_2d(rng.normal(0, 1, (20, 2)))
        for _ in range(300):
            p = rng.normal(0, 1.5, 2)
            # winding-number oracle for convex CCW polygon
            inside = point_in_polygon(p, hull)
            assert (hull_distance(p, hull) == 0.0) == inside

    def test_against_boundary_sampling(self):
        rng = np.random.default_rng(7)
        for trial in range(25):
            hull = convex_hull_2d(rng.normal(0, 1, (15, 2)))
            p = rng.normal(0, 2.0, 2)
            d = hull_distance(p, hull)
            if d == 0.0:
                continue
            assert d == pytest.approx(sampled_boundary_distance(p, hull), abs=1e-6)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(11)
        hull = convex_hull_2d(rng.normal(0, 1, (12, 2)))
        h = 1e-6
        checked = 0
        for _ in range(100):
            p = rng.normal(0, 2.0, 2)
            d, g = hull_distance_grad(p, hull)
            if d < 1e-3:
                continue
            for k in range(2):
                dp = np.zeros(2)
                dp[k] = h
                fd = (hull_distance(p + dp, hull) - hull_distance(p - dp, hull)) / (2 * h)
                assert g[k] == pytest.approx(fd, abs=1e-5)
            checked += 1
        assert checked > 20

    def test_closest_point_on_boundary(self):
        q = closest_point_on_hull([2.0, 0.5], self.unit_square)
        assert np.allclose(q, [1.0, 0.5])
