"""Planar convex-polygon helpers used by the contact model and object library."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EPS = 1e-12


def polygon_area(verts: np.ndarray) -> float:
    """Signed area via the shoelace formula; positive for counterclockwise order."""
    v = np.asarray(verts, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(verts: np.ndarray) -> np.ndarray:
    """Area centroid of a simple polygon."""
    v = np.asarray(verts, dtype=float)
    x, y = v[:, 0], v[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    a = 0.5 * np.sum(cross)
    if abs(a) < _EPS:
        return v.mean(axis=0)
    cx = np.sum((x + np.roll(x, -1)) * cross) / (6.0 * a)
    cy = np.sum((y + np.roll(y, -1)) * cross) / (6.0 * a)
    return np.array([cx, cy])


def ensure_ccw(verts: np.ndarray) -> np.ndarray:
    v = np.asarray(verts, dtype=float)
    if polygon_area(v) < 0.0:
        v = v[::-1].copy()
    return v


def is_convex_ccw(verts: np.ndarray, tol: float = 1e-9) -> bool:
    """True for a counterclockwise convex polygon with no repeated vertices."""
    v = np.asarray(verts, dtype=float)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        return False
    e = np.roll(v, -1, axis=0) - v
    if np.any(np.hypot(e[:, 0], e[:, 1]) < tol):
        return False
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross > -tol)) and polygon_area(v) > tol * tol


def clip_halfplane(verts: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Clip a convex polygon to the halfplane normal . p <= offset.

    Sutherland-Hodgman against a single edge.  Returns an (m, 2) array, m may
    be 0 when the polygon lies entirely outside.
    """
    v = np.asarray(verts, dtype=float)
    n = np.asarray(normal, dtype=float)
    if len(v) == 0:
        return v.reshape(0, 2)
    d = v @ n - offset
    out: list[np.ndarray] = []
    m = len(v)
    for i in range(m):
        j = (i + 1) % m
        inside_i, inside_j = d[i] <= _EPS, d[j] <= _EPS
        if inside_i:
            out.append(v[i])
        if inside_i != inside_j:
            t = d[i] / (d[i] - d[j])
            out.append(v[i] + t * (v[j] - v[i]))
    if not out:
        return np.zeros((0, 2))
    return np.array(out)


def point_in_convex(points: np.ndarray, verts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Vectorised containment test for points against a CCW convex polygon."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    v = np.asarray(verts, dtype=float)
    e = np.roll(v, -1, axis=0) - v
    # cross(e_i, p - v_i) >= 0 for all edges of a CCW polygon
    rel = p[:, None, :] - v[None, :, :]
    cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
    return np.all(cross >= -tol, axis=1)


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        return math.hypot(p[0] - self.cx, p[1] - self.cy) <= self.r + tol


def _circle_two(a: np.ndarray, b: np.ndarray) -> Circle:
    c = 0.5 * (a + b)
    return Circle(float(c[0]), float(c[1]), 0.5 * float(np.hypot(*(a - b))))


def _circle_three(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> Circle | None:
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < _EPS:
        return None
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
          + (cx * cx + cy * cy) * (ay - by)) / d
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
          + (cx * cx + cy * cy) * (bx - ax)) / d
    return Circle(float(ux), float(uy), float(math.hypot(ax - ux, ay - uy)))


def _trivial(boundary: list[np.ndarray]) -> Circle:
    if not boundary:
        return Circle(0.0, 0.0, 0.0)
    if len(boundary) == 1:
        return Circle(float(boundary[0][0]), float(boundary[0][1]), 0.0)
    if len(boundary) == 2:
        return _circle_two(boundary[0], boundary[1])
    c = _circle_three(*boundary)
    if c is not None:
        return c
    # collinear support set: fall back to the widest pair
    best = _circle_two(boundary[0], boundary[1])
    for i in range(3):
        for j in range(i + 1, 3):
            cand = _circle_two(boundary[i], boundary[j])
            if cand.r > best.r:
                best = cand
    return best


def _welzl(points: list[np.ndarray], boundary: list[np.ndarray]) -> Circle:
    if not points or len(boundary) == 3:
        return _trivial(boundary)
    p = points[-1]
    c = _welzl(points[:-1], boundary)
    if c.contains(p):
        return c
    return _welzl(points[:-1], boundary + [p])


def min_enclosing_circle(points: np.ndarray) -> Circle:
    """Smallest circle containing all points (Welzl, deterministic order).

    Input sets here are polygon vertex lists (n <= 16), so the worst-case
    recursion without shuffling is immaterial.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("min_enclosing_circle needs at least one point")
    return _welzl([pts[i] for i in range(len(pts))], [])


def rotate(verts: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    r = np.array([[c, -s], [s, c]])
    return np.asarray(verts, dtype=float) @ r.T


def transform(verts: np.ndarray, x: float, y: float, angle: float) -> np.ndarray:
    """Rotate by angle about the origin then translate by (x, y)."""
    return rotate(verts, angle) + np.array([x, y])
