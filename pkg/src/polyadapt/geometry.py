"""Small computational-geometry helpers for convex polygons.

Polygons are ``(n, 2)`` float arrays with vertices in counter-clockwise order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog


def cross2(a, b):
    """z-component of the cross product of 2D vectors (broadcasts)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def signed_area(poly) -> float:
    """Shoelace signed area; positive for counter-clockwise loops."""
    p = np.asarray(poly, dtype=float)
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def polygon_centroid(poly) -> np.ndarray:
    """Area centroid of a simple polygon."""
    p = np.asarray(poly, dtype=float)
    # shift for conditioning: small cells far from the origin lose digits otherwise
    origin = p.mean(axis=0)
    p = p - origin
    q = np.roll(p, -1, axis=0)
    c = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
    a = 0.5 * c.sum()
    cx = np.sum((p[:, 0] + q[:, 0]) * c) / (6.0 * a)
    cy = np.sum((p[:, 1] + q[:, 1]) * c) / (6.0 * a)
    return origin + np.array([cx, cy])


def diameter(poly) -> float:
    p = np.asarray(poly, dtype=float)
    d = p[:, None, :] - p[None, :, :]
    return float(np.sqrt((d**2).sum(axis=-1).max()))


def point_in_convex_polygon(poly, point, strict: bool = True) -> bool:
    p = np.asarray(poly, dtype=float)
    e = np.roll(p, -1, axis=0) - p
    c = cross2(e, np.asarray(point, dtype=float) - p)
    return bool(np.all(c > 0)) if strict else bool(np.all(c >= 0))


def is_strictly_convex(poly, rel_tol: float = 1e-12) -> bool:
    p = np.asarray(poly, dtype=float)
    if signed_area(p) <= 0:
        return False
    a = p - np.roll(p, 1, axis=0)
    b = np.roll(p, -1, axis=0) - p
    return bool(np.all(cross2(a, b) > rel_tol * diameter(p) ** 2))


def clip_halfplane(poly: np.ndarray, normal, offset: float) -> np.ndarray:
    """Keep the part of a convex polygon with ``normal . x <= offset``."""
    if len(poly) == 0:
        return poly
    s = poly @ np.asarray(normal, dtype=float) - offset
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        si, sj = s[i], s[j]
        if si <= 0:
            out.append(poly[i])
        if (si < 0 < sj) or (sj < 0 < si):
            t = si / (si - sj)
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out, dtype=float).reshape(-1, 2)


def chebyshev_center(poly) -> tuple[np.ndarray, float]:
    """Largest inscribed disk of a convex polygon, via a linear program.

    Maximises ``r`` subject to ``a_k . c + r |a_k| <= b_k`` for every edge
    half-plane ``a_k . x <= b_k``.
    """
    p = np.asarray(poly, dtype=float)
    e = np.roll(p, -1, axis=0) - p
    # outward normal of a CCW edge is (e_y, -e_x)
    a = np.stack([e[:, 1], -e[:, 0]], axis=1)
    b = np.sum(a * p, axis=1)
    norms = np.linalg.norm(a, axis=1)
    A_ub = np.column_stack([a, norms])
    res = linprog(
        c=[0.0, 0.0, -1.0],
        A_ub=A_ub,
        b_ub=b,
        bounds=[(None, None), (None, None), (0, None)],
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"Chebyshev-center LP failed: {res.message}")
    return res.x[:2], float(res.x[2])


def _circle_two(a, b):
    c = 0.5 * (a + b)
    return c, float(np.linalg.norm(a - c))


def _circle_three(a, b, c):
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        return None
    ux = ox + ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / d
    uy = oy + ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / d
    centre = np.array([ux, uy])
    r = max(float(np.linalg.norm(centre - v)) for v in (a, b, c))
    return centre, r


def _inside(circle, p, eps=1e-12):
    c, r = circle
    return float(np.linalg.norm(p - c)) <= r * (1 + eps) + eps


def min_enclosing_circle(points, seed: int = 0) -> tuple[np.ndarray, float]:
    """Smallest enclosing circle by the randomized incremental (Welzl) method."""
    pts = [np.asarray(p, dtype=float) for p in np.asarray(points, dtype=float)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pts))
    pts = [pts[i] for i in order]

    circle = None
    for i, p in enumerate(pts):
        if circle is not None and _inside(circle, p):
            continue
        circle = (p, 0.0)
        for j in range(i):
            q = pts[j]
            if _inside(circle, q):
                continue
            circle = _circle_two(p, q)
            for k in range(j):
                s = pts[k]
                if _inside(circle, s):
                    continue
                c3 = _circle_three(p, q, s)
                if c3 is not None:
                    circle = c3
    assert circle is not None
    return circle[0], float(circle[1])


def regular_polygon_side(n: int, radius: float = 1.0) -> float:
    return 2.0 * radius * math.sin(math.pi / n)
