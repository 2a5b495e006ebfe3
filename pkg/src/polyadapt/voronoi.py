"""Bounded Voronoi tessellations of the unit square and Lloyd's iteration.

Seed-to-points mapping (fixed, so histories are reproducible): the ``k * k``
initial generators are ``numpy.random.default_rng(seed).random((k * k, 2))``,
with any coordinate outside the open interval (0, 1) redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Voronoi, cKDTree

from .geometry import clip_halfplane, polygon_centroid
from .mesh import PolygonMesh, classify_boundary, snap_to_unit_square, validate_mesh

MERGE_TOL = 1e-9

_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GeneratorSet:
    points: np.ndarray
    seed: int | None = None
    grid_n: int | None = None

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 2)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def check(self) -> None:
        p = self.points
        if len(p) == 0:
            raise GeneratorError("empty generator set")
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise GeneratorError("generators must lie strictly inside (0,1)^2")
        if len(p) > 1:
            d, _ = cKDTree(p).query(p, k=2)
            if d[:, 1].min() <= 1e-12:
                raise GeneratorError("duplicate generators")


def random_generators(k: int, seed: int) -> GeneratorSet:
    rng = np.random.default_rng(seed)
    pts = rng.random((k * k, 2))
    bad = (pts <= 0.0) | (pts >= 1.0)
    while bad.any():
        pts[bad] = rng.random(int(bad.sum()))
        bad = (pts <= 0.0) | (pts >= 1.0)
    return GeneratorSet(pts, seed=seed, grid_n=k)


def _merge_close(points: np.ndarray, tol: float) -> np.ndarray:
    """Union-find representative index for points closer than ``tol``."""
    parent = np.arange(len(points))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in cKDTree(points).query_pairs(tol):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(i) for i in range(len(points))])


def _assemble(polys: list[np.ndarray], gens: np.ndarray) -> PolygonMesh:
    """Glue per-cell polygons into a conforming mesh with shared vertices."""
    sizes = [len(p) for p in polys]
    allpts = snap_to_unit_square(np.vstack(polys))
    rep = _merge_close(allpts, MERGE_TOL)
    uniq, inverse = np.unique(rep, return_inverse=True)
    verts = allpts[uniq]
    cells = []
    start = 0
    for g, n in zip(gens, sizes):
        loop = inverse[start : start + n]
        start += n
        # drop repeats created by merging, keep cyclic order
        ids = []
        for i in loop:
            if not ids or ids[-1] != i:
                ids.append(int(i))
        while len(ids) > 1 and ids[0] == ids[-1]:
            ids.pop()
        # consistent CCW order around the generator
        d = verts[ids] - g
        order = np.argsort(np.arctan2(d[:, 1], d[:, 0]), kind="stable")
        cells.append(tuple(ids[i] for i in order))
    return PolygonMesh(verts, cells, classify_boundary(verts))


def _cells_qhull(gens: np.ndarray) -> list[np.ndarray]:
    p = gens
    mirrors = [
        np.column_stack([-p[:, 0], p[:, 1]]),
        np.column_stack([2.0 - p[:, 0], p[:, 1]]),
        np.column_stack([p[:, 0], -p[:, 1]]),
        np.column_stack([p[:, 0], 2.0 - p[:, 1]]),
    ]
    vor = Voronoi(np.vstack([p] + mirrors))
    polys = []
    for i in range(len(p)):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or len(region) < 3:
            raise GeneratorError(f"unbounded Voronoi region for generator {i}")
        polys.append(np.clip(vor.vertices[region], 0.0, 1.0))
    return polys


def _cells_clip(gens: np.ndarray) -> list[np.ndarray]:
    polys = []
    for i, g in enumerate(gens):
        cell = _SQUARE.copy()
        for j, h in enumerate(gens):
            if i == j:
                continue
            # points closer to g than h: (h - g) . x <= (|h|^2 - |g|^2) / 2
            normal = h - g
            cell = clip_halfplane(cell, normal, 0.5 * (h @ h - g @ g))
        polys.append(cell)
    return polys


def voronoi(gen: GeneratorSet, method: str = "qhull") -> PolygonMesh:
    """Voronoi tessellation of the unit square, one convex cell per generator.

    ``method="qhull"`` reflects the generators across the four sides and reads
    the bounded regions from scipy's Voronoi diagram; ``method="clip"``
    intersects the square with every bisector half-plane (O(n^2)).
    """
    gen.check()
    gens = np.asarray(gen.points)
    if len(gens) == 1:
        polys = [_SQUARE.copy()]
    elif method == "qhull":
        polys = _cells_qhull(gens)
    elif method == "clip":
        polys = _cells_clip(gens)
    else:
        raise ValueError(f"unknown Voronoi method {method!r}")
    return _assemble(polys, gens)


def cell_centroids(mesh: PolygonMesh) -> np.ndarray:
    out = np.empty((mesh.n_cells, 2))
    for ids, idx in mesh.groups.values():
        p = mesh.vertices[idx]
        origin = p.mean(axis=1, keepdims=True)
        p = p - origin
        q = np.roll(p, -1, axis=1)
        c = p[..., 0] * q[..., 1] - q[..., 0] * p[..., 1]
        a = 0.5 * c.sum(axis=1)
        cx = np.sum((p[..., 0] + q[..., 0]) * c, axis=1) / (6 * a)
        cy = np.sum((p[..., 1] + q[..., 1]) * c, axis=1) / (6 * a)
        out[ids] = origin[:, 0, :] + np.column_stack([cx, cy])
    return out


def lloyd_step(gen: GeneratorSet, mesh: PolygonMesh | None = None) -> GeneratorSet:
    """Move every generator to the area centroid of its Voronoi cell."""
    if mesh is None:
        mesh = voronoi(gen)
    return GeneratorSet(cell_centroids(mesh), seed=gen.seed, grid_n=gen.grid_n)


def cvt_energy(gen: GeneratorSet, mesh: PolygonMesh) -> float:
    """Sum over cells of the second moment of area about the cell's generator.

    Exact for polygons: each cell is fanned from its first vertex and the
    quadratic integrand is integrated with the edge-midpoint rule.
    """
    total = 0.0
    for cid, c in enumerate(mesh.cells):
        z = gen.points[cid]
        p = mesh.vertices[list(c)] - z
        for i in range(1, len(c) - 1):
            a, b, d = p[0], p[i], p[i + 1]
            area = 0.5 * ((b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0]))
            mids = (0.5 * (a + b), 0.5 * (b + d), 0.5 * (d + a))
            total += area * sum(m @ m for m in mids) / 3.0
    return total


@dataclass
class CvtResult:
    mesh: PolygonMesh
    generators: GeneratorSet
    history: list[tuple[int, float, float]] = field(default_factory=list)


def generate_cvt(n: int, iters: int, seed: int, record: bool = True, method: str = "qhull") -> CvtResult:
    """Lloyd's iteration from ``n * n`` uniform random generators.

    ``history`` holds ``(iter, Q_ali_1, Q_eq_1)`` under the identity metric with
    regular reference n-gons for iterations ``0..iters``.
    """
    from .quality import quality_approx1  # local: quality imports mesh only

    if n < 2:
        raise ValueError("n must be >= 2")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    gen = random_generators(n, seed)
    mesh = voronoi(gen, method=method)
    history = []
    for it in range(iters + 1):
        if record:
            rep = quality_approx1(mesh)
            history.append((it, rep.Q_ali, rep.Q_eq))
        if it == iters:
            break
        gen = lloyd_step(gen, mesh)
        mesh = voronoi(gen, method=method)
    problems = validate_mesh(mesh, domain_area=1.0)
    if problems:
        raise GeneratorError(f"CVT mesh failed validation: {problems[0]}")
    return CvtResult(mesh, gen, history)
