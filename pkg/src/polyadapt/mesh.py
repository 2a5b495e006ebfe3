"""Polygonal mesh representation, validation, triangular subdivisions and I/O."""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

from .geometry import cross2, is_strictly_convex

# Boundary tags for the unit-square domain.
INTERIOR = 0
BOTTOM = 1  # y = 0
RIGHT = 2  # x = 1
TOP = 3  # y = 1
LEFT = 4  # x = 0
CORNER = 5

TAG_NAMES = {INTERIOR: "interior", BOTTOM: "bottom", RIGHT: "right", TOP: "top", LEFT: "left", CORNER: "corner"}

BOUNDARY_TOL = 1e-9
COLLINEAR_TOL = 1e-12


class MeshFormatError(ValueError):
    """Malformed mesh document."""


class MeshValidationError(ValueError):
    """Mesh violates the convex-tiling invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"{len(self.violations)} mesh violation(s): {lines}{more}")


class DegenerateElementError(ValueError):
    """A subdivision produced a non-positive triangle."""


@dataclass(frozen=True)
class Violation:
    kind: str  # orientation | collinear | nonconvex | too_few_vertices | overlap | coverage
    cell: int | None
    detail: str = ""

    def __str__(self) -> str:
        where = f"cell {self.cell}" if self.cell is not None else "mesh"
        return f"{self.kind} ({where}{': ' + self.detail if self.detail else ''})"


def classify_boundary(vertices: np.ndarray, tol: float = BOUNDARY_TOL) -> np.ndarray:
    """Tag vertices lying on the sides of the unit square."""
    v = np.asarray(vertices, dtype=float)
    on = [
        np.abs(v[:, 1]) <= tol,  # bottom
        np.abs(v[:, 0] - 1.0) <= tol,  # right
        np.abs(v[:, 1] - 1.0) <= tol,  # top
        np.abs(v[:, 0]) <= tol,  # left
    ]
    tags = np.full(len(v), INTERIOR, dtype=np.int8)
    count = np.zeros(len(v), dtype=int)
    for side, mask in zip((BOTTOM, RIGHT, TOP, LEFT), on):
        tags[mask] = side
        count += mask
    tags[count >= 2] = CORNER
    return tags


def snap_to_unit_square(vertices: np.ndarray, tol: float = BOUNDARY_TOL) -> np.ndarray:
    v = np.array(vertices, dtype=float)
    for target in (0.0, 1.0):
        v[np.abs(v - target) <= tol] = target
    return v


@dataclass(frozen=True, eq=False)
class PolygonMesh:
    """Vertices plus counter-clockwise convex cells.

    ``cells`` is a tuple of integer tuples. ``boundary_tags`` holds one
    of the module-level tag constants per vertex.
    """

    vertices: np.ndarray
    cells: tuple[tuple[int, ...], ...]
    boundary_tags: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "cells", tuple(tuple(int(i) for i in c) for c in self.cells))
        tags = self.boundary_tags
        tags = classify_boundary(v) if tags is None else np.array(tags, dtype=np.int8)
        if tags.shape != (len(v),):
            raise ValueError("boundary_tags must have one entry per vertex")
        tags.setflags(write=False)
        object.__setattr__(self, "boundary_tags", tags)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_coords(self, cell_id: int) -> np.ndarray:
        return self.vertices[list(self.cells[cell_id])]

    @cached_property
    def groups(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Cells grouped by vertex count: ``n -> (cell_ids, (c, n) index array)``."""
        by_n: dict[int, list[int]] = {}
        for cid, c in enumerate(self.cells):
            by_n.setdefault(len(c), []).append(cid)
        out = {}
        for n in sorted(by_n):
            ids = np.array(by_n[n], dtype=np.int64)
            idx = np.array([self.cells[i] for i in ids], dtype=np.int64).reshape(len(ids), n)
            out[n] = (ids, idx)
        return out

    @cached_property
    def cell_areas(self) -> np.ndarray:
        areas = np.empty(self.n_cells)
        for ids, idx in self.groups.values():
            areas[ids] = _group_areas(self.vertices[idx])
        return areas

    @cached_property
    def cell_centers(self) -> np.ndarray:
        out = np.empty((self.n_cells, 2))
        for ids, idx in self.groups.values():
            out[ids] = self.vertices[idx].mean(axis=1)
        return out

    @cached_property
    def vertex_cells(self) -> list[list[int]]:
        vc: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for cid, c in enumerate(self.cells):
            for v in c:
                vc[v].append(cid)
        return vc

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an ``(m, 2)`` array with ``a < b``."""
        e = set()
        for c in self.cells:
            for a, b in zip(c, c[1:] + c[:1]):
                e.add((min(a, b), max(a, b)))
        return np.array(sorted(e), dtype=np.int64).reshape(-1, 2)

    def with_vertices(self, vertices: np.ndarray) -> "PolygonMesh":
        """Same connectivity and boundary tags, new coordinates."""
        return PolygonMesh(vertices, self.cells, self.boundary_tags)


def _group_areas(coords: np.ndarray) -> np.ndarray:
    # coords: (c, n, 2)
    local = coords - coords.mean(axis=1, keepdims=True)
    nxt = np.roll(local, -1, axis=1)
    return 0.5 * np.sum(local[..., 0] * nxt[..., 1] - nxt[..., 0] * local[..., 1], axis=1)


def cell_area(mesh: PolygonMesh, cell_id: int) -> float:
    """Shoelace area of a cell."""
    return float(mesh.cell_areas[cell_id])


def arithmetic_center(mesh: PolygonMesh, cell_id: int) -> np.ndarray:
    """Mean of the cell's vertex coordinates."""
    return mesh.cell_coords(cell_id).mean(axis=0)


def validate_mesh(mesh: PolygonMesh, domain_area: float | None = None) -> list[Violation]:
    """Return every invariant violation; an empty list means the mesh is valid.

    Per cell at most one of ``orientation``, ``collinear``, ``nonconvex`` is
    reported, in that order of precedence. Overlaps are detected as directed
    edges used twice; coverage is checked only when ``domain_area`` is given.
    """
    out: list[Violation] = []
    v = mesh.vertices
    for cid, c in enumerate(mesh.cells):
        if len(set(c)) < 3 or len(set(c)) != len(c):
            out.append(Violation("too_few_vertices", cid, f"loop {c}"))
            continue
        if max(c) >= len(v) or min(c) < 0:
            out.append(Violation("index", cid, "vertex index out of range"))
            continue
        p = v[list(c)]
        p = p - p.mean(axis=0)
        area = 0.5 * float(np.sum(cross2(p, np.roll(p, -1, axis=0))))
        if area <= 0:
            out.append(Violation("orientation", cid, f"signed area {area:.3g}"))
            continue
        d = p[:, None, :] - p[None, :, :]
        diam2 = float((d**2).sum(axis=-1).max())
        turn = cross2(p - np.roll(p, 1, axis=0), np.roll(p, -1, axis=0) - p)
        tol = COLLINEAR_TOL * diam2
        if np.any(np.abs(turn) <= tol):
            k = int(np.argmin(np.abs(turn)))
            out.append(Violation("collinear", cid, f"at local vertex {k}"))
        elif np.any(turn < 0):
            k = int(np.argmin(turn))
            out.append(Violation("nonconvex", cid, f"reflex at local vertex {k}"))

    seen: dict[tuple[int, int], int] = {}
    for cid, c in enumerate(mesh.cells):
        for a, b in zip(c, c[1:] + c[:1]):
            if (a, b) in seen:
                out.append(Violation("overlap", cid, f"edge {a}->{b} also used by cell {seen[(a, b)]}"))
            else:
                seen[(a, b)] = cid

    if domain_area is not None and not any(x.kind == "orientation" for x in out):
        total = float(np.sum(mesh.cell_areas))
        if abs(total - domain_area) > 1e-10 * abs(domain_area):
            out.append(Violation("coverage", None, f"area sum {total!r} vs domain {domain_area!r}"))
    return out


@dataclass(frozen=True, eq=False)
class TriSubdivision:
    """Triangulation of every cell of a polygon mesh.

    Tri-vertex ``i < n_poly_vertices`` is polygon vertex ``i``; for scheme B the
    remaining points are cell centers, ``center_of[i]`` giving the cell id
    (``-1`` for polygon vertices).
    """

    tri_vertices: np.ndarray
    triangles: np.ndarray
    parent: np.ndarray
    scheme: str
    center_of: np.ndarray
    n_poly_vertices: int

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self, points: np.ndarray | None = None) -> np.ndarray:
        p = self.tri_vertices if points is None else points
        t = p[self.triangles]
        return 0.5 * cross2(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    def cell_triangle_ids(self) -> list[np.ndarray]:
        order = np.argsort(self.parent, kind="stable")
        bounds = np.searchsorted(self.parent[order], np.arange(self.parent.max() + 2))
        return [order[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1)]


def subdivision_connectivity(mesh: PolygonMesh, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """Triangle index triples and parent ids for a scheme, without coordinates."""
    scheme = scheme.upper()
    if scheme not in ("A", "B"):
        raise ValueError(f"unknown subdivision scheme {scheme!r}")
    tris, parents = [], []
    nv = mesh.n_vertices
    for n, (ids, idx) in mesh.groups.items():
        if scheme == "A":
            i = np.arange(1, n - 1)
            t = np.stack([np.repeat(idx[:, :1], n - 2, axis=1), idx[:, i], idx[:, i + 1]], axis=-1)
            parents.append(np.repeat(ids, n - 2))
        else:
            ctr = (nv + ids)[:, None].repeat(n, axis=1)
            t = np.stack([ctr, idx, np.roll(idx, -1, axis=1)], axis=-1)
            parents.append(np.repeat(ids, n))
        tris.append(t.reshape(-1, 3))
    tri = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    par = np.concatenate(parents) if parents else np.zeros(0, dtype=np.int64)
    return tri, par


def subdivide(mesh: PolygonMesh, scheme: str = "B") -> TriSubdivision:
    """Triangulate every cell.

    Scheme ``A`` fans each n-gon from the first vertex of its stored loop
    (n - 2 triangles); scheme ``B`` joins each edge to the arithmetic center
    of the cell (n triangles).
    """
    scheme = scheme.upper()
    tri, par = subdivision_connectivity(mesh, scheme)
    nv = mesh.n_vertices
    if scheme == "B":
        pts = np.vstack([mesh.vertices, mesh.cell_centers])
        center_of = np.concatenate([np.full(nv, -1), np.arange(mesh.n_cells)])
    else:
        pts = np.array(mesh.vertices)
        center_of = np.full(nv, -1)
    sub = TriSubdivision(pts, tri, par, scheme, center_of, nv)
    areas = sub.triangle_areas()
    if np.any(areas <= 0):
        bad = np.flatnonzero(areas <= 0)
        raise DegenerateElementError(f"{len(bad)} non-positive triangles, first in cell {int(par[bad[0]])}")
    return sub


def unit_square_grid(nx: int, ny: int | None = None) -> PolygonMesh:
    """Axis-aligned ``nx`` by ``ny`` squares tiling the unit square."""
    ny = nx if ny is None else ny
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = [(vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)) for j in range(ny) for i in range(nx)]
    return PolygonMesh(verts, cells)


# --- I/O -------------------------------------------------------------------


def collapse_short_edges(mesh: PolygonMesh, rel_tol: float = 0.1, max_passes: int = 10) -> tuple[PolygonMesh, int]:
    """Merge the end points of edges shorter than ``rel_tol * sqrt(mean cell area)``.

    Corners never move, a boundary vertex keeps its side, and a merge is
    skipped when any affected cell would stop being strictly convex.  Each
    pass merges disjoint patches shortest-edge first.  Returns the new mesh
    and the number of merges.
    """
    tol = rel_tol * float(np.sqrt(np.mean(mesh.cell_areas)))
    V = np.array(mesh.vertices, dtype=float)
    tags = np.array(mesh.boundary_tags)
    cells = [list(c) for c in mesh.cells]
    total = 0
    for _ in range(max_passes):
        vc: list[set[int]] = [set() for _ in range(len(V))]
        edges = set()
        for cid, c in enumerate(cells):
            for a, b in zip(c, c[1:] + c[:1]):
                vc[a].add(cid)
                edges.add((min(a, b), max(a, b)))
        E = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
        L = np.linalg.norm(V[E[:, 0]] - V[E[:, 1]], axis=1)
        busy: set[int] = set()
        merged = 0
        for k in np.argsort(L, kind="stable"):
            if L[k] >= tol:
                break
            a, b = (int(i) for i in E[k])
            ta, tb = tags[a], tags[b]
            if ta == CORNER and tb == CORNER:
                continue
            if ta != INTERIOR and tb != INTERIOR and CORNER not in (ta, tb) and ta != tb:
                continue
            if tb == CORNER or (tb != INTERIOR and ta == INTERIOR):
                a, b, ta, tb = b, a, tb, ta
            # keep a; it is the corner or boundary vertex when there is one
            if ta == CORNER or (ta != INTERIOR and tb == INTERIOR):
                p = V[a].copy()
            else:
                p = 0.5 * (V[a] + V[b])
            affected = vc[a] | vc[b]
            if busy & affected:
                continue
            trial = {}
            ok = True
            for cid in affected:
                ids = []
                for i in cells[cid]:
                    i = a if i == b else i
                    if not ids or ids[-1] != i:
                        ids.append(i)
                while len(ids) > 1 and ids[0] == ids[-1]:
                    ids.pop()
                pts = np.array([p if i == a else V[i] for i in ids])
                if len(ids) < 3 or not is_strictly_convex(pts, 1e-9):
                    ok = False
                    break
                trial[cid] = ids
            if not ok:
                continue
            for cid, ids in trial.items():
                cells[cid] = ids
            V[a] = p
            busy |= affected
            merged += 1
        total += merged
        if merged == 0:
            break
    used = np.unique(np.concatenate([np.array(c) for c in cells]))
    remap = -np.ones(len(V), dtype=np.int64)
    remap[used] = np.arange(len(used))
    new = PolygonMesh(V[used], [tuple(int(remap[i]) for i in c) for c in cells], tags[used])
    return new, total


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def mesh_to_json(mesh: PolygonMesh) -> str:
    lines = ["{", '  "dim": 2,', '  "vertices": [']
    vs = [f"    [{_fmt(x)}, {_fmt(y)}]" for x, y in mesh.vertices]
    lines.append(",\n".join(vs))
    lines.append("  ],")
    lines.append('  "cells": [')
    lines.append(",\n".join("    [" + ", ".join(str(i) for i in c) + "]" for c in mesh.cells))
    lines.append("  ],")
    tags = ", ".join(str(int(t)) for t in mesh.boundary_tags)
    lines.append(f'  "boundary": {{"tags": [{tags}]}}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def mesh_from_dict(doc: dict, validate: bool = True, domain_area: float | None = None) -> PolygonMesh:
    if not isinstance(doc, dict):
        raise MeshFormatError("mesh document must be a JSON object")
    for key in ("vertices", "cells"):
        if key not in doc:
            raise MeshFormatError(f"missing {key!r} key")
    if doc.get("dim", 2) != 2:
        raise MeshFormatError(f"unsupported dim {doc.get('dim')!r}")
    try:
        verts = np.array(doc["vertices"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise MeshFormatError(f"bad vertices: {exc}") from None
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise MeshFormatError("vertices must be [x, y] pairs")
    if not np.all(np.isfinite(verts)):
        raise MeshFormatError("non-finite vertex coordinate")
    cells = doc["cells"]
    if not isinstance(cells, list):
        raise MeshFormatError("cells must be an array")
    out_cells = []
    for k, c in enumerate(cells):
        if not isinstance(c, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in c):
            raise MeshFormatError(f"cell {k} must be an array of integers")
        if any(i < 0 or i >= len(verts) for i in c):
            raise MeshFormatError(f"cell {k} has a vertex index out of range")
        out_cells.append(tuple(c))
    tags = None
    boundary = doc.get("boundary")
    if boundary is not None:
        if not isinstance(boundary, dict) or "tags" not in boundary:
            raise MeshFormatError("boundary must be an object with a 'tags' array")
        tags = np.array(boundary["tags"], dtype=np.int8)
        if tags.shape != (len(verts),) or tags.min(initial=0) < 0 or tags.max(initial=0) > CORNER:
            raise MeshFormatError("boundary tags must be one tag in 0..5 per vertex")
    mesh = PolygonMesh(verts, out_cells, tags)
    if validate:
        problems = validate_mesh(mesh, domain_area=domain_area)
        if problems:
            raise MeshValidationError(problems)
    return mesh


def load_mesh(source: str | os.PathLike | IO[str], validate: bool = True, domain_area: float | None = None) -> PolygonMesh:
    """Read a mesh document from a path or text stream."""
    try:
        if hasattr(source, "read"):
            doc = json.load(source)  # type: ignore[arg-type]
        else:
            with open(source, encoding="utf-8") as fh:
                doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"invalid JSON: {exc}") from None
    return mesh_from_dict(doc, validate=validate, domain_area=domain_area)


def save_mesh(mesh: PolygonMesh, dest: str | os.PathLike | IO[str]) -> None:
    text = mesh_to_json(mesh)
    if hasattr(dest, "write"):
        dest.write(text)  # type: ignore[union-attr]
    else:
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)


def loads_mesh(text: str, **kw) -> PolygonMesh:
    return load_mesh(io.StringIO(text), **kw)


def polygon_mesh(vertices: Sequence[Sequence[float]], cells: Iterable[Sequence[int]], boundary_tags=None) -> PolygonMesh:
    """Convenience constructor from plain Python sequences."""
    return PolygonMesh(np.asarray(vertices, dtype=float), tuple(tuple(c) for c in cells), boundary_tags)
