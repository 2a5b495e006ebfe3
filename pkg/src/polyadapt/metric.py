"""SPD metric tensors: averaging, Hessian recovery and adaptation metrics."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mesh import PolygonMesh, subdivide

SPD_TOL = 1e-14


@dataclass(frozen=True)
class SpdTensor2:
    m11: float
    m12: float
    m22: float

    def __post_init__(self):
        tr = self.m11 + self.m22
        if not (self.m11 > 0 and self.m11 * self.m22 - self.m12**2 > SPD_TOL * tr * tr):
            raise ValueError(f"tensor {self} is not symmetric positive definite")

    @classmethod
    def from_matrix(cls, a) -> "SpdTensor2":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0, 0]), float(0.5 * (a[0, 1] + a[1, 0])), float(a[1, 1]))

    def matrix(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m12, self.m22]])

    def det(self) -> float:
        return self.m11 * self.m22 - self.m12**2


def is_spd(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    det = t[..., 0, 0] * t[..., 1, 1] - t[..., 0, 1] * t[..., 1, 0]
    tr = t[..., 0, 0] + t[..., 1, 1]
    sym = np.abs(t[..., 0, 1] - t[..., 1, 0]) <= 1e-12 * np.abs(tr)
    return (t[..., 0, 0] > 0) & (det > SPD_TOL * tr * tr) & sym


class MetricMismatchError(ValueError):
    """Metric field does not line up with the mesh it is applied to."""


class MetricField:
    """Per-vertex SPD tensors aligned with a mesh's vertices."""

    PROVENANCE = ("identity", "analytic", "recovered-L2", "recovered-H1")

    def __init__(self, tensors, provenance: str = "analytic", check: bool = True):
        t = np.array(tensors, dtype=float)
        if t.ndim == 2 and t.shape[1] == 3:
            t = np.stack([np.stack([t[:, 0], t[:, 1]], -1), np.stack([t[:, 1], t[:, 2]], -1)], axis=1)
        if t.ndim != 3 or t.shape[1:] != (2, 2):
            raise ValueError("tensors must be (n, 2, 2) matrices or (n, 3) [m11, m12, m22] rows")
        if provenance not in self.PROVENANCE:
            raise ValueError(f"unknown provenance {provenance!r}")
        if check and not np.all(is_spd(t)):
            bad = int(np.flatnonzero(~is_spd(t))[0])
            raise ValueError(f"tensor {bad} is not SPD: {t[bad].tolist()}")
        t.setflags(write=False)
        self.tensors = t
        self.provenance = provenance

    def __len__(self) -> int:
        return len(self.tensors)

    def __getitem__(self, i) -> SpdTensor2:
        return SpdTensor2.from_matrix(self.tensors[i])

    def scaled(self, c: float) -> "MetricField":
        return MetricField(c * self.tensors, self.provenance)

    @classmethod
    def identity(cls, n: int) -> "MetricField":
        return cls(np.broadcast_to(np.eye(2), (n, 2, 2)), "identity")

    @classmethod
    def from_function(cls, mesh: PolygonMesh, func) -> "MetricField":
        """``func(points (m, 2)) -> (m, 2, 2)`` evaluated at the mesh vertices."""
        return cls(func(mesh.vertices), "analytic")

    def check_mesh(self, mesh: PolygonMesh) -> None:
        if len(self) != mesh.n_vertices:
            raise MetricMismatchError(f"metric has {len(self)} tensors but mesh has {mesh.n_vertices} vertices")


def average_metric(field, vertex_ids: Sequence[int]) -> SpdTensor2:
    """Element average of the metric: mean of the element's vertex tensors."""
    t = np.asarray(getattr(field, "tensors", field), dtype=float)
    return SpdTensor2.from_matrix(t[list(vertex_ids)].mean(axis=0))


def abs_eig(t: np.ndarray) -> np.ndarray:
    """Replace eigenvalues of symmetric 2x2 tensors by their absolute values."""
    t = np.asarray(t, dtype=float)
    lam, V = np.linalg.eigh(t)
    return (V * np.abs(lam)[..., None, :]) @ np.swapaxes(V, -1, -2)


def _sym_eig2(t: np.ndarray):
    """Closed-form eigenvalues (ascending) of symmetric 2x2 tensors."""
    a = t[..., 0, 0]
    b = 0.5 * (t[..., 0, 1] + t[..., 1, 0])
    d = t[..., 1, 1]
    m = 0.5 * (a + d)
    r = np.hypot(0.5 * (a - d), b)
    return m - r, m + r


# --- Hessian recovery -------------------------------------------------------


def _neighbourhoods(mesh: PolygonMesh) -> tuple[list[np.ndarray], list[np.ndarray]]:
    vc = mesh.vertex_cells
    one = []
    for v in range(mesh.n_vertices):
        s = {v}
        for c in vc[v]:
            s.update(mesh.cells[c])
        one.append(np.array(sorted(s)))
    two = []
    for v in range(mesh.n_vertices):
        s = set()
        for w in one[v]:
            s.update(one[w].tolist())
        two.append(np.array(sorted(s)))
    return one, two


def _fit_batch(pts: np.ndarray, vals: np.ndarray, centres: np.ndarray):
    """Least-squares quadratics for equally sized neighbourhoods.

    pts (b, k, 2), vals (b, k), centres (b, 2). Returns Hessians (b, 2, 2) and
    a rank-deficiency mask.
    """
    d = pts - centres[:, None, :]
    h = np.sqrt((d**2).sum(-1).max(axis=1))
    h = np.where(h > 0, h, 1.0)
    X = d[..., 0] / h[:, None]
    Y = d[..., 1] / h[:, None]
    V = np.stack([np.ones_like(X), X, Y, X * X, X * Y, Y * Y], axis=-1)
    U, s, Wt = np.linalg.svd(V, full_matrices=False)
    deficient = s[:, -1] <= 1e-8 * s[:, 0]
    s_inv = np.where(s > 1e-12 * s[:, :1], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    coef = np.einsum("bji,bj,bkj,bk->bi", Wt, s_inv, U, vals)
    ha = 2.0 * coef[:, 3] / h**2
    hb = coef[:, 4] / h**2
    hc = 2.0 * coef[:, 5] / h**2
    H = np.stack([np.stack([ha, hb], -1), np.stack([hb, hc], -1)], axis=1)
    return H, deficient


def recover_hessian(mesh: PolygonMesh, nodal_values) -> np.ndarray:
    """Per-vertex Hessians from local least-squares quadratic fits.

    The neighbourhood of a vertex is every vertex sharing a cell with it;
    vertices with fewer than 6 samples or a rank-deficient fit use the
    two-ring instead. Exact for global quadratics.
    """
    u = np.asarray(nodal_values, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValueError("need one nodal value per vertex")
    one, two = _neighbourhoods(mesh)
    H = np.empty((mesh.n_vertices, 2, 2))
    pending = [v for v in range(mesh.n_vertices) if len(one[v]) >= 6]
    retry = [v for v in range(mesh.n_vertices) if len(one[v]) < 6]

    def run(vs, hoods):
        flagged = []
        by_k: dict[int, list[int]] = {}
        for v in vs:
            by_k.setdefault(len(hoods[v]), []).append(v)
        for k, group in by_k.items():
            g = np.array(group)
            idx = np.stack([hoods[v] for v in group])
            Hg, bad = _fit_batch(mesh.vertices[idx], u[idx], mesh.vertices[g])
            H[g] = Hg
            flagged.extend(g[bad].tolist())
        return flagged

    retry += run(pending, one)
    still = run(retry, two)
    if still:
        warnings.warn(f"{len(still)} vertices have rank-deficient Hessian fits", RuntimeWarning, stacklevel=2)
    return H


# --- adaptation metrics -----------------------------------------------------


@dataclass(frozen=True)
class AlphaResult:
    alpha: float
    uniform: bool
    iterations: int
    residual: float


def _triangle_average_tensors(mesh: PolygonMesh, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per subdivision-(b) triangle: mean tensor of its three vertices and area."""
    sub = subdivide(mesh, "B")
    centre_t = np.empty((mesh.n_cells, 2, 2))
    for ids, idx in mesh.groups.values():
        centre_t[ids] = t[idx].mean(axis=1)
    allt = np.concatenate([t, centre_t])
    return allt[sub.triangles].mean(axis=1), sub.triangle_areas()


def _det_pow(t: np.ndarray, p: float) -> np.ndarray:
    det = t[..., 0, 0] * t[..., 1, 1] - t[..., 0, 1] * t[..., 1, 0]
    return np.clip(det, 0.0, None) ** p


def solve_alpha(hessians, mesh: PolygonMesh, tol: float = 1e-10, max_iter: int = 200) -> AlphaResult:
    """Regularisation parameter for the adaptation metric.

    Solves ``int det(alpha I + |H|)^(1/3) = 2 int det(|H|)^(1/3)`` by
    bisection. Integrals use the midpoint rule on subdivision-(b) triangles
    with vertex-averaged tensors. If ``det |H|`` integrates to zero the
    equation has no positive root: ``alpha`` falls back to the mean of
    ``trace|H| / 2`` (or 1 for an all-zero field) and ``uniform`` is set.
    """
    absH = abs_eig(np.asarray(hessians, dtype=float))
    tk, area = _triangle_average_tensors(mesh, absH)
    rhs = 2.0 * float(np.sum(area * _det_pow(tk, 1.0 / 3.0)))
    scale = float(np.sum(area * 0.5 * (tk[:, 0, 0] + tk[:, 1, 1])) / np.sum(area))
    if rhs <= 1e-14 * max(scale, 1e-300) ** (2.0 / 3.0) * float(np.sum(area)):
        alpha = scale if scale > 0 else 1.0
        return AlphaResult(alpha, True, 0, float("nan"))

    eye = np.eye(2)

    def lhs(a):
        return float(np.sum(area * _det_pow(a * eye + tk, 1.0 / 3.0)))

    lo, hi = 0.0, max(scale, 1e-300)
    while lhs(hi) < rhs:
        lo, hi = hi, 2.0 * hi
    it = 0
    mid = hi
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        r = lhs(mid) - rhs
        if abs(r) <= tol * rhs:
            break
        if r < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * hi:
            break
    return AlphaResult(mid, False, it, abs(lhs(mid) - rhs) / rhs)


def build_metric(hessians, alpha: float, norm: str = "L2") -> MetricField:
    """Adaptation metric from recovered Hessians.

    L2: ``det(A)^(-1/6) A``; H1: ``det(A)^(-1/4) ||A||^(1/2) A`` with
    ``A = alpha I + |H|`` and ``||.||`` the spectral norm.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    A = alpha * np.eye(2) + abs_eig(np.asarray(hessians, dtype=float))
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    norm = norm.upper()
    if norm == "L2":
        M = det[:, None, None] ** (-1.0 / 6.0) * A
        prov = "recovered-L2"
    elif norm == "H1":
        _, lam_max = _sym_eig2(A)
        M = (det ** (-0.25) * np.sqrt(lam_max))[:, None, None] * A
        prov = "recovered-H1"
    else:
        raise ValueError(f"norm must be L2 or H1, got {norm!r}")
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    return MetricField(M, prov)


def adaptation_metric(mesh: PolygonMesh, nodal_values, norm: str = "L2") -> tuple[MetricField, AlphaResult]:
    H = recover_hessian(mesh, nodal_values)
    ar = solve_alpha(H, mesh)
    return build_metric(H, ar.alpha, norm), ar


# --- I/O -------------------------------------------------------------------


def save_metric(field: MetricField, path) -> None:
    t = field.tensors
    rows = [[float(a[0, 0]), float(a[0, 1]), float(a[1, 1])] for a in t]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"provenance": field.provenance, "tensors": rows}, fh)
        fh.write("\n")


def load_metric(path, mesh: PolygonMesh | None = None) -> MetricField:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "tensors" not in doc:
        raise ValueError("metric document needs a 'tensors' array")
    rows = np.array(doc["tensors"], dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 3:
        raise ValueError("tensors must be [m11, m12, m22] rows")
    field = MetricField(rows, doc.get("provenance", "analytic"))
    if mesh is not None:
        field.check_mesh(mesh)
    return field
