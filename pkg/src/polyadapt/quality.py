"""Anisotropic alignment and equidistribution measures for polygonal meshes.

Three families are provided:

* ``quality_approx1``: least-squares affine fit of each cell to a reference
  polygon through edge matrices.
* ``quality_approx2``: piecewise-linear barycentric mapping over a triangular
  subdivision (scheme A or B) of cell and reference.
* ``quality_approx3``: affine map from the reference n-gon obtained from the
  SVD of the centered vertex matrix.

The metric is a :class:`~polyadapt.metric.MetricField` (per-vertex tensors) or
``None`` for the identity.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mesh import PolygonMesh, subdivision_connectivity

AMGM_SLACK = 1e-12


@dataclass
class QualityReport:
    approx: int
    q_ali: np.ndarray
    q_eq: np.ndarray
    Q_ali: float
    Q_eq: float
    sigma_h: float
    l2_q_ali: float
    l2_q_eq: float
    areas: np.ndarray
    element_cell: np.ndarray
    element_n: np.ndarray
    flagged: list[int] = field(default_factory=list)
    scheme: str | None = None

    def summary(self) -> dict:
        return {
            "approx": self.approx,
            "scheme": self.scheme,
            "n_elements": int(len(self.q_ali)),
            "Q_ali": self.Q_ali,
            "Q_eq": self.Q_eq,
            "sigma_h": self.sigma_h,
            "l2_q_ali": self.l2_q_ali,
            "l2_q_eq": self.l2_q_eq,
            "flagged": [int(i) for i in self.flagged],
        }


def regular_ngon(n: int) -> np.ndarray:
    """Unit regular n-gon with vertex i at angle 2*pi*i/n, i = 1..n."""
    if n < 3:
        raise ValueError("n must be >= 3")
    t = 2.0 * np.pi * np.arange(1, n + 1) / n
    return np.column_stack([np.cos(t), np.sin(t)])


def _edge_matrices(p: np.ndarray) -> np.ndarray:
    # p: (..., n, 2) -> (..., 2, n-1) columns x_i - x_1
    return np.swapaxes(p[..., 1:, :] - p[..., :1, :], -1, -2)


def _affine_fit_batch(T: np.ndarray, TC: np.ndarray) -> np.ndarray:
    ET = _edge_matrices(T)
    EC = _edge_matrices(TC)
    ECt = np.swapaxes(EC, -1, -2)
    return ET @ ECt @ np.linalg.inv(EC @ ECt)


def affine_fit(T, TC) -> np.ndarray:
    """Least-squares Jacobian ``A_T = E_T E_C^t (E_C E_C^t)^-1`` of TC -> T."""
    T = np.asarray(T, dtype=float)
    TC = np.asarray(TC, dtype=float)
    if T.shape != TC.shape:
        raise ValueError(f"vertex count mismatch: {len(T)} vs {len(TC)}")
    EC = _edge_matrices(TC)
    s = np.linalg.svd(EC, compute_uv=False)
    if s[-1] <= 1e-12 * s[0]:
        raise ValueError("reference edge matrix is rank deficient")
    return _affine_fit_batch(T, TC)


def _det2(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


def _tr2(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] + a[..., 1, 1]


def _det_jmj(J: np.ndarray, M: np.ndarray) -> np.ndarray:
    # det(J^t M J) factorised to avoid cancellation for anisotropic J
    return _det2(J) ** 2 * _det2(M)


def _q_ali(J: np.ndarray, M: np.ndarray) -> np.ndarray:
    S = np.swapaxes(J, -1, -2) @ M @ J
    return _tr2(S) / (2.0 * np.sqrt(_det_jmj(J, M)))


def _vertex_tensors(mesh: PolygonMesh, metric) -> np.ndarray | None:
    if metric is None:
        return None
    t = np.asarray(getattr(metric, "tensors", metric), dtype=float)
    if t.shape != (mesh.n_vertices, 2, 2):
        raise ValueError(f"metric has {t.shape[0]} tensors for {mesh.n_vertices} vertices")
    return t


def _ref_coords(mesh: PolygonMesh, refs, ids: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n = idx.shape[1]
    if refs is None:
        return np.broadcast_to(regular_ngon(n), (len(ids), n, 2))
    if isinstance(refs, PolygonMesh):
        if refs.cells != mesh.cells:
            raise ValueError("reference mesh must share connectivity with the mesh")
        return refs.vertices[idx]
    out = np.empty((len(ids), n, 2))
    for k, cid in enumerate(ids):
        r = np.asarray(refs[cid], dtype=float)
        if r.shape != (n, 2):
            raise ValueError(f"reference for cell {cid} has {len(r)} vertices, cell has {n}")
        out[k] = r
    return out


def _l2(q: np.ndarray, areas: np.ndarray) -> float:
    return float(math.sqrt(np.sum(areas * q * q)))


def _finish(approx, q_ali, num, areas, element_cell, element_n, scheme=None, flagged=None) -> QualityReport:
    flagged = list(flagged or [])
    ok = np.ones(len(num), dtype=bool)
    ok[flagged] = False
    if flagged:
        warnings.warn(f"{len(flagged)} inverted element(s) excluded from sigma_h", RuntimeWarning, stacklevel=3)
    sigma = float(np.mean(num[ok])) if ok.any() else float("nan")
    q_eq = num / sigma
    return QualityReport(
        approx=approx,
        q_ali=q_ali,
        q_eq=q_eq,
        Q_ali=float(np.max(q_ali)),
        Q_eq=float(np.max(q_eq)),
        sigma_h=sigma,
        l2_q_ali=_l2(q_ali, areas),
        l2_q_eq=_l2(q_eq, areas),
        areas=areas,
        element_cell=element_cell,
        element_n=element_n,
        flagged=flagged,
        scheme=scheme,
    )


def quality_approx1(mesh: PolygonMesh, refs=None, metric=None, ref_rotation: str = "none") -> QualityReport:
    """Edge-matrix least-squares measures, one value per polygon.

    ``refs``: ``None`` (regular n-gons), a :class:`PolygonMesh` sharing the
    connectivity, or a per-cell sequence of reference polygons; vertex ``i`` of
    a cell corresponds to vertex ``i`` of its reference.
    """
    tensors = _vertex_tensors(mesh, metric)
    nc = mesh.n_cells
    q_ali = np.empty(nc)
    num = np.empty(nc)
    for n, (ids, idx) in mesh.groups.items():
        T = mesh.vertices[idx]
        TC = _ref_coords(mesh, refs, ids, idx)
        M = np.broadcast_to(np.eye(2), (len(ids), 2, 2)) if tensors is None else tensors[idx].mean(axis=1)
        if ref_rotation == "best":
            best_q = np.full(len(ids), np.inf)
            best_A = np.empty((len(ids), 2, 2))
            for s in range(n):
                A = _affine_fit_batch(T, np.roll(TC, -s, axis=1))
                q = _q_ali(A, M)
                better = q < best_q
                best_q[better] = q[better]
                best_A[better] = A[better]
            A = best_A
        elif ref_rotation == "none":
            A = _affine_fit_batch(T, TC)
        else:
            raise ValueError(f"unknown ref_rotation {ref_rotation!r}")
        q_ali[ids] = _q_ali(A, M)
        num[ids] = _det2(A) * np.sqrt(_det2(M))
    flagged = np.flatnonzero(num <= 0).tolist()
    n_per_cell = np.array([len(c) for c in mesh.cells])
    return _finish(1, q_ali, num, mesh.cell_areas.copy(), np.arange(nc), n_per_cell, flagged=flagged)


def _sub_triangles(P: np.ndarray, scheme: str) -> np.ndarray:
    """(c, n, 2) polygons -> (c, k, 3, 2) sub-triangles in subdivision order."""
    n = P.shape[1]
    if scheme == "A":
        i = np.arange(1, n - 1)
        base = np.repeat(P[:, :1, :], n - 2, axis=1)
        return np.stack([base, P[:, i, :], P[:, i + 1, :]], axis=2)
    ctr = np.repeat(P.mean(axis=1, keepdims=True), n, axis=1)
    return np.stack([ctr, P, np.roll(P, -1, axis=1)], axis=2)


def _tri_edges(t: np.ndarray) -> np.ndarray:
    # (..., 3, 2) -> (..., 2, 2) with columns p1 - p0, p2 - p0
    return np.stack([t[..., 1, :] - t[..., 0, :], t[..., 2, :] - t[..., 0, :]], axis=-1)


def quality_approx2(
    mesh: PolygonMesh, refs=None, metric=None, scheme: str = "B", ref_rotation: str = "none"
) -> QualityReport:
    """Piecewise-linear barycentric mapping measures, one value per sub-triangle.

    Elements are ordered as in :func:`polyadapt.mesh.subdivide` for the same
    scheme.
    """
    scheme = scheme.upper()
    if scheme not in ("A", "B"):
        raise ValueError(f"unknown subdivision scheme {scheme!r}")
    tensors = _vertex_tensors(mesh, metric)
    tri, parent = subdivision_connectivity(mesh, scheme)
    q_ali = np.empty(len(tri))
    num = np.empty(len(tri))
    areas = np.empty(len(tri))
    start = 0
    for n, (ids, idx) in mesh.groups.items():
        k = n if scheme == "B" else n - 2
        T = mesh.vertices[idx]
        TC = _ref_coords(mesh, refs, ids, idx)
        if tensors is None:
            Mk = np.broadcast_to(np.eye(2), (len(ids), k, 2, 2))
        else:
            tv = tensors[idx]  # (c, n, 2, 2)
            if scheme == "B":
                tc = np.repeat(tv.mean(axis=1, keepdims=True), n, axis=1)
                Mk = (tc + tv + np.roll(tv, -1, axis=1)) / 3.0
            else:
                i = np.arange(1, n - 1)
                Mk = (tv[:, :1] + tv[:, i] + tv[:, i + 1]) / 3.0
        tk = _sub_triangles(T, scheme)
        EK = _tri_edges(tk)

        def jac(tc_poly):
            return EK @ np.linalg.inv(_tri_edges(_sub_triangles(tc_poly, scheme)))

        if ref_rotation == "best":
            best_score = np.full(len(ids), np.inf)
            J = np.empty_like(EK)
            for s in range(n):
                Js = jac(np.roll(TC, -s, axis=1))
                score = _q_ali(Js, Mk).max(axis=1)
                better = score < best_score
                best_score[better] = score[better]
                J[better] = Js[better]
        elif ref_rotation == "none":
            J = jac(TC)
        else:
            raise ValueError(f"unknown ref_rotation {ref_rotation!r}")
        sl = slice(start, start + len(ids) * k)
        q_ali[sl] = _q_ali(J, Mk).ravel()
        num[sl] = (_det_jmj(J, Mk) * np.sqrt(_det2(Mk))).ravel()
        # inverted sub-triangle: the Jacobian itself has negative determinant
        detJ = _det2(J).ravel()
        num[sl] = np.where(detJ > 0, num[sl], -np.abs(num[sl]))
        areas[sl] = (0.5 * _det2(EK)).ravel()
        start += len(ids) * k
    flagged = np.flatnonzero(num <= 0).tolist()
    element_n = np.array([len(mesh.cells[p]) for p in parent])
    return _finish(2, q_ali, num, areas, parent, element_n, scheme=scheme, flagged=flagged)


@dataclass(frozen=True)
class SvdFrame:
    U: np.ndarray
    sigma1: float
    sigma2: float
    JT: np.ndarray
    KT_vertices: np.ndarray
    center: np.ndarray


def _svd_jacobians(P: np.ndarray):
    """(c, n, 2) -> U (c,2,2), sigmas (c,2) descending, J (c,2,2) = U S U^t."""
    B = P - P.mean(axis=1, keepdims=True)
    BBt = np.swapaxes(B, -1, -2) @ B  # = B_T B_T^t with B_T = B^t
    lam, U = np.linalg.eigh(BBt)
    lam = lam[:, ::-1]
    U = U[:, :, ::-1]
    s = np.sqrt(np.clip(lam, 0.0, None))
    J = U @ (s[:, :, None] * np.swapaxes(U, -1, -2))
    return U, s, J


def svd_reference(T) -> SvdFrame:
    """SVD frame of a polygon: ``T - x_T = J_T K_T`` with ``J_T`` SPD."""
    P = np.asarray(T, dtype=float)
    B = (P - P.mean(axis=0)).T
    U, s, _ = np.linalg.svd(B, full_matrices=False)
    if s[1] <= 1e-12 * s[0]:
        raise ValueError("degenerate polygon: second singular value vanishes")
    JT = U @ np.diag(s) @ U.T
    K = np.linalg.solve(JT, B).T
    return SvdFrame(U=U, sigma1=float(s[0]), sigma2=float(s[1]), JT=JT, KT_vertices=K, center=P.mean(axis=0))


def quality_approx3(mesh: PolygonMesh, metric=None) -> QualityReport:
    """SVD reference n-gon measures, one value per polygon."""
    tensors = _vertex_tensors(mesh, metric)
    nc = mesh.n_cells
    q_ali = np.empty(nc)
    num = np.empty(nc)
    for n, (ids, idx) in mesh.groups.items():
        _, s, J = _svd_jacobians(mesh.vertices[idx])
        if np.any(s[:, 1] <= 1e-12 * s[:, 0]):
            bad = ids[np.flatnonzero(s[:, 1] <= 1e-12 * s[:, 0])[0]]
            raise ValueError(f"degenerate cell {bad}: vanishing singular value")
        M = np.broadcast_to(np.eye(2), (len(ids), 2, 2)) if tensors is None else tensors[idx].mean(axis=1)
        q_ali[ids] = _q_ali(J, M)
        num[ids] = _det_jmj(J, M) * np.sqrt(_det2(M))
    n_per_cell = np.array([len(c) for c in mesh.cells])
    return _finish(3, q_ali, num, mesh.cell_areas.copy(), np.arange(nc), n_per_cell)


def q_norms(report: QualityReport) -> tuple[float, float]:
    """Area-weighted L2 norms of the piecewise-constant q fields."""
    return _l2(report.q_ali, report.areas), _l2(report.q_eq, report.areas)


def quality(mesh: PolygonMesh, approx: int, refs=None, metric=None, scheme: str = "B", ref_rotation: str = "none"):
    if approx == 1:
        return quality_approx1(mesh, refs, metric, ref_rotation=ref_rotation)
    if approx == 2:
        return quality_approx2(mesh, refs, metric, scheme=scheme, ref_rotation=ref_rotation)
    if approx == 3:
        return quality_approx3(mesh, metric)
    raise ValueError(f"approx must be 1, 2 or 3, got {approx!r}")


def write_report_csv(report: QualityReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "cell", "n", "q_ali", "q_eq"])
        for i, (c, n, a, e) in enumerate(zip(report.element_cell, report.element_n, report.q_ali, report.q_eq)):
            w.writerow([i, int(c), int(n), repr(float(a)), repr(float(e))])
        w.writerow(["summary", "", "", repr(report.Q_ali), repr(report.Q_eq)])


def read_cell_values(path, column: str) -> dict[int, float]:
    """Per-cell maximum of a q column from a report CSV."""
    out: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["element"] == "summary":
                continue
            c = int(row["cell"])
            v = float(row[column])
            out[c] = max(v, out.get(c, -math.inf))
    return out


def write_report_json(report: QualityReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2)
        fh.write("\n")


def reference_polygons(n_values: Sequence[int]) -> list[np.ndarray]:
    return [regular_ngon(n) for n in n_values]
