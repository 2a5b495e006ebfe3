"""Moving-mesh PDE in the xi-formulation on subdivision-(b) triangulations.

The physical mesh x^(k) is frozen during an inner iteration while the
computational positions xi evolve by a gradient flow of the discrete
meshing energy I_h, starting from the fixed reference positions xi_hat.
The new physical mesh is x^(k+1) = Phi_h(xi_hat), where Phi_h is the
piecewise-linear map sending the final xi-mesh onto x^(k).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.spatial import cKDTree

from .mesh import BOTTOM, CORNER, INTERIOR, LEFT, RIGHT, TOP, PolygonMesh, TriSubdivision, subdivide
from .metric import SpdTensor2


class TanglingError(RuntimeError):
    """The computational or physical mesh lost orientation."""


def _det(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


def _inv(a: np.ndarray) -> np.ndarray:
    d = _det(a)
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 1, 1] = a[..., 0, 0]
    out[..., 0, 1] = -a[..., 0, 1]
    out[..., 1, 0] = -a[..., 1, 0]
    return out / d[..., None, None]


def _tr(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] + a[..., 1, 1]


def edge_matrices(tri_points: np.ndarray) -> np.ndarray:
    """E = [y1 - y0, y2 - y0] as columns, for (..., 3, 2) vertex arrays."""
    return np.stack([tri_points[..., 1, :] - tri_points[..., 0, :], tri_points[..., 2, :] - tri_points[..., 0, :]], axis=-1)


def _mat(M) -> np.ndarray:
    if isinstance(M, SpdTensor2):
        return M.matrix()
    return np.asarray(M, dtype=float)


def g_function(J, detJ, M) -> np.ndarray:
    """G = sqrt(det M)/3 tr(J M^-1 J^t)^2 + 4/3 sqrt(det M) (det J / sqrt(det M))^2."""
    J = np.asarray(J, dtype=float)
    M = _mat(M)
    Minv = _inv(M)
    sq = np.sqrt(_det(M))
    t = _tr(J @ Minv @ np.swapaxes(J, -1, -2))
    detJ = np.asarray(detJ, dtype=float)
    return sq * t * t / 3.0 + (4.0 / 3.0) * sq * (detJ / sq) ** 2


def g_derivatives(J, detJ, M) -> tuple[np.ndarray, np.ndarray]:
    """(dG/dJ, dG/d det J); dG/dJ is laid out as [dG/dJ_ji]."""
    J = np.asarray(J, dtype=float)
    M = _mat(M)
    Minv = _inv(M)
    sq = np.sqrt(_det(M))
    Jt = np.swapaxes(J, -1, -2)
    t = _tr(J @ Minv @ Jt)
    dJ = ((4.0 / 3.0) * sq * t)[..., None, None] * (Minv @ Jt)
    dd = (8.0 / 3.0) * np.asarray(detJ, dtype=float) / sq
    return dJ, dd


def element_velocities(Kc, K, M) -> np.ndarray:
    """Local velocities (v0, v1, v2) of computational triangles ``Kc``.

    ``Kc`` and ``K`` are (..., 3, 2) vertex arrays, ``M`` is (..., 2, 2).
    ``|K| * v_j`` is minus the gradient of ``|K| G`` with respect to the
    computational vertex ``j``.
    """
    Ec = edge_matrices(np.asarray(Kc, dtype=float))
    E = edge_matrices(np.asarray(K, dtype=float))
    dE = _det(E)
    if np.any(dE == 0):
        raise TanglingError("collapsed physical triangle")
    Einv = _inv(E)
    J = Ec @ Einv
    detJ = _det(Ec) / dE
    dGdJ, dGdd = g_derivatives(J, detJ, M)
    rows = -(Einv @ dGdJ) - (dGdd * detJ)[..., None, None] * _inv(Ec)
    v0 = -rows[..., 0, :] - rows[..., 1, :]
    return np.stack([v0, rows[..., 0, :], rows[..., 1, :]], axis=-2)


def apply_boundary_constraints(velocities: np.ndarray, boundary_tags: np.ndarray) -> np.ndarray:
    """Zero corner velocities and the normal component on each side."""
    v = np.array(velocities, dtype=float)
    tags = np.asarray(boundary_tags)
    v[tags == CORNER] = 0.0
    v[(tags == BOTTOM) | (tags == TOP), 1] = 0.0
    v[(tags == LEFT) | (tags == RIGHT), 0] = 0.0
    return v


def free_components(boundary_tags: np.ndarray) -> np.ndarray:
    """Boolean (N_v, 2) mask of coordinates the flow is allowed to change."""
    return apply_boundary_constraints(np.ones((len(boundary_tags), 2)), boundary_tags) != 0.0


@dataclass(eq=False)
class MovingMeshState:
    """Frozen physical subdivision, reference positions and per-triangle metric."""

    physical: TriSubdivision
    tags: np.ndarray  # boundary tags for every subdivision vertex
    reference: np.ndarray  # xi_hat, (N_v, 2)
    metric: np.ndarray  # M_K, (n_tri, 2, 2)
    tau: float = 1.0 / 300.0
    t_end: float = 1.0
    computational: np.ndarray | None = None

    def __post_init__(self):
        x = self.physical.tri_vertices
        nv = len(x)
        self.reference = np.asarray(self.reference, dtype=float)
        self.metric = np.asarray(self.metric, dtype=float)
        if self.reference.shape != (nv, 2):
            raise ValueError("reference positions must align with the physical subdivision vertices")
        if self.metric.shape != (self.physical.n_triangles, 2, 2):
            raise ValueError("need one metric tensor per triangle")
        if self.tau <= 0 or self.t_end <= 0:
            raise ValueError("tau and t_end must be positive")
        if self.computational is None:
            self.computational = self.reference.copy()
        tri = self.physical.triangles
        E = edge_matrices(x[tri])
        det = _det(E)
        if np.any(det <= 0):
            raise TanglingError("physical subdivision has non-positive triangles")
        self.areas = 0.5 * det
        self.E_inv = _inv(E)
        self.M_inv = _inv(self.metric)
        self.sqrt_det_m = np.sqrt(_det(self.metric))
        if not np.all(np.isfinite(self.sqrt_det_m)) or np.any(self.sqrt_det_m <= 0):
            raise ValueError("metric tensors must be SPD")
        # P_i from the vertex metric: mean of adjacent triangle tensors
        counts = np.bincount(tri.ravel(), minlength=nv).astype(float)
        acc = np.zeros((nv, 4))
        flat = np.repeat(self.metric.reshape(-1, 4), 3, axis=0)
        np.add.at(acc, tri.ravel(), flat)
        mv = (acc / counts[:, None]).reshape(nv, 2, 2)
        self.P = np.sqrt(_det(mv))
        ref_det = _det(edge_matrices(self.reference[tri]))
        if np.any(ref_det <= 0):
            raise TanglingError("reference subdivision has non-positive triangles")
        self.ref_det = ref_det

    @property
    def n_vertices(self) -> int:
        return len(self.reference)


def ref_positions(ref_mesh: PolygonMesh) -> np.ndarray:
    """Subdivision-(b) vertex positions of the reference mesh."""
    return np.vstack([ref_mesh.vertices, ref_mesh.cell_centers])


def _vertex_tensor_table(mesh: PolygonMesh, vertex_metric: np.ndarray) -> np.ndarray:
    t = np.asarray(getattr(vertex_metric, "tensors", vertex_metric), dtype=float)
    if t.shape != (mesh.n_vertices, 2, 2):
        raise ValueError("vertex metric must have one tensor per mesh vertex")
    centers = np.empty((mesh.n_cells, 2, 2))
    for ids, idx in mesh.groups.values():
        centers[ids] = t[idx].mean(axis=1)
    return np.concatenate([t, centers])


def build_state(mesh: PolygonMesh, ref_mesh: PolygonMesh, vertex_metric, tau: float = 1.0 / 300.0, t_end: float = 1.0) -> MovingMeshState:
    """State for one inner iteration on the current mesh ``mesh``.

    ``ref_mesh`` shares connectivity with ``mesh`` and supplies xi_hat.
    Triangle tensors are the mean of their three vertex tensors, a centre
    carrying the mean of its cell's vertex tensors.
    """
    if ref_mesh.cells != mesh.cells:
        raise ValueError("reference mesh must share connectivity with the mesh")
    sub = subdivide(mesh, "B")
    vt = _vertex_tensor_table(mesh, vertex_metric)
    MK = vt[sub.triangles].mean(axis=1)
    tags = np.concatenate([mesh.boundary_tags, np.full(mesh.n_cells, INTERIOR)])
    return MovingMeshState(sub, tags, ref_positions(ref_mesh), MK, tau, t_end)


def _jacobians(state: MovingMeshState, xi: np.ndarray):
    tri = state.physical.triangles
    Ec = edge_matrices(xi[tri])
    J = Ec @ state.E_inv
    detJ = _det(Ec) * 0.5 / state.areas
    return Ec, J, detJ


def ih_energy(state: MovingMeshState, xi: np.ndarray | None = None) -> float:
    """I_h = sum_K |K| G(J_K, det J_K, M_K)."""
    xi = state.computational if xi is None else np.asarray(xi, dtype=float)
    _, J, detJ = _jacobians(state, xi)
    sq = state.sqrt_det_m
    t = _tr(J @ state.M_inv @ np.swapaxes(J, -1, -2))
    G = sq * t * t / 3.0 + (4.0 / 3.0) * detJ**2 / sq
    return float(np.sum(state.areas * G))


def element_energy_gradient(state: MovingMeshState, xi: np.ndarray | None = None) -> np.ndarray:
    """sum_K |K| v^K_{i_K} at every vertex (equal to -dI_h/dxi)."""
    xi = state.computational if xi is None else np.asarray(xi, dtype=float)
    Ec, J, detJ = _jacobians(state, xi)
    sq = state.sqrt_det_m
    Jt = np.swapaxes(J, -1, -2)
    t = _tr(J @ state.M_inv @ Jt)
    dGdJ = ((4.0 / 3.0) * sq * t)[:, None, None] * (state.M_inv @ Jt)
    dGdd = (8.0 / 3.0) * detJ / sq
    rows = -(state.E_inv @ dGdJ) - (dGdd * detJ)[:, None, None] * _inv(Ec)
    rows = rows * state.areas[:, None, None]
    v0 = -rows[:, 0] - rows[:, 1]
    tri = state.physical.triangles
    nv = state.n_vertices
    out = np.empty((nv, 2))
    for k in range(2):
        out[:, k] = (
            np.bincount(tri[:, 0], v0[:, k], nv)
            + np.bincount(tri[:, 1], rows[:, 0, k], nv)
            + np.bincount(tri[:, 2], rows[:, 1, k], nv)
        )
    return out


def assemble_velocity(state: MovingMeshState, xi: np.ndarray | None = None, constrain: bool = True) -> np.ndarray:
    """dxi_i/dt = (P_i / tau) sum_K |K| v^K_{i_K}, then boundary constraints."""
    v = element_energy_gradient(state, xi) * (state.P / state.tau)[:, None]
    return apply_boundary_constraints(v, state.tags) if constrain else v


def computational_tangled(state: MovingMeshState, xi: np.ndarray) -> bool:
    return bool(np.any(_det(edge_matrices(xi[state.physical.triangles])) <= 0))


@dataclass
class OdeSettings:
    method: str = "BDF"
    rtol: float = 1e-6
    atol: float = 1e-9
    max_step: float = np.inf
    tangle_ratio: float = 1e-10


@dataclass
class AdaptConfig:
    outer_iters: int = 10
    tau: float = 1.0 / 300.0
    t_end: float = 1.0
    metric_norm: str = "L2"
    ode: OdeSettings = field(default_factory=OdeSettings)
    max_halvings: int = 4
    solver: str = "direct"

    def __post_init__(self):
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if self.tau <= 0 or self.t_end <= 0:
            raise ValueError("tau and t_end must be positive")
        if self.metric_norm.upper() not in ("L2", "H1"):
            raise ValueError("metric_norm must be L2 or H1")


@dataclass
class IntegrationResult:
    xi: np.ndarray
    t_final: float
    success: bool
    tangled: bool
    nfev: int
    njev: int
    n_steps: int
    energy: list[tuple[float, float]] = field(default_factory=list)
    message: str = ""


def _jac_sparsity(state: MovingMeshState, free: np.ndarray) -> sp.csr_matrix:
    tri = state.physical.triangles
    nv = state.n_vertices
    r = np.repeat(tri, 3, axis=1).ravel()
    c = np.tile(tri, (1, 3)).ravel()
    adj = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(nv, nv)).tocsr()
    full = sp.kron(adj, np.ones((2, 2)), format="csr")
    f = np.flatnonzero(free.ravel())
    S = full[f][:, f]
    S.data[:] = 1.0
    return S


def integrate(state: MovingMeshState, config: AdaptConfig | OdeSettings | None = None, monitor: bool = False) -> IntegrationResult:
    """Integrate the constrained flow from xi_hat to ``state.t_end``.

    A terminal event fires if any computational triangle shrinks below
    ``tangle_ratio`` of its reference area; the result is then flagged as
    tangled and carries the last state before inversion.
    """
    ode = config.ode if isinstance(config, AdaptConfig) else (config or OdeSettings())
    free = free_components(state.tags)
    fidx = free.ravel()
    base = state.reference.copy()

    def unpack(y):
        xi = base.copy()
        xi.reshape(-1)[fidx] = y
        return xi

    def rhs(t, y):
        v = assemble_velocity(state, unpack(y))
        return v.reshape(-1)[fidx]

    tri = state.physical.triangles

    def guard(t, y):
        xi = unpack(y)
        return float(np.min(_det(edge_matrices(xi[tri])) / state.ref_det)) - ode.tangle_ratio

    guard.terminal = True
    guard.direction = -1

    y0 = base.reshape(-1)[fidx].copy()
    kwargs = dict(method=ode.method, rtol=ode.rtol, atol=ode.atol, events=guard, max_step=ode.max_step)
    if ode.method in ("BDF", "Radau", "LSODA"):
        kwargs["jac_sparsity"] = _jac_sparsity(state, free)
    if not monitor:
        kwargs["t_eval"] = [state.t_end]
    sol = solve_ivp(rhs, (0.0, state.t_end), y0, **kwargs)
    tangled = sol.status == 1
    if tangled:
        y_last = sol.y_events[0][0]
        t_last = float(sol.t_events[0][0])
    elif sol.status == 0:
        y_last = sol.y[:, -1]
        t_last = float(sol.t[-1])
    else:
        y_last = sol.y[:, -1] if sol.y.size else y0
        t_last = float(sol.t[-1]) if sol.t.size else 0.0
    xi = unpack(y_last)
    energy = []
    if monitor:
        energy = [(float(t), ih_energy(state, unpack(y))) for t, y in zip(sol.t, sol.y.T)]
    state.computational = xi
    n_steps = len(sol.t) - 1 if monitor else -1
    return IntegrationResult(xi, t_last, sol.status == 0, bool(tangled), int(sol.nfev), int(sol.njev), n_steps, energy, sol.message)


def _locate(points: np.ndarray, tri_pts: np.ndarray, tol: float = 1e-12):
    """Containing triangle and barycentric coordinates for each point."""
    cent = tri_pts.mean(axis=1)
    tree = cKDTree(cent)
    T = edge_matrices(tri_pts)
    Tinv = _inv(T)
    n = len(points)
    found = np.full(n, -1)
    bary = np.zeros((n, 3))
    pending = np.arange(n)
    for k in (8, 32, 128):
        if len(pending) == 0:
            break
        k = min(k, len(tri_pts))
        _, cand = tree.query(points[pending], k=k)
        cand = cand.reshape(len(pending), k)
        local = np.einsum("pkij,pkj->pki", Tinv[cand], points[pending, None, :] - tri_pts[cand, 0])
        b = np.concatenate([1.0 - local.sum(-1, keepdims=True), local], axis=-1)
        ok = b.min(axis=-1) >= -tol
        hit = ok.any(axis=1)
        first = np.argmax(ok, axis=1)
        sel = pending[hit]
        found[sel] = cand[hit, first[hit]]
        bary[sel] = b[hit, first[hit]]
        pending = pending[~hit]
    if len(pending):
        # exhaustive pass; accept the least-negative coordinate within a hull tolerance
        local = np.einsum("kij,pkj->pki", Tinv, points[pending, None, :] - tri_pts[None, :, 0])
        b = np.concatenate([1.0 - local.sum(-1, keepdims=True), local], axis=-1)
        score = b.min(axis=-1)
        best = np.argmax(score, axis=1)
        worst = score[np.arange(len(pending)), best]
        if np.any(worst < -1e-9):
            raise TanglingError(f"{int(np.sum(worst < -1e-9))} reference points lie outside the computational mesh")
        found[pending] = best
        bb = np.clip(b[np.arange(len(pending)), best], 0.0, None)
        bary[pending] = bb / bb.sum(axis=1, keepdims=True)
    return found, bary


def _side_param(side: int) -> tuple[int, int, float]:
    """(tangential axis, normal axis, normal coordinate) of a square side."""
    return {BOTTOM: (0, 1, 0.0), TOP: (0, 1, 1.0), LEFT: (1, 0, 0.0), RIGHT: (1, 0, 1.0)}[side]


def interpolate_new_mesh(xi_final: np.ndarray, state: MovingMeshState) -> np.ndarray:
    """x^(k+1) = Phi_h(xi_hat) for every subdivision vertex.

    Interior points are located in the final xi-mesh and mapped with the
    barycentric coordinates; side points use the 1D map along their side.
    """
    xi = np.asarray(xi_final, dtype=float)
    x = state.physical.tri_vertices
    ref = state.reference
    tags = state.tags
    tri = state.physical.triangles
    if computational_tangled(state, xi):
        raise TanglingError("computational mesh is tangled")
    out = np.empty_like(ref)
    same = np.all(xi == ref, axis=1)
    interior = (tags == INTERIOR) & ~same
    if interior.any():
        tid, b = _locate(ref[interior], xi[tri])
        out[interior] = np.einsum("pj,pjk->pk", b, x[tri[tid]])
    out[same] = x[same]
    corner = tags == CORNER
    out[corner] = ref[corner]
    for side in (BOTTOM, RIGHT, TOP, LEFT):
        on = tags == side
        if not on.any():
            continue
        ax, nax, c = _side_param(side)
        chain = np.flatnonzero(on | (corner & (np.abs(ref[:, nax] - c) <= 1e-12)))
        order = np.argsort(xi[chain, ax], kind="stable")
        s_xi = xi[chain[order], ax]
        s_x = x[chain[order], ax]
        if np.any(np.diff(s_xi) <= 0) or np.any(np.diff(s_x) <= 0):
            raise TanglingError(f"boundary ordering lost on side {side}")
        out[on, ax] = np.interp(ref[on, ax], s_xi, s_x)
        out[on, nax] = c
        same_side = on & same
        out[same_side] = x[same_side]
    return out


def new_polygon_mesh(mesh: PolygonMesh, x_new: np.ndarray) -> PolygonMesh:
    """Keep polygon-vertex images; centres are recomputed from the new cells."""
    return mesh.with_vertices(x_new[: mesh.n_vertices])
