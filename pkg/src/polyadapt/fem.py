"""Wachspress finite elements for -Laplace(u) = f with Dirichlet data.

Cell integrals use symmetric triangle rules on the subdivision-(b) fan of
each polygon (degree 4 for assembly, degree 6 for error norms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import INTERIOR, PolygonMesh

# Symmetric Gaussian rules on the triangle: barycentric points, weights summing to 1.


def _orbit3(a: float, w: float):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)], [w] * 3


def _orbit6(a: float, b: float, w: float):
    c = 1.0 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


def _rule(*orbits):
    pts, ws = [], []
    for p, w in orbits:
        pts += p
        ws += w
    return np.array(pts), np.array(ws)


TRI_RULES: dict[int, tuple[np.ndarray, np.ndarray]] = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: _rule(_orbit3(1 / 6, 1 / 3)),
    4: _rule(
        _orbit3(0.445948490915965, 0.223381589678011),
        _orbit3(0.091576213509771, 0.109951743655322),
    ),
    6: _rule(
        _orbit3(0.249286745170910, 0.116786275726379),
        _orbit3(0.063089014491502, 0.050844906370207),
        _orbit6(0.053145049844817, 0.310352451033784, 0.082851075618374),
    ),
}


def _fan_points(P: np.ndarray, degree: int):
    """Quadrature points and weights on the centre fan of polygons.

    P: (c, n, 2). Returns points (c, n*q, 2) and weights (c, n*q).
    """
    bary, w = TRI_RULES[degree]
    ctr = P.mean(axis=1, keepdims=True)
    nxt = np.roll(P, -1, axis=1)
    a = ctr - P
    b = nxt - P
    # area of (ctr, P_i, P_{i+1}), positive for CCW polygons
    area = 0.5 * np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    pts = bary[None, None, :, 0, None] * ctr[:, :, None, :] + bary[None, None, :, 1, None] * P[:, :, None, :]
    pts = pts + bary[None, None, :, 2, None] * nxt[:, :, None, :]
    wts = area[:, :, None] * w[None, None, :]
    c, n = P.shape[:2]
    return pts.reshape(c, n * len(w), 2), wts.reshape(c, n * len(w))


def _wachspress_batch(P: np.ndarray, X: np.ndarray, grads: bool = True):
    """Wachspress coordinates of points X (c, m, 2) in polygons P (c, n, 2).

    Returns lam (c, m, n) and, if requested, grad (c, m, n, 2). Points must be
    strictly interior.
    """
    ctr = P.mean(axis=1, keepdims=True)
    h = np.sqrt(((P - ctr) ** 2).sum(-1).max(axis=1))[:, None, None]
    p = (P - ctr) / h
    x = (X - ctr) / h
    nxt = np.roll(p, -1, axis=1)
    prv = np.roll(p, 1, axis=1)
    d = nxt - p  # edge j: p_j -> p_{j+1}
    # C_i = area(p_{i-1}, p_i, p_{i+1})
    e1 = p - prv
    C = 0.5 * (e1[..., 0] * d[..., 1] - e1[..., 1] * d[..., 0])
    a = p[:, None, :, :] - x[:, :, None, :]
    b = nxt[:, None, :, :] - x[:, :, None, :]
    A = 0.5 * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])  # (c, m, n)
    if np.any(A <= 0):
        raise ValueError("Wachspress evaluation point not strictly inside its polygon")
    A_prev = np.roll(A, 1, axis=2)
    logw = np.log(C)[:, None, :] + np.log(A).sum(axis=2, keepdims=True) - np.log(A) - np.log(A_prev)
    logw -= logw.max(axis=2, keepdims=True)
    w = np.exp(logw)
    lam = w / w.sum(axis=2, keepdims=True)
    if not grads:
        return lam, None
    gA = 0.5 * np.stack([-d[..., 1], d[..., 0]], axis=-1)  # (c, n, 2)
    R = gA[:, None, :, :] / A[..., None]  # (c, m, n, 2)
    g = R.sum(axis=2, keepdims=True) - R - np.roll(R, 1, axis=2)
    mean_g = np.einsum("cmn,cmnk->cmk", lam, g)
    grad = lam[..., None] * (g - mean_g[:, :, None, :]) / h[..., None]
    return lam, grad


def wachspress_basis(polygon, points) -> tuple[np.ndarray, np.ndarray]:
    """Wachspress coordinates and gradients at strictly interior points.

    Returns ``(values (m, n), gradients (m, n, 2))``.
    """
    P = np.asarray(polygon, dtype=float)[None]
    X = np.atleast_2d(np.asarray(points, dtype=float))[None]
    lam, grad = _wachspress_batch(P, X)
    return lam[0], grad[0]


def wachspress_values(polygon, points, tol: float = 1e-12) -> np.ndarray:
    """Wachspress coordinates including the boundary limits.

    On an edge the coordinates reduce to linear interpolation between its two
    end vertices, which also gives the Kronecker property at the vertices.
    """
    P = np.asarray(polygon, dtype=float)
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(P)
    out = np.zeros((len(X), n))
    scale = float(np.sqrt(((P - P.mean(axis=0)) ** 2).sum(-1).max()))
    for k, x in enumerate(X):
        nxt = np.roll(P, -1, axis=0)
        a = P - x
        b = nxt - x
        A = 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        j = int(np.argmin(A))
        if A[j] < -tol * scale**2:
            raise ValueError(f"point {x} lies outside the polygon")
        if A[j] <= tol * scale**2:
            e = nxt[j] - P[j]
            t = float(np.clip(np.dot(x - P[j], e) / np.dot(e, e), 0.0, 1.0))
            out[k, j] += 1.0 - t
            out[k, (j + 1) % n] += t
        else:
            out[k] = wachspress_basis(P, x[None])[0][0]
    return out


# --- problems ----------------------------------------------------------------


@dataclass
class ProblemSpec:
    """-Laplace(u) = f in the unit square, u = g on the boundary."""

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    u_exact: Callable[[np.ndarray], np.ndarray] | None = None
    grad_exact: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "problem"


def _ex1_u(p):
    x, y = p[..., 0], p[..., 1]
    return np.tanh(40 * y - 80 * x**2) - np.tanh(40 * x - 80 * y**2)


def _ex1_grad(p):
    x, y = p[..., 0], p[..., 1]
    s1 = 1.0 / np.cosh(40 * y - 80 * x**2) ** 2
    s2 = 1.0 / np.cosh(40 * x - 80 * y**2) ** 2
    return np.stack([-160 * x * s1 - 40 * s2, 40 * s1 + 160 * y * s2], axis=-1)


def _ex1_f(p):
    x, y = p[..., 0], p[..., 1]
    t1 = np.tanh(40 * y - 80 * x**2)
    t2 = np.tanh(40 * x - 80 * y**2)
    s1 = 1.0 - t1**2
    s2 = 1.0 - t2**2
    lap1 = s1 * (-160.0 - 2.0 * t1 * (25600.0 * x**2 + 1600.0))
    lap2 = s2 * (-160.0 - 2.0 * t2 * (1600.0 + 25600.0 * y**2))
    return -(lap1 - lap2)


def _ex2_parts(p):
    x, y = p[..., 0], p[..., 1]
    r = np.hypot(x, y)
    # sqrt(0.5 (r - x)) and sqrt(0.5 (r + x)) without cancellation
    rp = np.sqrt(0.5 * np.maximum(r + x, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rm = np.where(x > 0, np.abs(y) / np.sqrt(2.0 * (r + x)), np.sqrt(0.5 * np.maximum(r - x, 0.0)))
    rm = np.where(r == 0, 0.0, rm)
    return x, y, r, rm, rp


def _ex2_u(p):
    x, y, r, rm, _ = _ex2_parts(p)
    return rm - 0.25 * r**2


def _ex2_grad(p):
    x, y, r, rm, rp = _ex2_parts(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        gx = -0.5 * rm / r - 0.5 * x
        gy = 0.5 * rp / r - 0.5 * y
    return np.stack([gx, gy], axis=-1)


def example1() -> ProblemSpec:
    """u = tanh(40y - 80x^2) - tanh(40x - 80y^2)."""
    return ProblemSpec(_ex1_f, _ex1_u, _ex1_u, _ex1_grad, "example1")


def example2() -> ProblemSpec:
    """Corner singularity u = sqrt(0.5 (r - x)) - r^2 / 4, so f = 1."""
    return ProblemSpec(lambda p: np.ones(p.shape[:-1]), _ex2_u, _ex2_u, _ex2_grad, "example2")


def smooth_example() -> ProblemSpec:
    """u = sin(pi x) sin(pi y)."""

    def u(p):
        return np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1])

    def grad(p):
        x, y = p[..., 0], p[..., 1]
        return np.pi * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y), np.sin(np.pi * x) * np.cos(np.pi * y)], -1)

    return ProblemSpec(lambda p: 2 * np.pi**2 * u(p), u, u, grad, "smooth")


def linear_example(a: float = 0.3, b: float = -1.2, c: float = 0.7) -> ProblemSpec:
    def u(p):
        return a + b * p[..., 0] + c * p[..., 1]

    def grad(p):
        return np.broadcast_to(np.array([b, c]), p.shape).copy()

    return ProblemSpec(lambda p: np.zeros(p.shape[:-1]), u, u, grad, "linear")


def zero_example() -> ProblemSpec:
    def z(p):
        return np.zeros(p.shape[:-1])

    return ProblemSpec(z, z, z, lambda p: np.zeros(p.shape), "zero")


EXAMPLES = {1: example1, 2: example2}


def fd_laplacian(u, p: np.ndarray, h) -> np.ndarray:
    """Fourth-order central-difference Laplacian at points p (m, 2)."""
    h = np.broadcast_to(np.asarray(h, dtype=float), p.shape[:1])[:, None]
    c = (-1.0 / 12, 4.0 / 3, -5.0 / 2, 4.0 / 3, -1.0 / 12)
    lap = 0.0
    for axis in (0, 1):
        e = np.zeros(2)
        e[axis] = 1.0
        acc = 0.0
        for k, ck in zip(range(-2, 3), c):
            acc = acc + ck * u(p + k * h * e)
        lap = lap + acc / h[:, 0] ** 2
    return lap


def check_source(problem: ProblemSpec, n_points: int = 1000, seed: int = 0, rel_tol: float = 1e-5) -> float:
    """Max relative mismatch between f and -FD-Laplacian(u_exact); raises above tol."""
    if problem.u_exact is None:
        raise ValueError("problem has no exact solution to check against")
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.02, 0.98, size=(n_points, 2))
    dist = np.minimum(np.linalg.norm(p, axis=1), np.min(np.minimum(p, 1 - p), axis=1))
    h = np.minimum(1e-4, 0.05 * dist)
    fd = -fd_laplacian(problem.u_exact, p, h)
    f = problem.f(p)
    err = float(np.max(np.abs(fd - f) / np.maximum(np.abs(f), 1.0)))
    if err > rel_tol:
        raise ValueError(f"source term inconsistent with exact solution: rel err {err:.3g}")
    return err


# --- assembly and solve --------------------------------------------------------


@dataclass
class PoissonSystem:
    mesh: PolygonMesh
    stiffness: sp.csr_matrix
    load: np.ndarray
    dirichlet: np.ndarray  # boolean mask over vertices
    dirichlet_values: np.ndarray
    A: sp.csr_matrix  # reduced (interior) matrix
    b: np.ndarray


@dataclass
class FemSolution:
    nodal_values: np.ndarray
    mesh: PolygonMesh
    assembly_stats: dict = field(default_factory=dict)


def _corrected_gradients(P: np.ndarray, W: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Shift quadrature gradients by a per-basis constant so that their cell
    integral equals the exact boundary integral of lambda_i * n.

    Wachspress gradients are rational, so a polynomial rule only approximates
    their integral; the shift restores the discrete divergence identity that
    the patch test needs, and keeps partition of unity and linear precision.
    """
    d = np.roll(P, -1, axis=1) - P
    nl = np.stack([d[..., 1], -d[..., 0]], axis=-1)  # outward normal * length
    exact = 0.5 * (nl + np.roll(nl, 1, axis=1))  # (c, n, 2)
    approx = np.einsum("cm,cmik->cik", W, grad)
    area = W.sum(axis=1)[:, None, None]
    return grad + ((exact - approx) / area)[:, None, :, :]


def assemble_poisson(
    mesh: PolygonMesh,
    problem: ProblemSpec,
    degree: int = 4,
    dirichlet: np.ndarray | None = None,
    gradient_correction: bool = True,
) -> PoissonSystem:
    """Stiffness and load with symmetric elimination of Dirichlet vertices."""
    nv = mesh.n_vertices
    rows, cols, vals = [], [], []
    F = np.zeros(nv)
    for n, (ids, idx) in mesh.groups.items():
        P = mesh.vertices[idx]
        X, W = _fan_points(P, degree)
        lam, grad = _wachspress_batch(P, X)
        if gradient_correction:
            grad = _corrected_gradients(P, W, grad)
        K = np.einsum("cm,cmik,cmjk->cij", W, grad, grad)
        fe = np.einsum("cm,cm,cmi->ci", W, problem.f(X), lam)
        rows.append(np.repeat(idx, n, axis=1).ravel())
        cols.append(np.tile(idx, (1, n)).ravel())
        vals.append(K.ravel())
        np.add.at(F, idx.ravel(), fe.ravel())
    Kg = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv, nv)).tocsr()
    Kg = 0.5 * (Kg + Kg.T)
    if dirichlet is None:
        dirichlet = mesh.boundary_tags != INTERIOR
    dirichlet = np.asarray(dirichlet, dtype=bool)
    gvals = np.zeros(nv)
    gvals[dirichlet] = problem.g(mesh.vertices[dirichlet])
    free = ~dirichlet
    A = Kg[free][:, free].tocsr()
    b = F[free] - Kg[free][:, dirichlet] @ gvals[dirichlet]
    return PoissonSystem(mesh, Kg, F, dirichlet, gvals, A, b)


class SolverError(RuntimeError):
    pass


def solve_linear(A, b, method: str = "direct", rtol: float = 1e-10, maxiter: int | None = None):
    """Solve an SPD system; returns ``(x, stats)``."""
    bnorm = float(np.linalg.norm(b))
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b) if A.shape[0] else np.zeros(0)
        iters = 0
    elif method == "cg":
        count = [0]

        def cb(_):
            count[0] += 1

        d = A.diagonal()
        Minv = spla.LinearOperator(A.shape, matvec=lambda r: r / d)
        x, info = spla.cg(A, b, rtol=rtol * 0.1, atol=0.0, maxiter=maxiter or 10 * A.shape[0], M=Minv, callback=cb)
        if info != 0:
            raise SolverError(f"CG did not converge (info={info})")
        iters = count[0]
    else:
        raise ValueError(f"unknown solver {method!r}")
    res = float(np.linalg.norm(A @ x - b)) / bnorm if bnorm > 0 else float(np.linalg.norm(A @ x - b))
    if res > rtol:
        raise SolverError(f"linear solve residual {res:.3g} exceeds {rtol:.1g}")
    return x, {"nnz": int(A.nnz), "iterations": iters, "residual": res, "method": method}


def solve(system: PoissonSystem, method: str = "direct", rtol: float = 1e-10) -> FemSolution:
    x, stats = solve_linear(system.A, system.b, method=method, rtol=rtol)
    u = system.dirichlet_values.copy()
    u[~system.dirichlet] = x
    return FemSolution(u, system.mesh, stats)


def solve_poisson(mesh: PolygonMesh, problem: ProblemSpec, method: str = "direct") -> FemSolution:
    return solve(assemble_poisson(mesh, problem), method=method)


def interpolate(mesh: PolygonMesh, func) -> np.ndarray:
    return np.asarray(func(mesh.vertices), dtype=float)


def error_norms(mesh: PolygonMesh, solution, problem: ProblemSpec, degree: int = 6) -> tuple[float, float]:
    """L2 norm and H1 semi-norm of ``u_exact - u_h``."""
    if problem.u_exact is None:
        raise ValueError("problem has no exact solution")
    u = getattr(solution, "nodal_values", solution)
    u = np.asarray(u, dtype=float)
    l2 = 0.0
    h1 = 0.0
    for n, (ids, idx) in mesh.groups.items():
        P = mesh.vertices[idx]
        for chunk in np.array_split(np.arange(len(ids)), max(1, len(ids) // 4000)):
            X, W = _fan_points(P[chunk], degree)
            need_grad = problem.grad_exact is not None
            lam, grad = _wachspress_batch(P[chunk], X, grads=need_grad)
            uc = u[idx[chunk]]
            uh = np.einsum("cmi,ci->cm", lam, uc)
            l2 += float(np.sum(W * (problem.u_exact(X) - uh) ** 2))
            if need_grad:
                guh = np.einsum("cmik,ci->cmk", grad, uc)
                h1 += float(np.sum(W * ((problem.grad_exact(X) - guh) ** 2).sum(-1)))
    return math.sqrt(l2), (math.sqrt(h1) if problem.grad_exact is not None else float("nan"))


def convergence_orders(Ns, errors) -> list[float | None]:
    """log(e1/e2)/log(N2/N1) between consecutive rows; ``None`` for the first."""
    out: list[float | None] = [None]
    for (n1, e1), (n2, e2) in zip(zip(Ns, errors), zip(Ns[1:], errors[1:])):
        out.append(math.log(e1 / e2) / math.log(n2 / n1))
    return out
