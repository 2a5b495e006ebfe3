import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from polyadapt.mesh import BOTTOM, CORNER, INTERIOR, LEFT, RIGHT, TOP, polygon_mesh, subdivide, unit_square_grid
from polyadapt.mmpde import (
    MovingMeshState,
    OdeSettings,
    apply_boundary_constraints,
    assemble_velocity,
    build_state,
    edge_matrices,
    element_energy_gradient,
    element_velocities,
    g_derivatives,
    g_function,
    ih_energy,
    integrate,
    interpolate_new_mesh,
)

from conftest import cvt_mesh, random_spd


def identity_metric(mesh):
    return np.broadcast_to(np.eye(2), (mesh.n_vertices, 2, 2))


@pytest.mark.parametrize(
    "J, M, G",
    [
        (np.eye(2), np.eye(2), 8 / 3),
        (np.diag([2.0, 1.0]), np.eye(2), 41 / 3),
        (np.eye(2), np.diag([4.0, 1.0]), 41 / 24),
    ],
)
def test_g_function_values(J, M, G):
    assert g_function(J, np.linalg.det(J), M) == pytest.approx(G, rel=1e-14)


def test_g_derivative_values():
    dJ, dd = g_derivatives(np.eye(2), 1.0, np.eye(2))
    assert np.allclose(dJ, 8 / 3 * np.eye(2)) and dd == pytest.approx(8 / 3)
    dJ, dd = g_derivatives(np.diag([2.0, 1.0]), 2.0, np.eye(2))
    assert np.allclose(dJ, np.diag([40 / 3, 20 / 3])) and dd == pytest.approx(16 / 3)


@given(st.integers(0, 10_000))
def test_g_derivatives_finite_differences(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(2, 2))
    d = rng.normal()
    M = random_spd(rng, 1, spread=1.0)[0]
    dJ, dd = g_derivatives(J, d, M)
    h = 1e-6 * max(1.0, np.abs(J).max())
    fd = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            e = np.zeros((2, 2))
            e[i, j] = h
            # layout [dG/dJ_ji]
            fd[j, i] = (g_function(J + e, d, M) - g_function(J - e, d, M)) / (2 * h)
    hd = 1e-6 * max(1.0, abs(d))
    fdd = (g_function(J, d + hd, M) - g_function(J, d - hd, M)) / (2 * hd)
    assert np.allclose(dJ, fd, rtol=1e-6, atol=1e-6 * np.abs(dJ).max())
    assert dd == pytest.approx(fdd, rel=1e-6, abs=1e-9)


def _random_triangle(rng):
    while True:
        t = rng.uniform(-1, 1, (3, 2))
        if np.linalg.det(edge_matrices(t)) > 0.2:
            return t


def test_element_velocity_identity_case():
    rng = np.random.default_rng(0)
    K = _random_triangle(rng)
    v = element_velocities(K, K, np.eye(2))
    Einv = np.linalg.inv(edge_matrices(K))
    assert np.allclose(v[1:], -(16 / 3) * Einv)
    assert np.allclose(v.sum(axis=0), 0.0, atol=1e-14)


@given(st.integers(0, 10_000))
def test_element_velocity_is_negative_energy_gradient(seed):
    rng = np.random.default_rng(seed)
    K = _random_triangle(rng)
    Kc = K + 0.2 * rng.normal(size=(3, 2))
    if np.linalg.det(edge_matrices(Kc)) <= 0.05:
        return
    M = random_spd(rng, 1, spread=1.0)[0]
    area = 0.5 * np.linalg.det(edge_matrices(K))
    Einv = np.linalg.inv(edge_matrices(K))

    def energy(kc):
        Ec = edge_matrices(kc)
        J = Ec @ Einv
        return area * g_function(J, np.linalg.det(J), M)

    v = element_velocities(Kc, K, M)
    assert np.abs(v.sum(axis=0)).max() <= 1e-12 * np.abs(v).max()
    h = 1e-6
    fd = np.zeros((3, 2))
    for j in range(3):
        for k in range(2):
            p, m = Kc.copy(), Kc.copy()
            p[j, k] += h
            m[j, k] -= h
            fd[j, k] = -(energy(p) - energy(m)) / (2 * h)
    assert np.allclose(area * v, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


def test_boundary_constraints():
    v = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 1.0], [2.0, 3.0]])
    tags = np.array([CORNER, BOTTOM, TOP, LEFT, RIGHT, INTERIOR])
    out = apply_boundary_constraints(v, tags)
    assert np.array_equal(out, [[0, 0], [3, 0], [5, 0], [0, 8], [0, 1], [2, 3]])


def test_energy_identity_and_scaling():
    m = cvt_mesh(8)
    st0 = build_state(m, m, identity_metric(m))
    assert ih_energy(st0) == pytest.approx(8 / 3, rel=1e-12)
    assert ih_energy(st0, 2 * st0.reference) == pytest.approx(128 / 3, rel=1e-12)


def _random_state(seed, n=6, eps=0.002):
    rng = np.random.default_rng(seed)
    m = cvt_mesh(n, 30, seed % 3)
    M = random_spd(rng, m.n_vertices, spread=1.5)
    st = build_state(m, m, M)
    xi = st.reference.copy()
    inner = st.tags == INTERIOR
    xi[inner] += eps * rng.normal(size=(inner.sum(), 2))
    st.computational = xi
    return st


@pytest.mark.parametrize("seed", range(5))
def test_velocity_matches_energy_gradient(seed):
    st = _random_state(seed)
    xi = st.computational
    g = element_energy_gradient(st, xi)
    inner = np.flatnonzero(st.tags == INTERIOR)
    h = 1e-6
    fd = np.zeros((len(inner), 2))
    for r, i in enumerate(inner):
        for k in range(2):
            p, m = xi.copy(), xi.copy()
            p[i, k] += h
            m[i, k] -= h
            fd[r, k] = -(ih_energy(st, p) - ih_energy(st, m)) / (2 * h)
    assert np.allclose(g[inner], fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())
    v = assemble_velocity(st, xi)
    assert np.allclose(v[inner], (st.P / st.tau)[inner, None] * g[inner], rtol=1e-14)


def test_velocity_scaling_invariance_and_tau():
    st = _random_state(7)
    m = cvt_mesh(6, 30, 7 % 3)
    v = assemble_velocity(st, st.computational)
    st7 = MovingMeshState(st.physical, st.tags, st.reference, 7.0 * st.metric, st.tau, st.t_end)
    v7 = assemble_velocity(st7, st.computational)
    assert np.abs(v7 - v).max() <= 1e-10 * np.abs(v).max()
    half = MovingMeshState(st.physical, st.tags, st.reference, st.metric, st.tau / 2, st.t_end)
    assert np.allclose(assemble_velocity(half, st.computational), 2 * v, rtol=1e-15, atol=0)
    assert m.n_vertices > 0


def test_hexagon_patch_center_velocity_zero():
    pts = np.array([[0.0, 0.0]] + [[math.cos(k * math.pi / 3), math.sin(k * math.pi / 3)] for k in range(6)])
    tris = np.array([[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)])
    from polyadapt.mesh import TriSubdivision

    sub = TriSubdivision(pts, tris, np.zeros(6, int), "B", np.full(7, -1), 7)
    tags = np.array([INTERIOR] + [CORNER] * 6)
    st = MovingMeshState(sub, tags, pts, np.broadcast_to(np.eye(2), (6, 2, 2)))
    v = assemble_velocity(st, pts, constrain=False)
    assert np.abs(v[0]).max() <= 1e-12


def test_steady_state_identity_metric():
    m = unit_square_grid(4)
    st = build_state(m, m, identity_metric(m))
    res = integrate(st)
    assert res.success and not res.tangled
    assert np.abs(res.xi - st.reference).max() < 1e-6 * 0.25


def test_integration_monotone_and_constrained():
    st = _random_state(3, n=8, eps=0.0)
    res = integrate(st, OdeSettings(), monitor=True)
    assert res.success and not res.tangled
    E = np.array([e for _, e in res.energy])
    assert np.all(np.diff(E) <= 1e-10 * E[0])
    xi = res.xi
    r = st.reference
    for tag, k in ((BOTTOM, 1), (TOP, 1), (LEFT, 0), (RIGHT, 0)):
        on = st.tags == tag
        assert np.array_equal(xi[on, k], r[on, k])
    assert np.array_equal(xi[st.tags == CORNER], r[st.tags == CORNER])
    # doubling the horizon never raises the final energy
    long = MovingMeshState(st.physical, st.tags, st.reference, st.metric, st.tau, 2 * st.t_end)
    res2 = integrate(long)
    assert ih_energy(long, res2.xi) <= E[-1] * (1 + 1e-10)


def test_interpolation_identity_is_exact():
    st = _random_state(1)
    x = interpolate_new_mesh(st.reference, st)
    assert np.array_equal(x, st.physical.tri_vertices)


def test_interpolation_reproduces_affine_maps():
    m = cvt_mesh(8)
    st = build_state(m, m, identity_metric(m))
    L = np.array([[1.05, 0.02], [-0.03, 1.04]])
    b = np.array([-0.02, -0.015])
    x = st.physical.tri_vertices
    xi = x @ L.T + b  # physical = L^-1 (xi - b)
    out = interpolate_new_mesh(xi, st)
    inner = st.tags == INTERIOR
    expect = (st.reference[inner] - b) @ np.linalg.inv(L).T
    assert np.abs(out[inner] - expect).max() <= 1e-12


def test_interpolation_is_convex_combination():
    rng = np.random.default_rng(2)
    m = cvt_mesh(8)
    st = build_state(m, m, identity_metric(m))
    xi = st.reference.copy()
    inner = st.tags == INTERIOR
    xi[inner] += 1e-4 * rng.normal(size=(inner.sum(), 2))
    out = interpolate_new_mesh(xi, st)
    x = st.physical.tri_vertices
    assert np.all((out >= -1e-15) & (out <= 1 + 1e-15))
    # displacement is bounded by the perturbation scale times local stretch
    assert np.abs(out - x).max() < 1e-2
    for tag, k, c in ((BOTTOM, 1, 0.0), (TOP, 1, 1.0), (LEFT, 0, 0.0), (RIGHT, 0, 1.0)):
        assert np.all(out[st.tags == tag, k] == c)
