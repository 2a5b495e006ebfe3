import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from polyadapt.mesh import unit_square_grid
from polyadapt.metric import (
    MetricField,
    MetricMismatchError,
    SpdTensor2,
    abs_eig,
    adaptation_metric,
    average_metric,
    build_metric,
    is_spd,
    load_metric,
    recover_hessian,
    save_metric,
    solve_alpha,
)

from conftest import cvt_mesh, random_spd

ALPHA_ID = 2**1.5 - 1


def test_spd_tensor():
    t = SpdTensor2(2.0, 0.5, 1.0)
    assert t.det() == pytest.approx(1.75)
    assert np.array_equal(t.matrix(), [[2.0, 0.5], [0.5, 1.0]])
    with pytest.raises(ValueError):
        SpdTensor2(1.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        SpdTensor2(-1.0, 0.0, 1.0)


def test_metric_field_shapes():
    f = MetricField([[1.0, 0.0, 2.0], [3.0, 1.0, 1.0]])
    assert f.tensors.shape == (2, 2, 2)
    assert f[1].m12 == 1.0
    with pytest.raises(ValueError):
        MetricField([[1.0, 2.0, 1.0]])
    with pytest.raises(ValueError):
        MetricField(np.eye(2)[None], provenance="made-up")


def test_average_metric():
    I = MetricField.identity(5)
    assert np.allclose(average_metric(I, [0, 2, 4]).matrix(), np.eye(2))
    f = MetricField(np.stack([np.eye(2), np.diag([3.0, 1.0])]))
    assert np.allclose(average_metric(f, [0, 1]).matrix(), np.diag([2.0, 1.0]))
    pts = np.array([(0, 0), (1, 0), (0, 1)], float)
    t = np.stack([np.diag([1 + x, 1.0]) for x, _ in pts])
    assert average_metric(t, [0, 1, 2]).m11 == pytest.approx(4 / 3)


def test_abs_eig():
    assert np.allclose(abs_eig(np.diag([4.0, -1.0])), np.diag([4.0, 1.0]))
    assert np.allclose(abs_eig(np.zeros((2, 2))), 0.0)
    assert np.allclose(abs_eig(np.array([[0.0, 2.0], [2.0, 0.0]])), 2 * np.eye(2), atol=1e-15)


@pytest.mark.parametrize(
    "u, H",
    [
        (lambda x, y: x**2 + y**2, [[2, 0], [0, 2]]),
        (lambda x, y: x * y, [[0, 1], [1, 0]]),
        (lambda x, y: 1.5 * x**2 - 0.7 * x * y + 2 * y**2 + x - 0.3, [[3, -0.7], [-0.7, 4]]),
    ],
)
@pytest.mark.parametrize("mesh_fn", [lambda: cvt_mesh(8), lambda: cvt_mesh(16), lambda: unit_square_grid(5)])
def test_hessian_exact_on_quadratics(u, H, mesh_fn):
    m = mesh_fn()
    got = recover_hessian(m, u(m.vertices[:, 0], m.vertices[:, 1]))
    assert np.abs(got - np.array(H, float)).max() <= 1e-9


def test_hessian_cubic_first_order():
    m = cvt_mesh(16)
    x = m.vertices[:, 0]
    H = recover_hessian(m, x**3)
    inner = (m.boundary_tags == 0) & (np.abs(x - 0.5) < 0.1)
    assert np.abs(H[inner, 0, 0] - 6 * x[inner]).max() < 0.5
    assert np.abs(H[inner, 0, 0] - 6 * x[inner]).mean() < 0.1


def test_hessian_input_length():
    with pytest.raises(ValueError):
        recover_hessian(cvt_mesh(8), np.zeros(3))


def test_solve_alpha_closed_forms():
    m = cvt_mesh(8)
    I = np.broadcast_to(np.eye(2), (m.n_vertices, 2, 2))
    r = solve_alpha(I, m)
    assert not r.uniform and abs(r.alpha - ALPHA_ID) <= 1e-9 and r.residual <= 1e-10
    r4 = solve_alpha(4 * I, m)
    assert r4.alpha == pytest.approx(4 * ALPHA_ID, rel=1e-9)
    assert r.iterations <= 200


def test_solve_alpha_zero_field():
    m = cvt_mesh(8)
    r = solve_alpha(np.zeros((m.n_vertices, 2, 2)), m)
    assert r.uniform and r.alpha == 1.0


def test_solve_alpha_residual_random():
    m = cvt_mesh(8)
    rng = np.random.default_rng(0)
    r = solve_alpha(random_spd(rng, m.n_vertices), m)
    assert r.alpha > 0 and r.residual <= 1e-10


@pytest.mark.parametrize(
    "norm, expected",
    [
        ("L2", 4 ** (-1 / 6) * np.diag([4.0, 1.0])),
        ("H1", 4 ** 0.25 * np.diag([4.0, 1.0])),
    ],
)
def test_build_metric_examples(norm, expected):
    f = build_metric(np.diag([3.0, 0.0])[None], 1.0, norm)
    assert np.allclose(f.tensors[0], expected, rtol=1e-14)
    assert f.provenance == f"recovered-{norm}"


def test_build_metric_identity():
    f = build_metric(np.zeros((3, 2, 2)), 1.0, "L2")
    assert np.allclose(f.tensors, np.eye(2))
    with pytest.raises(ValueError):
        build_metric(np.zeros((1, 2, 2)), 0.0)


@given(st.integers(0, 10_000), st.floats(0.01, 10.0), st.floats(0, math.pi))
def test_l2_metric_identities(seed, alpha, th):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(4, 2, 2))
    H = H + np.swapaxes(H, 1, 2)
    f = build_metric(H, alpha, "L2")
    assert np.all(is_spd(f.tensors))
    A = alpha * np.eye(2) + abs_eig(H)
    detM = np.linalg.det(f.tensors)
    assert np.allclose(np.sqrt(detM), np.linalg.det(A) ** (1 / 3), rtol=1e-12)
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    rot = build_metric(R @ H @ R.T, alpha, "L2").tensors
    assert np.allclose(rot, R @ f.tensors @ R.T, atol=1e-12 * np.abs(f.tensors).max())


def test_adaptation_metric_is_spd():
    m = cvt_mesh(8)
    v = m.vertices
    for norm in ("L2", "H1"):
        f, ar = adaptation_metric(m, np.tanh(10 * (v[:, 0] - v[:, 1] ** 2)), norm)
        assert len(f) == m.n_vertices and np.all(is_spd(f.tensors)) and ar.alpha > 0


def test_metric_file_round_trip(tmp_path):
    m = cvt_mesh(8)
    rng = np.random.default_rng(5)
    t = random_spd(rng, m.n_vertices)
    f = MetricField(0.5 * (t + np.swapaxes(t, 1, 2)))
    p = tmp_path / "m.json"
    save_metric(f, p)
    back = load_metric(p, m)
    assert np.array_equal(back.tensors, f.tensors)
    doc = json.loads(p.read_text())
    assert len(doc["tensors"][0]) == 3
    with pytest.raises(MetricMismatchError):
        load_metric(p, unit_square_grid(2))
