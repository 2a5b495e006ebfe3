import numpy as np
import pytest

from polyadapt.geometry import point_in_convex_polygon
from polyadapt.mesh import mesh_to_json, validate_mesh
from polyadapt.quality import quality_approx1
from polyadapt.voronoi import (
    GeneratorError,
    GeneratorSet,
    cell_centroids,
    cvt_energy,
    generate_cvt,
    lloyd_step,
    random_generators,
    voronoi,
)

QUADS = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]


@pytest.mark.parametrize("method", ["qhull", "clip"])
def test_two_generators_split_at_half(method):
    m = voronoi(GeneratorSet([(0.25, 0.5), (0.75, 0.5)]), method=method)
    assert np.allclose(m.cell_areas, 0.5, atol=1e-14)
    assert np.allclose(m.vertices[list(m.cells[0])][:, 0].max(), 0.5)


@pytest.mark.parametrize("method", ["qhull", "clip"])
def test_quadrants(method):
    m = voronoi(GeneratorSet(QUADS), method=method)
    assert m.n_cells == 4 and np.allclose(m.cell_areas, 0.25, atol=1e-14)
    assert validate_mesh(m, domain_area=1.0) == []


def test_random_16_tiles_square():
    m = voronoi(random_generators(4, 1))
    assert m.n_cells == 16
    assert abs(m.cell_areas.sum() - 1.0) <= 1e-10
    assert validate_mesh(m, domain_area=1.0) == []


@pytest.mark.parametrize("seed", [0, 5, 11])
def test_qhull_route_matches_clipping_route(seed):
    gen = random_generators(6, seed)
    a = voronoi(gen, method="qhull")
    b = voronoi(gen, method="clip")
    assert np.allclose(a.cell_areas, b.cell_areas, atol=1e-12)
    assert np.allclose(cell_centroids(a), cell_centroids(b), atol=1e-12)
    assert [len(c) for c in a.cells] == [len(c) for c in b.cells]


def test_duplicate_and_outside_generators():
    with pytest.raises(GeneratorError):
        voronoi(GeneratorSet([(0.3, 0.3), (0.3, 0.3)]))
    with pytest.raises(GeneratorError):
        voronoi(GeneratorSet([(0.3, 0.3), (1.2, 0.3)]))


def test_lloyd_fixed_point():
    gen = GeneratorSet(QUADS)
    assert np.allclose(lloyd_step(gen).points, gen.points, atol=1e-12)


def test_lloyd_halves():
    out = lloyd_step(GeneratorSet([(0.1, 0.5), (0.9, 0.5)]))
    assert np.allclose(out.points, [(0.25, 0.5), (0.75, 0.5)], atol=1e-14)


def _energy_moment_oracle(gen, mesh, n_sub=24):
    """Independent quadrature: midpoint rule on a fine fan of each cell."""
    tot = 0.0
    for cid, c in enumerate(mesh.cells):
        p = mesh.vertices[list(c)]
        z = gen.points[cid]
        ctr = p.mean(0)
        for a, b in zip(p, np.roll(p, -1, axis=0)):
            # refine triangle (ctr, a, b) uniformly
            for i in range(n_sub):
                for j in range(n_sub - i):
                    for up in (0, 1):
                        if up and j == n_sub - i - 1:
                            continue
                        bc = np.array([[i, j], [i + 1, j], [i, j + 1]], float) if not up else np.array([[i + 1, j], [i + 1, j + 1], [i, j + 1]], float)
                        bc /= n_sub
                        pts = ctr + bc[:, :1] * (a - ctr) + bc[:, 1:] * (b - ctr)
                        e, f = pts[1] - pts[0], pts[2] - pts[0]
                        area = 0.5 * abs(e[0] * f[1] - e[1] * f[0])
                        m = pts.mean(0) - z
                        tot += area * (m @ m)
    return tot


def test_cvt_energy_matches_oracle():
    gen = random_generators(3, 2)
    m = voronoi(gen)
    assert cvt_energy(gen, m) == pytest.approx(_energy_moment_oracle(gen, m), rel=1e-3)


def test_lloyd_decreases_energy():
    gen = random_generators(8, 3)  # 64 generators
    for _ in range(5):
        m = voronoi(gen)
        e0 = cvt_energy(gen, m)
        new = lloyd_step(gen, m)
        # same cells, generators at centroids: strictly smaller moment
        assert cvt_energy(new, m) < e0
        e1 = cvt_energy(new, voronoi(new))
        assert e1 <= e0 + 1e-12
        for cid, c in enumerate(m.cells):
            assert point_in_convex_polygon(m.vertices[list(c)], new.points[cid], strict=False)
        gen = new


def test_generate_cvt_history_and_determinism():
    a = generate_cvt(4, 5, 7)
    b = generate_cvt(4, 5, 7)
    assert mesh_to_json(a.mesh) == mesh_to_json(b.mesh)
    assert a.history == b.history
    assert [h[0] for h in a.history] == list(range(6))
    assert a.mesh.n_cells == 16
    assert all(q >= 1 - 1e-12 for _, qa, qe in a.history for q in (qa, qe))


def test_generate_cvt_validation():
    with pytest.raises(ValueError):
        generate_cvt(1, 3, 0)
    with pytest.raises(ValueError):
        generate_cvt(3, -1, 0)


def test_quadrant_squares_have_unit_quality():
    m = voronoi(GeneratorSet(QUADS))
    rep = quality_approx1(m)
    assert rep.Q_ali == pytest.approx(1.0, abs=1e-12)
    assert rep.Q_eq == pytest.approx(1.0, abs=1e-12)


def test_seed_mapping_documented():
    rng = np.random.default_rng(42)
    assert np.array_equal(random_generators(3, 42).points, rng.random((9, 2)))
