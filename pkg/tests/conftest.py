import functools

import numpy as np
import pytest
from hypothesis import settings

from polyadapt.voronoi import generate_cvt

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def cvt_mesh(n: int, iters: int = 30, seed: int = 0):
    return generate_cvt(n, iters, seed, record=False).mesh


@pytest.fixture
def cvt8():
    return cvt_mesh(8)


@pytest.fixture
def cvt16():
    return cvt_mesh(16)


def random_convex_polygon(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    """CCW convex n-gon: sorted angles on a random ellipse, then an affine map."""
    while True:
        ang = np.sort(rng.uniform(0.0, 2 * np.pi, n))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
        if gaps.min() > 0.15 and gaps.max() < np.pi - 0.1:
            break
    p = np.column_stack([np.cos(ang), np.sin(ang)])
    A = np.array([[rng.uniform(0.5, 2.0), rng.uniform(-0.5, 0.5)], [0.0, rng.uniform(0.5, 2.0)]])
    return scale * p @ A.T + rng.uniform(-3, 3, 2)


def random_spd(rng: np.random.Generator, size: int, spread: float = 3.0) -> np.ndarray:
    th = rng.uniform(0, np.pi, size)
    lam = np.exp(rng.uniform(-spread, spread, (size, 2)))
    c, s = np.cos(th), np.sin(th)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], 1)
    return R @ (lam[:, :, None] * np.swapaxes(R, 1, 2))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
