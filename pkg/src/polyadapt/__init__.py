"""Anisotropic quality measures and MMPDE adaptation for convex polygonal meshes."""

__version__ = "0.1.0"

from .mesh import PolygonMesh, TriSubdivision, load_mesh, save_mesh, subdivide, unit_square_grid, validate_mesh
from .metric import MetricField, SpdTensor2, build_metric, recover_hessian, solve_alpha
from .quality import QualityReport, quality, quality_approx1, quality_approx2, quality_approx3
from .voronoi import GeneratorSet, generate_cvt, lloyd_step, voronoi

__all__ = [
    "GeneratorSet",
    "MetricField",
    "PolygonMesh",
    "QualityReport",
    "SpdTensor2",
    "TriSubdivision",
    "build_metric",
    "generate_cvt",
    "load_mesh",
    "lloyd_step",
    "quality",
    "quality_approx1",
    "quality_approx2",
    "quality_approx3",
    "recover_hessian",
    "save_mesh",
    "solve_alpha",
    "subdivide",
    "unit_square_grid",
    "validate_mesh",
    "voronoi",
]
