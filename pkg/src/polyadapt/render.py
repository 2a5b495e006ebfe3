"""Deterministic SVG drawings of polygon meshes."""

from __future__ import annotations

import numpy as np

from .mesh import PolygonMesh


def _f(x: float) -> str:
    return format(float(x), ".6f").rstrip("0").rstrip(".") or "0"


def _color(t: float) -> str:
    """White (t=0) to dark red (t=1)."""
    t = min(max(t, 0.0), 1.0)
    r = round(255 - 75 * t)
    g = round(255 - 255 * t)
    b = round(255 - 255 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def render_svg(
    mesh: PolygonMesh,
    zoom: tuple[float, float, float, float] | None = None,
    cell_values: dict[int, float] | np.ndarray | None = None,
    width: int = 800,
    stroke: str = "#000000",
) -> str:
    """One ``<path>`` per cell; the viewBox is the zoom window in domain units.

    The y axis is flipped so the drawing has the usual orientation.  With
    ``cell_values`` each cell is filled on a linear white-to-red scale.
    """
    x0, y0, x1, y1 = zoom if zoom is not None else (0.0, 0.0, 1.0, 1.0)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("zoom window must satisfy x0 < x1 and y0 < y1")
    w, h = x1 - x0, y1 - y0
    height = max(1, round(width * h / w))
    fills = None
    if cell_values is not None:
        if isinstance(cell_values, dict):
            vals = np.full(mesh.n_cells, np.nan)
            for k, v in cell_values.items():
                vals[int(k)] = v
        else:
            vals = np.asarray(cell_values, dtype=float)
        finite = vals[np.isfinite(vals)]
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        span = hi - lo if hi > lo else 1.0
        fills = ["none" if not np.isfinite(v) else _color((v - lo) / span) for v in vals]
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="{_f(x0)} {_f(-y1)} {_f(w)} {_f(h)}">',
        f'<g stroke="{stroke}" stroke-width="1" vector-effect="non-scaling-stroke" stroke-linejoin="round">',
    ]
    for cid, cell in enumerate(mesh.cells):
        pts = mesh.vertices[list(cell)]
        d = "M" + " L".join(f"{_f(px)} {_f(-py)}" for px, py in pts) + " Z"
        fill = fills[cid] if fills else "none"
        out.append(f'<path d="{d}" fill="{fill}" vector-effect="non-scaling-stroke"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_svg(mesh: PolygonMesh, path, **kw) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_svg(mesh, **kw))
