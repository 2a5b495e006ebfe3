"""Outer adaptation loop and convergence studies."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .mesh import DegenerateElementError, PolygonMesh, collapse_short_edges, validate_mesh
from .metric import adaptation_metric
from .mmpde import AdaptConfig, TanglingError, build_state, ih_energy, integrate, interpolate_new_mesh, new_polygon_mesh
from .quality import quality_approx1, quality_approx2, quality_approx3
from .voronoi import generate_cvt

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "iter",
    "Q_ali_1",
    "Q_ali_2",
    "Q_ali_3",
    "Q_eq_1",
    "Q_eq_2",
    "Q_eq_3",
    "l2_q_ali_1",
    "l2_q_eq_1",
    "err_L2",
    "err_H1",
    "I_h",
)


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptResult:
    meshes: list[PolygonMesh]
    history: list[dict]
    status: str = "ok"
    message: str = ""
    solutions: list[np.ndarray] = field(default_factory=list)


def _quality_row(mesh: PolygonMesh, ref: PolygonMesh, metric) -> dict:
    r1 = quality_approx1(mesh, refs=ref, metric=metric)
    r2 = quality_approx2(mesh, refs=ref, metric=metric, scheme="B")
    r3 = quality_approx3(mesh, metric=metric)
    return {
        "Q_ali_1": r1.Q_ali,
        "Q_ali_2": r2.Q_ali,
        "Q_ali_3": r3.Q_ali,
        "Q_eq_1": r1.Q_eq,
        "Q_eq_2": r2.Q_eq,
        "Q_eq_3": r3.Q_eq,
        "l2_q_ali_1": r1.l2_q_ali,
        "l2_q_eq_1": r1.l2_q_eq,
    }


def _move(mesh: PolygonMesh, ref: PolygonMesh, metric, config: AdaptConfig):
    """One inner MMPDE solve; halves t_end on tangling. Returns (mesh, I_h, t_end)."""
    t_end = config.t_end
    last = ""
    for attempt in range(config.max_halvings + 1):
        state = build_state(mesh, ref, metric, tau=config.tau, t_end=t_end)
        res = integrate(state, config)
        if res.success and not res.tangled:
            try:
                x_new = interpolate_new_mesh(res.xi, state)
                new = new_polygon_mesh(mesh, x_new)
                problems = validate_mesh(new)
                if not problems:
                    return new, ih_energy(state, res.xi), t_end
                last = f"invalid new mesh: {problems[0]}"
            except (TanglingError, DegenerateElementError) as exc:
                last = str(exc)
        else:
            last = "computational mesh tangled" if res.tangled else f"integrator failed: {res.message}"
        log.warning("inner iteration rejected (%s); halving t_end from %g", last, t_end)
        t_end *= 0.5
    raise AdaptationError(last)


def adapt_outer(problem: fem.ProblemSpec, mesh0: PolygonMesh, config: AdaptConfig | None = None, callback=None) -> AdaptResult:
    """Solve, recover, build the metric, move; repeated ``config.outer_iters`` times.

    ``history[k]`` describes mesh T^(k): quality of T^(k) under its own
    recovered metric (references taken from T^(0)), error norms of the FEM
    solution on T^(k), and I_h at the end of the inner solve started from it
    (NaN on the last row). ``callback(k, mesh, row)`` is called per row.
    """
    config = config or AdaptConfig()
    ref = mesh0
    mesh = mesh0
    meshes = [mesh0]
    history: list[dict] = []
    solutions = []
    for k in range(config.outer_iters + 1):
        sol = fem.solve_poisson(mesh, problem, method=config.solver)
        solutions.append(sol.nodal_values)
        if problem.u_exact is not None:
            e_l2, e_h1 = fem.error_norms(mesh, sol, problem)
        else:
            e_l2 = e_h1 = math.nan
        metric, _ = adaptation_metric(mesh, sol.nodal_values, config.metric_norm)
        row = {"iter": k, **_quality_row(mesh, ref, metric), "err_L2": e_l2, "err_H1": e_h1, "I_h": math.nan}
        history.append(row)
        if k < config.outer_iters:
            try:
                mesh, ih, _ = _move(mesh, ref, metric, config)
            except AdaptationError as exc:
                if callback:
                    callback(k, meshes[-1], row)
                return AdaptResult(meshes, history, "tangled", str(exc), solutions)
            row["I_h"] = ih
            meshes.append(mesh)
        if callback:
            callback(k, meshes[k], row)
        log.info("outer %d: L2 %.4e H1 %.4e", k, e_l2, e_h1)
    return AdaptResult(meshes, history, "ok", "", solutions)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["iter"]] + [format(float(row[c]), ".17g") for c in HISTORY_COLUMNS[1:]])


STUDY_COLUMNS = (
    "N",
    "err_L2_T0",
    "ord_L2_T0",
    "err_H1_T0",
    "ord_H1_T0",
    "err_L2_Tk",
    "ord_L2_Tk",
    "err_H1_Tk",
    "ord_H1_Tk",
)


COLLAPSE_TOL = 0.1


def initial_mesh(N: int, seed: int = 0, cvt_iters: int = 50, collapse_tol: float = COLLAPSE_TOL) -> PolygonMesh:
    """CVT from N*N random generators after ``cvt_iters`` Lloyd steps.

    Edges shorter than ``collapse_tol * h`` are merged: the centre-fan
    triangles on such edges are nearly degenerate and invert almost at once
    under the mesh flow. ``collapse_tol=0`` keeps the raw CVT.
    """
    mesh = generate_cvt(N, cvt_iters, seed, record=False).mesh
    if collapse_tol > 0:
        mesh, n = collapse_short_edges(mesh, collapse_tol)
        log.info("collapsed %d short edges", n)
    return mesh


def convergence_study(
    problem: fem.ProblemSpec,
    Ns,
    config: AdaptConfig | None = None,
    seed: int = 0,
    cvt_iters: int = 50,
    collapse_tol: float = COLLAPSE_TOL,
) -> list[dict]:
    """Errors on T^(0) and T^(outer) for each N, with orders between rows.

    Initial meshes come from ``initial_mesh``.
    """
    Ns = [int(n) for n in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("Ns must be strictly increasing")
    config = config or AdaptConfig(outer_iters=5)
    rows = []
    for N in Ns:
        t0 = time.perf_counter()
        mesh0 = initial_mesh(N, seed, cvt_iters, collapse_tol)
        res = adapt_outer(problem, mesh0, config)
        if res.status != "ok":
            raise AdaptationError(f"N={N}: {res.message}")
        first, last = res.history[0], res.history[-1]
        rows.append(
            {
                "N": N,
                "err_L2_T0": first["err_L2"],
                "err_H1_T0": first["err_H1"],
                "err_L2_Tk": last["err_L2"],
                "err_H1_Tk": last["err_H1"],
            }
        )
        log.info("N=%d done in %.1fs", N, time.perf_counter() - t0)
    for key in ("L2_T0", "H1_T0", "L2_Tk", "H1_Tk"):
        orders = fem.convergence_orders(Ns, [r["err_" + key] for r in rows])
        for r, o in zip(rows, orders):
            r["ord_" + key] = o
    return rows


def write_study_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STUDY_COLUMNS)
        for r in rows:
            out = []
            for c in STUDY_COLUMNS:
                v = r[c]
                out.append("" if v is None else (str(v) if c == "N" else format(float(v), ".17g")))
            w.writerow(out)
