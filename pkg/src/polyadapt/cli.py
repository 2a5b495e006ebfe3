"""Command-line entry point: ``polyadapt <command> [flags]``.

Exit codes: 0 success, 2 invalid input, 3 invalid or degenerate mesh,
4 solver or adaptation failure.  Every command writes a JSON manifest next
to its outputs; ``polyadapt replay MANIFEST`` re-runs it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MESH = 3
EXIT_SOLVER = 4

THREADS_ENV = "POLYADAPT_THREADS"

log = logging.getLogger("polyadapt")


class InputError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path: Path, argv: list[str], args: argparse.Namespace, outputs: list[Path], wall: float, status: str = "ok") -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "argv": argv,
        "flags": flags,
        "seed": flags.get("seed"),
        "version": __version__,
        "outputs": {str(p): _sha256(p) for p in outputs if p.exists()},
        "wall_time_s": round(wall, 3),
        "status": status,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# --- commands ---------------------------------------------------------------


def cmd_cvt(args) -> tuple[int, list[Path], Path]:
    from .mesh import save_mesh
    from .voronoi import generate_cvt

    if args.n < 2:
        raise InputError("--n must be >= 2")
    if args.iters < 0:
        raise InputError("--iters must be >= 0")
    res = generate_cvt(args.n, args.iters, args.seed, record=args.history is not None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(res.mesh, out)
    outputs = [out]
    if args.history:
        hp = Path(args.history)
        hp.parent.mkdir(parents=True, exist_ok=True)
        with open(hp, "w", encoding="utf-8") as fh:
            fh.write("iter,Q_ali_1,Q_eq_1\n")
            for it, qa, qe in res.history:
                fh.write(f"{it},{qa:.17g},{qe:.17g}\n")
        outputs.append(hp)
    return EXIT_OK, outputs, _manifest_for(out)


def cmd_quality(args):
    from .mesh import load_mesh
    from .metric import MetricField, load_metric
    from .quality import quality, write_report_csv, write_report_json

    mesh = load_mesh(args.mesh)
    metric = None
    if args.metric:
        metric = load_metric(args.metric, mesh)
    else:
        metric = MetricField.identity(mesh.n_vertices)
    refs = load_mesh(args.ref_mesh) if args.ref_mesh else None
    if args.approx == 3 and (args.ref_mesh or args.ref_rotation != "none"):
        raise InputError("approximation 3 builds its own references; --ref-mesh/--ref-rotation do not apply")
    rep = quality(mesh, args.approx, refs=refs, metric=metric, scheme=args.subdivision.upper(), ref_rotation=args.ref_rotation)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(rep, out)
    js = out.with_suffix(".json")
    write_report_json(rep, js)
    print(json.dumps(rep.summary(), sort_keys=True))
    return EXIT_OK, [out, js], _manifest_for(out)


def _adapt_config(args):
    from .mmpde import AdaptConfig

    if args.tau <= 0 or args.t_end <= 0:
        raise InputError("--tau and --t-end must be positive")
    if args.outer < 0:
        raise InputError("--outer must be >= 0")
    if args.collapse_tol < 0:
        raise InputError("--collapse-tol must be >= 0")
    return AdaptConfig(outer_iters=args.outer, tau=args.tau, t_end=args.t_end, metric_norm=args.metric.upper())


def cmd_adapt(args):
    from .adapt import adapt_outer, initial_mesh, write_history_csv
    from .fem import EXAMPLES
    from .mesh import save_mesh
    from .render import save_svg

    if args.n < 2:
        raise InputError("--n must be >= 2")
    config = _adapt_config(args)
    run = Path(args.out_dir)
    run.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    problem = EXAMPLES[args.example]()
    mesh0 = initial_mesh(args.n, args.seed, args.cvt_iters, args.collapse_tol)

    def on_row(k, mesh, row):
        p = run / f"mesh_{k}.json"
        save_mesh(mesh, p)
        outputs.append(p)
        if args.svg:
            s = run / f"mesh_{k}.svg"
            save_svg(mesh, s)
            outputs.append(s)

    res = adapt_outer(problem, mesh0, config, callback=on_row)
    hist = run / "history.csv"
    write_history_csv(res.history, hist)
    outputs.append(hist)
    if res.status != "ok":
        log.error("adaptation stopped: %s", res.message)
        return EXIT_SOLVER, outputs, run / "manifest.json"
    return EXIT_OK, outputs, run / "manifest.json"


def _parse_ns(text: str) -> list[int]:
    try:
        ns = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"malformed --ns list {text!r}") from None
    if not ns or any(n < 2 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
        raise InputError("--ns must be a strictly increasing comma list of integers >= 2")
    return ns


def cmd_study(args):
    from .adapt import convergence_study, write_study_csv
    from .fem import EXAMPLES

    ns = _parse_ns(args.ns)
    config = _adapt_config(args)
    rows = convergence_study(
        EXAMPLES[args.example](), ns, config, seed=args.seed, cvt_iters=args.cvt_iters, collapse_tol=args.collapse_tol
    )
    out = Path(args.csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_study_csv(rows, out)
    return EXIT_OK, [out], _manifest_for(out)


def _parse_zoom(text: str):
    try:
        z = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise InputError(f"malformed --zoom {text!r}") from None
    if len(z) != 4 or not (z[2] > z[0] and z[3] > z[1]):
        raise InputError("--zoom must be x0,y0,x1,y1 with x0<x1 and y0<y1")
    return z


def cmd_render(args):
    from .mesh import load_mesh
    from .quality import read_cell_values
    from .render import save_svg

    zoom = _parse_zoom(args.zoom) if args.zoom else None
    values = None
    if args.color_by != "none":
        if not args.quality:
            raise InputError(f"--color-by {args.color_by} needs --quality CSV")
        try:
            values = read_cell_values(args.quality, args.color_by)
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read quality CSV: {exc}") from None
    mesh = load_mesh(args.mesh)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_svg(mesh, out, zoom=zoom, cell_values=values)
    return EXIT_OK, [out], _manifest_for(out)


def cmd_replay(args):
    doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = doc.get("argv")
    if not isinstance(argv, list):
        raise InputError("manifest has no argv")
    code = main(argv)
    if args.check:
        bad = [p for p, h in doc.get("outputs", {}).items() if not Path(p).exists() or _sha256(Path(p)) != h]
        if bad:
            print("replay mismatch: " + ", ".join(bad), file=sys.stderr)
            return 1, [], None
        print("replay identical")
    return code, [], None


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polyadapt", description="Anisotropic quality measures and MMPDE adaptation for polygonal meshes.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None, help=f"cap on BLAS/LAPACK threads (env {THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cvt", help="centroidal Voronoi mesh by Lloyd's iteration")
    c.add_argument("--n", type=int, required=True, help="n*n generators")
    c.add_argument("--iters", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="cvt.json")
    c.add_argument("--history", default=None, help="CSV of iter,Q_ali_1,Q_eq_1")
    c.set_defaults(func=cmd_cvt)

    q = sub.add_parser("quality", help="quality measures of a mesh")
    q.add_argument("--mesh", required=True)
    g = q.add_mutually_exclusive_group()
    g.add_argument("--metric", default=None, help='JSON with "tensors": [[m11,m12,m22], ...]')
    g.add_argument("--identity", action="store_true", help="identity metric (default)")
    q.add_argument("--approx", type=int, choices=(1, 2, 3), required=True)
    q.add_argument("--subdivision", choices=("a", "b"), default="b", help="approximation 2 only (default b)")
    q.add_argument("--ref-rotation", choices=("best", "none"), default="none")
    q.add_argument("--ref-mesh", default=None, help="reference mesh with the same connectivity")
    q.add_argument("--out", default="quality.csv")
    q.set_defaults(func=cmd_quality)

    def adapt_flags(a, outer_default):
        a.add_argument("--example", type=int, choices=(1, 2), required=True)
        a.add_argument("--outer", type=int, default=outer_default)
        a.add_argument("--tau", type=float, default=1.0 / 300.0)
        a.add_argument("--t-end", type=float, default=1.0)
        a.add_argument("--metric", choices=("l2", "h1"), default="l2")
        a.add_argument("--seed", type=int, default=0)
        a.add_argument("--cvt-iters", type=int, default=50, help="Lloyd steps for the initial mesh")
        a.add_argument(
            "--collapse-tol", type=float, default=0.1, help="merge initial-mesh edges shorter than this times h (0 disables)"
        )

    a = sub.add_parser("adapt", help="MMPDE adaptation run for an example problem")
    adapt_flags(a, 10)
    a.add_argument("--n", type=int, default=32)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--svg", action="store_true", help="also write mesh_k.svg")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("study", help="convergence study over several N")
    adapt_flags(s, 5)
    s.add_argument("--ns", required=True, help="comma list, e.g. 8,16,32")
    s.add_argument("--csv", default="study.csv")
    s.set_defaults(func=cmd_study)

    r = sub.add_parser("render", help="SVG drawing of a mesh")
    r.add_argument("--mesh", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--zoom", default=None, help="x0,y0,x1,y1")
    r.add_argument("--color-by", choices=("none", "q_ali", "q_eq"), default="none")
    r.add_argument("--quality", default=None, help="per-element CSV from the quality command")
    r.set_defaults(func=cmd_render)

    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--check", action="store_true", help="compare output hashes with the manifest")
    rp.set_defaults(func=cmd_replay)
    return p


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer") from None
    return None


def main(argv: list[str] | None = None) -> int:
    from threadpoolctl import threadpool_limits

    from .fem import SolverError
    from .mesh import DegenerateElementError, MeshFormatError, MeshValidationError
    from .metric import MetricMismatchError
    from .adapt import AdaptationError
    from .mmpde import TanglingError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        nthreads = _threads(args)
        if nthreads is not None and nthreads < 1:
            raise InputError("--threads must be >= 1")
        with threadpool_limits(limits=nthreads):
            code, outputs, manifest = args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (MeshFormatError, MeshValidationError, DegenerateElementError, MetricMismatchError) as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return EXIT_MESH
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, AdaptationError, TanglingError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if manifest is not None:
        write_manifest(manifest, argv, args, outputs, time.perf_counter() - t0, "ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
