"""Command-line interface: ``spectral-gmds <command>``.

Exit status is 0 on success, 1 on a runtime failure and 2 on invalid input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fixtures, pipeline, storage
from .correspondence import PointMap, transfer_function
from .evaluation import CAVEAT, distortion_curve, geodesic_errors, load_truth, save_svg
from .mesh import MeshError, load_mesh, save_off
from .sgmds import SolverConfig

log = logging.getLogger("spectral_gmds")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


def set_threads(n: int | None) -> None:
    """Limit BLAS and numba threads; ``n`` is clamped to what is available.

    BLAS pools are never raised above their start-up size (OpenBLAS can
    crash when asked for more threads than it allocated buffers for).
    """
    if n is None:
        return
    import numba
    from threadpoolctl import threadpool_info, threadpool_limits

    if n < 1:
        raise pipeline.InputError("--threads must be >= 1")
    cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    n = min(n, cpus)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    for pool in threadpool_info():
        threadpool_limits(min(n, pool["num_threads"]), user_api=pool["user_api"])


def _solver_config(args) -> SolverConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(SolverConfig.from_file(args.config).as_dict())
        except (OSError, ValueError) as exc:
            raise pipeline.InputError(f"bad solver config: {exc}") from exc
    for key in ("mu1", "mu2"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    try:
        return SolverConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise pipeline.InputError(f"bad solver config: {exc}") from exc


def _precompute_options(args) -> pipeline.PrecomputeOptions:
    return pipeline.PrecomputeOptions(M=args.eigen_count, fraction=args.sample_fraction,
                                      mu=args.mu, area_scheme=args.area_scheme,
                                      force=getattr(args, "force", False))


def cmd_precompute(args) -> int:
    t0 = time.perf_counter()
    shape = pipeline.precompute(args.mesh, args.cache_dir, _precompute_options(args))
    print(f"{shape.name}: {shape.n} vertices, {shape.samples.m} samples, M={shape.basis.M}")
    print(f"cache: {shape.directory}")
    print(pipeline.timing_table([shape], None))
    print(f"wall time {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


def cmd_match(args) -> int:
    t0 = time.perf_counter()
    cfg = _solver_config(args)
    opts = _precompute_options(args)
    s1 = pipeline.resolve_shape(args.shape1, args.cache_dir, opts)
    s2 = pipeline.resolve_shape(args.shape2, args.cache_dir, opts)
    res = pipeline.match(s1, s2, cfg, area_weighted_nn=args.area_weighted_nn)
    pipeline.write_match_outputs(args.out, s1, s2, res, cfg)
    c = res.coeffs
    print(f"solver: {c.message}; objective {c.objective:.6g}, constraint residuals "
          f"{c.constraint_residual:.3g} / {c.transpose_residual:.3g}, "
          f"unitarity residual {c.unitarity_residual:.3g}")
    print(f"Spectral GMDS solve: {res.seconds:.2f} s")
    print(pipeline.timing_table([s1, s2], res.seconds))
    print(f"wall time {time.perf_counter() - t0:.2f} s")
    print(f"outputs written to {args.out}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    s1 = pipeline.load_shape(args.shape1)
    s2 = pipeline.load_shape(args.shape2)
    try:
        alpha, _ = pipeline.load_alpha(args.alpha)
    except storage.CacheError as exc:
        raise pipeline.InputError(str(exc)) from exc
    try:
        f1 = np.loadtxt(args.function, ndmin=1)
    except (OSError, ValueError) as exc:
        raise pipeline.InputError(f"cannot read function file: {exc}") from exc
    try:
        f2 = transfer_function(alpha, s1.basis, s2.basis, f1)
    except ValueError as exc:
        raise pipeline.InputError(str(exc)) from exc
    np.savetxt(args.out, f2, fmt="%.17g")
    print(f"transferred {len(f1)} values to {len(f2)} vertices: {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        pm = PointMap.load(args.map)
        truth = load_truth(args.truth)
        mesh2 = load_mesh(args.mesh2)
    except (OSError, ValueError, MeshError) as exc:
        raise pipeline.InputError(str(exc)) from exc
    if len(truth) != pm.n:
        raise pipeline.InputError(f"map has {pm.n} entries but truth has {len(truth)}")
    try:
        err = geodesic_errors(pm, truth, mesh2)
    except ValueError as exc:
        raise pipeline.InputError(str(exc)) from exc
    curve = distortion_curve(err, label=args.label)
    curve.save_csv(args.csv)
    if args.svg:
        save_svg([curve], args.svg)
    print(CAVEAT)
    print(curve.summary())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    return EXIT_OK if selftest.run(force_fail=args.force_fail) else EXIT_RUNTIME


def cmd_gen_fixture(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise pipeline.InputError(f"fixture parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        params[k.strip()] = [float(x) for x in v.split(",")] if "," in v else float(v)
    try:
        mesh = fixtures.generate_test_mesh(args.kind, **params)
    except (TypeError, ValueError) as exc:
        raise pipeline.InputError(str(exc)) from exc
    if args.shuffle_seed is not None:
        mesh, truth = fixtures.shuffled_copy(mesh, seed=args.shuffle_seed)
        truth_path = Path(args.out).with_suffix(".truth.txt")
        np.savetxt(truth_path, truth, fmt="%d")
        print(f"ground truth (original vertex -> new index): {truth_path}")
    save_off(mesh, args.out)
    print(f"{args.kind}: {mesh.n} vertices, {mesh.m} triangles -> {args.out}")
    return EXIT_OK


def _add_precompute_flags(p):
    p.add_argument("--eigen-count", "-M", type=int, default=pipeline.DEFAULT_M,
                   help="number of Laplace-Beltrami eigenfunctions (default %(default)s)")
    p.add_argument("--sample-fraction", type=float, default=pipeline.DEFAULT_FRACTION,
                   help="fraction of vertices used as distance samples (default %(default)s)")
    p.add_argument("--mu", type=float, default=None, help="interpolation fit weight (default: automatic)")
    p.add_argument("--area-scheme", choices=("mixed", "barycentric"), default="mixed")
    p.add_argument("--cache-dir", default=".sgmds-cache", help="cache root (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spectral-gmds", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="thread limit for BLAS and numba")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="eigenbasis, samples and interpolated distances of a mesh")
    p.add_argument("mesh")
    _add_precompute_flags(p)
    p.add_argument("--force", action="store_true", help="ignore existing cache entries")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("match", help="solve for the functional map between two shapes")
    p.add_argument("shape1", help="mesh file or precomputed shape directory")
    p.add_argument("shape2", help="mesh file or precomputed shape directory")
    p.add_argument("--out", "-o", required=True, help="output directory")
    _add_precompute_flags(p)
    p.add_argument("--mu1", type=float, default=None, help="conformality weight")
    p.add_argument("--mu2", type=float, default=None, help="unitarity weight")
    p.add_argument("--config", help="solver options file with key=value lines")
    p.add_argument("--area-weighted-nn", action="store_true",
                   help="match vertex delta-function coefficients instead of raw embeddings")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("transfer", help="map a per-vertex function from shape 1 to shape 2")
    p.add_argument("shape1", help="precomputed shape directory")
    p.add_argument("shape2", help="precomputed shape directory")
    p.add_argument("--alpha", required=True, help="alpha.bin written by match")
    p.add_argument("--function", required=True, help="text file, one value per vertex of shape 1")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="distortion curve of a point map against ground truth")
    p.add_argument("map", help="pointmap.txt or pointmap.json")
    p.add_argument("truth", help="text file, true target index per line")
    p.add_argument("mesh2", help="target mesh")
    p.add_argument("--csv", required=True)
    p.add_argument("--svg")
    p.add_argument("--label", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in fixture checks")
    p.add_argument("--force-fail", action="store_true", help="append a failing check")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("gen-fixture", help="write a synthetic test mesh")
    p.add_argument("kind", choices=("icosphere", "bent_plane", "blob"))
    p.add_argument("out", help="output .off path")
    p.add_argument("--param", "-p", action="append",
                   help="fixture parameter key=value (e.g. level=3, bend_angle=1.05, taper=0.5)")
    p.add_argument("--shuffle-seed", type=int, default=None,
                   help="permute vertices and move rigidly; also writes <out>.truth.txt")
    p.set_defaults(func=cmd_gen_fixture)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s")
    try:
        set_threads(args.threads)
        return args.func(args)
    except pipeline.InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except pipeline.StageError as exc:
        code = EXIT_INPUT if isinstance(exc.cause, (ValueError, MeshError)) and \
            not isinstance(exc.cause, RuntimeError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (RuntimeError, MemoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
