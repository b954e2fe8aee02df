import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import run_bench
from .circulant import empirical_mask
from .errors import DataError, NcsError, NumericalError, UsageError
from .fileio import (
    RunManifest,
    read_image,
    read_mask,
    read_sinogram,
    read_sparse,
    write_image,
    write_mask,
    write_pgm,
    write_record,
    write_sinogram,
)
from .ops import CirculantMap, Geometry, NormalMap
from .phantom import PhantomSpec, make_phantom, parse_noise, simulate
from .problems import config_for, ct_metric_mask, ct_problem, natural_dc, pet_problem, preset, projection_mask
from .solvers import SOLVERS, solve
from .utils import configure_logging, limit_threads, load_json, save_json

logger = logging.getLogger("ncstomo")


def _geometry_args(p: argparse.ArgumentParser, required: bool):
    p.add_argument("--geometry", choices=["parallel", "fan"], default=None if not required else "parallel",
                   help="Scan geometry")
    p.add_argument("--angles", type=int, default=60, help="Projection angles (parallel) or views (fan)")
    p.add_argument("--detectors", type=int, default=None, help="Detector bins / rays per view (default: odd >= sqrt(2) N + 1)")
    p.add_argument("--source-radius", type=float, default=None, help="Fan-beam source distance from the centre (pixels)")
    p.add_argument("--fan-angle", type=float, default=None, help="Fan opening angle (radians)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ncstomo",
        description="Near-circulant splitting for TV-regularized CT/PET reconstruction",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="Rasterize a Shepp-Logan (or custom) ellipse phantom")
    ph.add_argument("--size", type=int, required=True, help="Image size N")
    ph.add_argument("--out", required=True, help="Output image (raw float64 + JSON sidecar)")
    ph.add_argument("--spec", default=None, help="JSON ellipse list; default Shepp-Logan")
    ph.add_argument("--pgm", default=None, help="Also write an 8-bit PGM preview")
    ph.set_defaults(func=cmd_phantom)

    si = sub.add_parser("simulate", help="Project an image and add measurement noise")
    si.add_argument("--in", dest="input", required=True, help="Input image")
    _geometry_args(si, required=True)
    si.add_argument("--noise", default="gaussian", help="gaussian[:SIGMA|:P%%] or poisson:SCALE")
    si.add_argument("--seed", type=int, default=0)
    si.add_argument("--out", required=True, help="Output sinogram")
    si.set_defaults(func=cmd_simulate)

    rc = sub.add_parser("reconstruct", help="Reconstruct an image from a sinogram")
    rc.add_argument("--sino", required=True, help="Input sinogram (geometry read from its sidecar)")
    rc.add_argument("--solver", choices=SOLVERS, default="ncs")
    rc.add_argument("--model", choices=["ct", "pet"], default=None, help="Default: pet for Poisson sinograms, else ct")
    rc.add_argument("--alpha", type=float, default=None, help="Dual step")
    rc.add_argument("--beta", type=float, default=None, help="TV block balance (weight beta/alpha)")
    rc.add_argument("--gamma", type=float, default=None, help="Identity shift in M")
    rc.add_argument("--lambda", dest="lam", type=float, default=None, help="TV weight")
    rc.add_argument("--dc", type=float, default=None, help="DC bin of the projection mask")
    rc.add_argument("--n-cg", type=int, default=None, help="Inner CG iterations (admm)")
    rc.add_argument("--exposure-scale", type=float, default=None, help="PET exposure scale (default from sidecar)")
    rc.add_argument("--iters", type=int, default=1000)
    rc.add_argument("--record-every", type=int, default=1)
    rc.add_argument("--positivity", action="store_true", help="Add the x >= 0 constraint block")
    rc.add_argument("--mask", default="auto", help="'auto' or a mask file for the projection block")
    rc.add_argument("--size", type=int, default=None, help="Image size when the sidecar has no geometry")
    _geometry_args(rc, required=False)
    rc.add_argument("--seed", type=int, default=0, help="Seed for mask estimation and power iterations")
    rc.add_argument("--progress", action="store_true", help="Show a progress bar")
    rc.add_argument("--out", required=True, help="Output image")
    rc.add_argument("--log", required=True, help="Convergence CSV")
    rc.add_argument("--pgm", default=None, help="Also write an 8-bit PGM preview")
    rc.set_defaults(func=cmd_reconstruct)

    be = sub.add_parser("bench", help="Compare solvers against a long reference run")
    be.add_argument("--problem", required=True, help="Benchmark problem JSON")
    be.add_argument("--solvers", default="ncs,pdhg,admm", help="Comma-separated solvers")
    be.add_argument("--iters", type=int, default=1000)
    be.add_argument("--ref-iters", type=int, default=None, help="Reference iterations (default 50x --iters)")
    be.add_argument("--record-every", type=int, default=1)
    be.add_argument("--n-jobs", type=int, default=1, help="Parallel solver processes")
    be.add_argument("--out", required=True, help="Output directory")
    be.set_defaults(func=cmd_bench)

    em = sub.add_parser("estimate-mask", help="Estimate the circulant mask of E^T E by random probing")
    em.add_argument("--operator", choices=["parallel", "fan", "file"], required=True)
    em.add_argument("--matrix", default=None, help="Sparse system matrix (for --operator file)")
    em.add_argument("--size", type=int, default=None, help="Image size N")
    em.add_argument("--angles", type=int, default=60)
    em.add_argument("--detectors", type=int, default=None)
    em.add_argument("--source-radius", type=float, default=None)
    em.add_argument("--fan-angle", type=float, default=None)
    em.add_argument("--samples", type=int, default=10)
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--out", required=True, help="Output mask")
    em.set_defaults(func=cmd_estimate_mask)

    rr = sub.add_parser("rerun", help="Re-execute the command stored in a run manifest")
    rr.add_argument("manifest", help="Manifest JSON written by a previous run")
    rr.set_defaults(func=cmd_rerun)
    return p


def manifest_path(out: Path) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _write_manifest(args, argv, inputs: dict, outputs: dict, start: float, seed=None):
    params = {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "quiet")}
    manifest = RunManifest(
        subcommand=args.command,
        params=params,
        argv=list(argv),
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        seed=seed,
        version=__version__,
        wall_time_s=time.perf_counter() - start,
    )
    path = manifest_path(Path(next(iter(outputs.values()))))
    manifest.save(path)
    logger.info("Wrote manifest %s", path)


def _geometry_from_args(args) -> Geometry:
    return Geometry(
        kind=args.geometry or "parallel",
        n_angles=args.angles,
        n_detectors=args.detectors,
        source_radius=args.source_radius,
        fan_angle=args.fan_angle,
    )


def cmd_phantom(args, argv, start):
    spec = PhantomSpec(args.size)
    if args.spec:
        spec = PhantomSpec.from_dict(load_json(Path(args.spec)), args.size)
    img = make_phantom(spec)
    outputs = {"image": write_image(Path(args.out), img, {"phantom": spec.to_dict()})}
    if args.pgm:
        outputs["pgm"] = write_pgm(Path(args.pgm), img)
    _write_manifest(args, argv, {"spec": args.spec} if args.spec else {}, outputs, start)
    print(f"✓ Completed phantom {args.out}")


def cmd_simulate(args, argv, start):
    img, _ = read_image(Path(args.input))
    if img.shape[0] != img.shape[1]:
        raise DataError(f"Input image must be square, got {img.shape}")
    geometry = _geometry_from_args(args)
    noise = parse_noise(args.noise, args.seed)
    E = geometry.build(img.shape[0])
    sino = simulate(img, E, noise)
    out = write_sinogram(Path(args.out), sino, geometry.to_dict(), noise.to_dict(), {"N": img.shape[0]})
    _write_manifest(args, argv, {"image": args.input}, {"sinogram": out}, start, args.seed)
    print(f"✓ Completed simulate {args.out} {sino.shape}")


def _reconstruct_params(args, model: str, geometry: Geometry) -> dict:
    params = preset(model, geometry.kind, args.solver)
    for key, value in (("alpha", args.alpha), ("beta", args.beta), ("gamma", args.gamma), ("lam", args.lam),
                       ("dc", args.dc), ("n_cg", args.n_cg)):
        if value is not None:
            params[key] = value
    return params


def cmd_reconstruct(args, argv, start):
    sino, header = read_sinogram(Path(args.sino))
    if "geometry" in header and args.geometry is None:
        geometry = Geometry.from_dict(header["geometry"])
    elif args.geometry is not None:
        geometry = _geometry_from_args(args)
    else:
        raise UsageError("Sinogram sidecar has no geometry; pass --geometry and --size")
    N = args.size or header.get("N")
    if N is None:
        raise UsageError("Image size unknown; pass --size")
    E = geometry.build(int(N))
    if sino.shape != E.range_shape:
        raise DataError(f"Sinogram shape {sino.shape} does not match geometry {E.range_shape}")

    noise = header.get("noise") or {}
    model = args.model or ("pet" if noise.get("kind") == "poisson" else "ct")
    params = _reconstruct_params(args, model, geometry)
    if model == "pet":
        scale = args.exposure_scale or float(noise.get("exposure_scale", 1.0))
        problem = pet_problem(E, sino, params["lam"], params["alpha"], params["beta"], scale, args.positivity)
    else:
        problem = ct_problem(E, sino, params["lam"], params["alpha"], params["beta"], args.positivity)

    mask = None
    if args.solver == "ncs":
        data_mask = None if args.mask == "auto" else read_mask(Path(args.mask))
        if data_mask is not None and data_mask.values.shape != problem.domain_shape:
            raise DataError(f"Mask shape {data_mask.values.shape} does not match image {problem.domain_shape}")
        mask = ct_metric_mask(problem, params.get("dc"), seed=args.seed, data_mask=data_mask)
    config = config_for(
        problem,
        args.solver,
        alpha=params["alpha"],
        gamma=params.get("gamma"),
        max_iters=args.iters,
        dc_value=params.get("dc"),
        mask=mask,
        record_every=args.record_every,
        n_cg=int(params.get("n_cg", 10)),
        seed=args.seed,
        progress=args.progress,
    )
    if args.solver != "admm":
        params["gamma"] = config.gamma
    logger.info("Reconstructing with %s (%s): %s", args.solver, model, params)
    state, record = solve(problem, config, args.solver)

    outputs = {"image": write_image(Path(args.out), state.x, {"solver": args.solver, "model": model, "params": params})}
    outputs["log"] = write_record(Path(args.log), record)
    if args.pgm:
        outputs["pgm"] = write_pgm(Path(args.pgm), state.x)
    inputs = {"sinogram": args.sino}
    if args.mask != "auto":
        inputs["mask"] = args.mask
    _write_manifest(args, argv, inputs, outputs, start, args.seed)
    final = record.objective[-1] if len(record) else problem.objective(state.x)
    print(f"✓ Completed reconstruct {args.out} ({args.iters} iterations, objective {final:.6g})")


def cmd_bench(args, argv, start):
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    summary = run_bench(
        Path(args.problem),
        Path(args.out),
        solvers=solvers,
        iters=args.iters,
        ref_iters=args.ref_iters,
        record_every=args.record_every,
        n_jobs=args.n_jobs,
    )
    outputs = {"dir": Path(args.out), "summary": Path(args.out) / "summary.json"}
    outputs.update({s: Path(args.out) / f"{s}.csv" for s in summary["iterations_to_threshold"]})
    _write_manifest(args, argv, {"problem": args.problem}, outputs, start)
    for s, k in summary["iterations_to_threshold"].items():
        print(f"  {s}: {k if k is not None else 'not reached'}")
    if summary["failed"]:
        raise NumericalError(f"Solvers failed: {', '.join(summary['failed'])}")


def cmd_estimate_mask(args, argv, start):
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    inputs = {}
    if args.operator == "file":
        if not args.matrix:
            raise UsageError("--operator file needs --matrix")
        E = read_sparse(Path(args.matrix))
        inputs["matrix"] = args.matrix
    else:
        if args.size is None:
            raise UsageError("--size is required for built-in operators")
        E = Geometry(args.operator, args.angles, args.detectors, args.source_radius, args.fan_angle).build(args.size)
    if E.domain_shape[0] != E.domain_shape[-1] or len(E.domain_shape) != 2:
        raise DataError(f"Operator domain must be a square image, got {E.domain_shape}")

    mask = empirical_mask(NormalMap(E), args.samples, args.seed)
    out = write_mask(Path(args.out), mask)
    diagnostics = {
        "samples": args.samples,
        "seed": args.seed,
        "skipped_bins": len(mask.meta["skipped_bins"]),
        "dc_estimate": float(mask.values[0, 0].real),
        "dc_exact": natural_dc(E),
        "max_imag": float(np.abs(mask.values.imag).max()),
    }
    if getattr(E, "meta", {}).get("geometry") == "parallel":
        fitted = projection_mask(E, n_samples=args.samples, seed=args.seed)
        diagnostics["C_R"] = fitted.meta["C_R"]
        fit = CirculantMap(fitted)
        probe = np.random.default_rng(args.seed + 1).standard_normal(E.domain_shape)
        exact = E.normal(probe)
        diagnostics["radon_fit_rel_error"] = float(np.linalg.norm(fit.forward(probe) - exact) / np.linalg.norm(exact))
    diag_path = out.with_name(out.name + ".diagnostics.json")
    save_json(diagnostics, diag_path)
    _write_manifest(args, argv, inputs, {"mask": out, "diagnostics": diag_path}, start, args.seed)
    print(f"✓ Completed estimate-mask {args.out}")


def cmd_rerun(args, argv, start):
    manifest = RunManifest.load(Path(args.manifest))
    if manifest.subcommand == "rerun":
        raise UsageError("Refusing to rerun a rerun manifest")
    logger.info("Re-running %s (recorded with version %s)", manifest.subcommand, manifest.version)
    code = main(manifest.argv)
    if code:
        logger.error("Rerun of %s exited with %d", manifest.subcommand, code)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    limit_threads()

    start = time.perf_counter()
    try:
        code = args.func(args, argv, start)
    except NcsError as e:
        logger.error("%s", e)
        print(f"✗ Failed {args.command}: {e}", file=sys.stderr)
        return getattr(e, "exit_code", NumericalError.exit_code)
    except (ValueError, OSError) as e:
        logger.error("%s", e)
        print(f"✗ Failed {args.command}: {e}", file=sys.stderr)
        return DataError.exit_code
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
