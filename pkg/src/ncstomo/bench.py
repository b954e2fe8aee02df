"""Solver comparison runs: one reference, one convergence CSV per solver, one summary JSON."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ReferenceWarning, UsageError
from .fileio import read_sinogram, write_record
from .ops import Geometry, LinearMap
from .phantom import NoiseSpec, PhantomSpec, make_phantom, parse_noise, simulate
from .problems import config_for, ct_problem, pet_problem, preset
from .solvers import SOLVERS, ConvergenceRecord, SolverConfig, SplitProblem, compute_reference, solve
from .utils import limit_threads, load_json, save_json

logger = logging.getLogger(__name__)

THRESHOLD = 1e-4


@dataclass
class BenchProblem:
    N: int = 64
    model: str = "ct"
    lam: Optional[float] = None
    geometry: Geometry = field(default_factory=Geometry)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    phantom: Optional[PhantomSpec] = None
    positivity: bool = False
    solvers: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    sinogram: Optional[Path] = None

    def __post_init__(self):
        if self.model not in ("ct", "pet"):
            raise UsageError(f"model must be 'ct' or 'pet', got {self.model!r}")
        if self.phantom is None:
            self.phantom = PhantomSpec(self.N)

    def params(self, solver: str) -> dict:
        """Preset for this model/geometry overlaid with the file's settings."""
        p = preset(self.model, self.geometry.kind, solver)
        p.update(self.solvers.get(solver, {}))
        if self.lam is not None:
            p["lam"] = self.lam
        return p

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> BenchProblem:
        N = int(d.get("N", 64))
        noise = d.get("noise", "gaussian")
        seed = int(d.get("seed", 0))
        noise = parse_noise(noise, seed) if isinstance(noise, str) else NoiseSpec.from_dict({"seed": seed, **noise})
        sino = d.get("sinogram")
        if sino is not None and base_dir is not None:
            sino = Path(base_dir) / sino
        return cls(
            N=N,
            model=d.get("model", "ct"),
            lam=d.get("lam"),
            geometry=Geometry.from_dict(d.get("geometry", {})),
            noise=noise,
            phantom=PhantomSpec.from_dict(d["phantom"], N) if "phantom" in d else None,
            positivity=bool(d.get("positivity", False)),
            solvers=dict(d.get("solvers", {})),
            reference=dict(d.get("reference", {})),
            sinogram=Path(sino) if sino is not None else None,
        )


def load_problem(path: Path) -> BenchProblem:
    path = Path(path)
    return BenchProblem.from_dict(load_json(path), base_dir=path.parent)


def build_data(bp: BenchProblem) -> tuple[LinearMap, np.ndarray]:
    """Forward operator and measurements (read from disk or simulated from the phantom)."""
    E = bp.geometry.build(bp.N)
    if bp.sinogram is not None:
        b, _ = read_sinogram(bp.sinogram)
    else:
        b = simulate(make_phantom(bp.phantom), E, bp.noise)
    return E, b


def build_problem(bp: BenchProblem, E: LinearMap, b: np.ndarray, params: dict) -> SplitProblem:
    if bp.model == "pet":
        return pet_problem(E, b, params["lam"], params["alpha"], params["beta"], bp.noise.exposure_scale, bp.positivity)
    return ct_problem(E, b, params["lam"], params["alpha"], params["beta"], bp.positivity)


def build_config(problem: SplitProblem, solver: str, params: dict, iters: int, record_every: int = 1, seed: int = 0) -> SolverConfig:
    return config_for(
        problem,
        solver,
        alpha=params["alpha"],
        gamma=params.get("gamma"),
        max_iters=iters,
        dc_value=params.get("dc"),
        n_cg=int(params.get("n_cg", 10)),
        record_every=record_every,
        seed=seed,
    )


def iterations_to_threshold(record: ConvergenceRecord, threshold: float = THRESHOLD) -> Optional[int]:
    return record.iterations_to(threshold)


def run_solver(
    bp: BenchProblem, E: LinearMap, b: np.ndarray, solver: str, iters: int, f_star: Optional[float], record_every: int = 1
) -> ConvergenceRecord:
    params = bp.params(solver)
    problem = build_problem(bp, E, b, params)
    config = build_config(problem, solver, params, iters, record_every, bp.noise.seed)
    logger.info("Running %s for %d iterations with %s", solver, iters, params)
    _, record = solve(problem, config, solver, f_star=f_star)
    return record


def run_reference(bp: BenchProblem, E: LinearMap, b: np.ndarray, ref_iters: int, cache_dir: Optional[Path]) -> tuple[float, dict]:
    solver = bp.reference.get("solver", "ncs")
    if solver != "ncs":
        raise UsageError("Reference runs use NCS")
    params = {**bp.params("ncs"), **bp.reference.get("params", {})}
    problem = build_problem(bp, E, b, params)
    config = build_config(problem, "ncs", params, ref_iters, seed=bp.noise.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ReferenceWarning)
        ref = compute_reference(problem, config, ref_iters, cache_dir)
    messages = [str(w.message) for w in caught if issubclass(w.category, ReferenceWarning)]
    info = {
        "iterations": ref_iters,
        "objective": ref.objective_star,
        "converged": ref.converged,
        "rel_change": ref.rel_change,
        "warnings": messages,
    }
    return ref.objective_star, info


def run_bench(
    problem_file: Path,
    out_dir: Path,
    solvers: Iterable[str] = SOLVERS,
    iters: int = 1000,
    ref_iters: Optional[int] = None,
    record_every: int = 1,
    n_jobs: int = 1,
    cache_dir: Optional[Path] = None,
) -> dict:
    solvers = list(solvers)
    unknown = [s for s in solvers if s not in SOLVERS]
    if unknown or not solvers:
        raise UsageError(f"Unknown solvers {unknown}; choose from {SOLVERS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    limit_threads()

    bp = load_problem(problem_file)
    E, b = build_data(bp)
    ref_iters = ref_iters or 50 * iters
    f_star, ref_info = run_reference(bp, E, b, ref_iters, cache_dir or out_dir / "cache")
    print(f"✓ Completed reference ({ref_iters} iterations, f*={f_star!r})")

    records: dict[str, ConvergenceRecord] = {}
    failed: dict[str, str] = {}
    max_workers = max(1, min(n_jobs, len(solvers)))
    if max_workers == 1:
        for s in solvers:
            try:
                records[s] = run_solver(bp, E, b, s, iters, f_star, record_every)
                print(f"✓ Completed {s}")
            except Exception as e:
                failed[s] = str(e)
                print(f"✗ Failed {s}: {e}")
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as ex:
            futs = {ex.submit(run_solver, bp, E, b, s, iters, f_star, record_every): s for s in solvers}
            for fut in as_completed(futs):
                s = futs[fut]
                try:
                    records[s] = fut.result()
                    print(f"✓ Completed {s}")
                except Exception as e:
                    failed[s] = str(e)
                    print(f"✗ Failed {s}: {e}")

    below_reference = []
    for s in solvers:
        if s not in records:
            continue
        write_record(out_dir / f"{s}.csv", records[s])
        finite = [f for f in records[s].objective if math.isfinite(f)]
        if finite and min(finite) < f_star - 1e-9 * max(1.0, abs(f_star)):
            below_reference.append(s)
            logger.warning("%s reached objective %.12g below the reference %.12g", s, min(finite), f_star)
    if below_reference:
        ref_info["warnings"].append(f"solvers below reference objective: {', '.join(below_reference)}")

    summary = {
        "threshold": THRESHOLD,
        "iterations_to_threshold": {s: iterations_to_threshold(records[s]) for s in solvers if s in records},
        "failed": failed,
        "reference": ref_info,
        "iters": iters,
    }
    save_json(summary, out_dir / "summary.json")
    return summary
