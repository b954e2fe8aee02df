"""NCS, PDHG and ADMM-with-CG for  minimize g(Ax - b).

All three share the dual update

    u <- prox_{alpha g*}(u + alpha (A(2 x_new - x) - b))

and differ only in how the x-update applies the inverse metric:
NCS uses M^+ with M = gamma I + alpha C (C circulant), PDHG uses
M = gamma I and ADMM solves with alpha A^T A (here by inner CG).
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from tqdm import tqdm

from .circulant import SpectralMask, apply_circulant, pinv_mask
from .errors import DivergenceError, MetricError, MetricWarning, NumericalError, ReferenceWarning, StepSizeWarning, UsageError
from .ops import LinearMap, StackedMap
from .prox import ProxConj
from .utils import array_digest

logger = logging.getLogger(__name__)

SOLVERS = ("ncs", "pdhg", "admm")

# Estimated domination ratios above this are refused rather than warned about.
METRIC_RATIO_LIMIT = 1.1


@dataclass
class Block:
    weight: float
    op: LinearMap
    prox: ProxConj
    offset: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if not self.weight > 0:
            raise UsageError(f"Block weight must be positive, got {self.weight}")
        if self.offset is None:
            self.offset = np.zeros(self.op.range_shape)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(self.op.range_shape)


@dataclass
class SplitProblem:
    """g(Ax - b) with A = [w_1 A_1; w_2 A_2; ...], b = [o_1; o_2; ...], g separable."""

    blocks: list[Block]

    def __post_init__(self):
        if not self.blocks:
            raise UsageError("SplitProblem needs at least one block")
        shape = self.blocks[0].op.domain_shape
        for blk in self.blocks:
            if blk.op.domain_shape != shape:
                raise UsageError(f"Block {blk.name or blk.op} has domain {blk.op.domain_shape}, expected {shape}")

    @property
    def domain_shape(self) -> tuple[int, ...]:
        return self.blocks[0].op.domain_shape

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        return [blk.weight * blk.op.forward(x) for blk in self.blocks]

    def adjoint(self, u: list[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.domain_shape)
        for blk, ui in zip(self.blocks, u):
            out += blk.weight * blk.op.adjoint(ui)
        return out

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def objective(self, x: np.ndarray) -> float:
        return float(sum(blk.prox.objective(ax - blk.offset) for blk, ax in zip(self.blocks, self.forward(x))))

    def stacked(self) -> StackedMap:
        return StackedMap([(blk.weight, blk.op) for blk in self.blocks])

    def zero_dual(self) -> list[np.ndarray]:
        return [np.zeros(blk.op.range_shape) for blk in self.blocks]

    def describe(self) -> dict:
        return {
            "blocks": [
                {"name": blk.name, "weight": blk.weight, "op": blk.op.describe(), "prox": blk.prox.describe()}
                for blk in self.blocks
            ],
            "offsets": array_digest(*[blk.offset for blk in self.blocks]),
        }


@dataclass
class SolverConfig:
    alpha: float
    gamma: float = 0.0
    kind: str = "ncs"
    mask: Optional[SpectralMask] = None
    dense_metric: Optional[np.ndarray] = None
    max_iters: int = 1000
    record_every: int = 1
    dc_value: Optional[float] = None
    n_cg: int = 10
    seed: int = 0
    pinv_rel_tol: float = 1e-12
    check_metric: bool = True
    progress: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise UsageError(f"alpha must be positive, got {self.alpha}")
        if self.gamma < 0:
            raise UsageError(f"gamma must be nonnegative, got {self.gamma}")
        if self.kind not in SOLVERS:
            raise UsageError(f"Unknown solver kind {self.kind!r}; expected one of {SOLVERS}")
        if self.kind != "admm" and self.mask is None and self.dense_metric is None and not self.gamma > 0:
            raise UsageError("gamma must be positive when no circulant mask is given")
        if self.max_iters < 0 or self.record_every < 1:
            raise UsageError("max_iters must be >= 0 and record_every >= 1")

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "mask": None if self.mask is None else array_digest(self.mask.values),
            "dense_metric": None if self.dense_metric is None else array_digest(self.dense_metric),
            "dc_value": self.dc_value,
            "n_cg": self.n_cg,
        }


@dataclass
class SolverState:
    x: np.ndarray
    u: list[np.ndarray]
    k: int = 0

    @classmethod
    def zeros(cls, problem: SplitProblem) -> SolverState:
        return cls(np.zeros(problem.domain_shape), problem.zero_dual(), 0)


@dataclass
class ConvergenceRecord:
    iters: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    rel_subopt: list[float] = field(default_factory=list)
    seminorm_step: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def append(self, k: int, objective: float, rel_subopt: float, seminorm_step: float, wall_ms: float):
        if self.iters and k <= self.iters[-1]:
            raise ValueError(f"Record iterations must increase ({k} after {self.iters[-1]})")
        self.iters.append(int(k))
        self.objective.append(float(objective))
        self.rel_subopt.append(float(rel_subopt))
        self.seminorm_step.append(float(seminorm_step))
        self.wall_ms.append(float(wall_ms))

    def __len__(self) -> int:
        return len(self.iters)

    def rows(self) -> Iterator[tuple[int, float, float, float, float]]:
        return zip(self.iters, self.objective, self.rel_subopt, self.seminorm_step, self.wall_ms)

    def with_reference(self, f_star: float) -> ConvergenceRecord:
        out = ConvergenceRecord()
        for k, f, _, d, ms in self.rows():
            out.append(k, f, relative_suboptimality(f, f_star), d, ms)
        return out

    def iterations_to(self, threshold: float) -> Optional[int]:
        for k, r in zip(self.iters, self.rel_subopt):
            if r <= threshold:
                return k
        return None


def relative_suboptimality(f: float, f_star: Optional[float]) -> float:
    if f_star is None:
        return math.nan
    return (f - f_star) / max(1.0, abs(f_star))


# --- metrics ---------------------------------------------------------------


class CirculantMetric:
    """M = gamma I + alpha C with C given by its spectral mask, or gamma I alone."""

    def __init__(self, gamma: float, alpha: float, mask: Optional[SpectralMask] = None, rel_tol: float = 1e-12):
        self.gamma = gamma
        self.h = None if mask is None else gamma + alpha * mask.values
        self.h_pinv = None if self.h is None else pinv_mask(self.h, rel_tol)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.gamma * x if self.h is None else apply_circulant(self.h, x)

    def solve(self, x: np.ndarray) -> np.ndarray:
        return x / self.gamma if self.h is None else apply_circulant(self.h_pinv, x)


class DenseMetric:
    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.matrix_pinv = sla.pinvh(0.5 * (self.matrix + self.matrix.T))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix @ x.ravel()).reshape(x.shape)

    def solve(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix_pinv @ x.ravel()).reshape(x.shape)


class NormalMetric:
    """alpha A^T A, the metric ADMM uses implicitly."""

    def __init__(self, problem: SplitProblem, alpha: float):
        self.problem = problem
        self.alpha = alpha

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.alpha * self.problem.normal(x)

    def solve(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError("ADMM metric is inverted by inner CG")


def build_metric(problem: SplitProblem, config: SolverConfig):
    if config.dense_metric is not None:
        n = math.prod(problem.domain_shape)
        if config.dense_metric.shape != (n, n):
            raise UsageError(f"dense_metric must be {n}x{n}, got {config.dense_metric.shape}")
        return DenseMetric(config.dense_metric)
    if config.mask is not None and config.mask.values.shape != problem.domain_shape:
        raise UsageError(f"Mask shape {config.mask.values.shape} does not match image shape {problem.domain_shape}")
    return CirculantMetric(config.gamma, config.alpha, config.mask, config.pinv_rel_tol)


# --- iterations ------------------------------------------------------------


def _check_finite(state: SolverState):
    if not np.all(np.isfinite(state.x)):
        raise DivergenceError(f"Non-finite values in x at iteration {state.k}")
    for i, ui in enumerate(state.u):
        if not np.all(np.isfinite(ui)):
            raise DivergenceError(f"Non-finite values in u[{i}] at iteration {state.k}")


def _dual_update(state: SolverState, x_new: np.ndarray, problem: SplitProblem, alpha: float) -> SolverState:
    xbar = 2.0 * x_new - state.x
    u_new = [
        blk.prox.evaluate(ui + alpha * (ax - blk.offset), alpha)
        for blk, ui, ax in zip(problem.blocks, state.u, problem.forward(xbar))
    ]
    new = SolverState(x_new, u_new, state.k + 1)
    _check_finite(new)
    return new


def ncs_step(state: SolverState, problem: SplitProblem, config: SolverConfig, metric=None) -> SolverState:
    metric = metric or build_metric(problem, config)
    x_new = state.x - metric.solve(problem.adjoint(state.u))
    return _dual_update(state, x_new, problem, config.alpha)


StepCallback = Callable[[SolverState, SolverState], None]


def _run(
    problem: SplitProblem,
    config: SolverConfig,
    step: Callable[[SolverState], SolverState],
    metric,
    label: str,
    axis_scale: int = 1,
    f_star: Optional[float] = None,
    state: Optional[SolverState] = None,
    callback: Optional[StepCallback] = None,
) -> tuple[SolverState, ConvergenceRecord]:
    state = state or SolverState.zeros(problem)
    record = ConvergenceRecord()
    seminorm_ok = True
    start = time.perf_counter()
    for it in tqdm(range(config.max_iters), desc=label, disable=not config.progress, leave=False):
        new = step(state)
        k = it + 1
        if k % config.record_every == 0 or k == config.max_iters:
            objective = problem.objective(new.x)
            step_d = math.nan
            if seminorm_ok:
                try:
                    step_d = seminorm_D(
                        new.x - state.x, [a - b for a, b in zip(new.u, state.u)], problem, config, metric
                    )
                except MetricError as e:
                    seminorm_ok = False
                    logger.warning("%s: D-seminorm undefined from iteration %d on (%s)", label, k, e)
            record.append(
                k * axis_scale,
                objective,
                relative_suboptimality(objective, f_star),
                step_d,
                (time.perf_counter() - start) * 1e3,
            )
        if callback is not None:
            callback(new, state)
        state = new
    return state, record


def ncs_solve(
    problem: SplitProblem,
    config: SolverConfig,
    f_star: Optional[float] = None,
    state: Optional[SolverState] = None,
    callback: Optional[StepCallback] = None,
) -> tuple[SolverState, ConvergenceRecord]:
    metric = build_metric(problem, config)
    if config.check_metric and config.max_iters > 0:
        ratio = metric_domination(problem, config, metric, seed=config.seed)
        if ratio > METRIC_RATIO_LIMIT:
            raise MetricError(
                f"M does not dominate alpha*A^T A (estimated ratio {ratio:.4g} > {METRIC_RATIO_LIMIT}); "
                "raise gamma or leave it unset to have it computed"
            )
        if ratio > 1.0 + 1e-6:
            msg = f"M does not dominate alpha*A^T A (estimated ratio {ratio:.4g}); convergence is not guaranteed"
            logger.warning(msg)
            warnings.warn(msg, MetricWarning, stacklevel=2)
    return _run(problem, config, lambda s: ncs_step(s, problem, config, metric), metric, "ncs", 1, f_star, state, callback)


def pdhg_solve(
    problem: SplitProblem,
    config: SolverConfig,
    f_star: Optional[float] = None,
    state: Optional[SolverState] = None,
    callback: Optional[StepCallback] = None,
) -> tuple[SolverState, ConvergenceRecord]:
    config = replace(config, mask=None, dense_metric=None)
    if config.max_iters > 0:
        lam = power_method(problem.normal, 100, config.seed, problem.domain_shape)
        if config.gamma / config.alpha < lam:
            msg = f"gamma/alpha = {config.gamma / config.alpha:.4g} is below lambda_max(A^T A) ~ {lam:.4g}"
            logger.warning(msg)
            warnings.warn(msg, StepSizeWarning, stacklevel=2)
    metric = build_metric(problem, config)
    return _run(problem, config, lambda s: ncs_step(s, problem, config, metric), metric, "pdhg", 1, f_star, state, callback)


def admm_cg_solve(
    problem: SplitProblem,
    config: SolverConfig,
    n_cg: Optional[int] = None,
    f_star: Optional[float] = None,
    state: Optional[SolverState] = None,
    callback: Optional[StepCallback] = None,
) -> tuple[SolverState, ConvergenceRecord]:
    """ADMM with (A^T A)^+ A^T u replaced by n_cg CG iterations; the record axis counts CG iterations."""
    n_cg = n_cg or config.n_cg
    if n_cg < 1:
        raise UsageError("n_cg must be >= 1")

    def step(s: SolverState) -> SolverState:
        d = cg(problem.normal, problem.adjoint(s.u), n_cg)
        return _dual_update(s, s.x - d / config.alpha, problem, config.alpha)

    metric = NormalMetric(problem, config.alpha)
    return _run(problem, config, step, metric, "admm", n_cg, f_star, state, callback)


def solve(problem: SplitProblem, config: SolverConfig, solver: str = "ncs", **kwargs) -> tuple[SolverState, ConvergenceRecord]:
    if solver == "ncs":
        return ncs_solve(problem, config, **kwargs)
    if solver == "pdhg":
        return pdhg_solve(problem, config, **kwargs)
    if solver == "admm":
        return admm_cg_solve(problem, config, **kwargs)
    raise UsageError(f"Unknown solver {solver!r}; expected one of {SOLVERS}")


# --- linear algebra helpers ------------------------------------------------


def _as_function(op) -> Callable[[np.ndarray], np.ndarray]:
    return op.forward if hasattr(op, "forward") else op


def cg(op, rhs: np.ndarray, n_iters: int) -> np.ndarray:
    """Fixed-count conjugate gradient from zero for a symmetric PSD operator.

    Stops early on an exact solve or a zero-curvature direction.
    """
    apply = _as_function(op)
    rhs = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rr = float(np.vdot(r, r))
    if rr == 0.0:
        return x
    p = r.copy()
    for i in range(n_iters):
        q = apply(p)
        pq = float(np.vdot(p, q))
        if not pq > 0.0:
            logger.debug("cg: zero curvature at iteration %d, stopping", i)
            break
        a = rr / pq
        x += a * p
        r -= a * q
        rr_new = float(np.vdot(r, r))
        if rr_new == 0.0:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def power_method(op, n_iters: int = 100, seed: int = 0, shape: Optional[tuple[int, ...]] = None) -> float:
    """Rayleigh-quotient estimate of lambda_max for a symmetric PSD operator."""
    apply = _as_function(op)
    shape = tuple(shape or getattr(op, "domain_shape", ()))
    if not shape:
        raise UsageError("power_method needs the operator's domain shape")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    for _ in range(n_iters):
        w = apply(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.vdot(v, apply(v)))


def metric_domination(problem: SplitProblem, config: SolverConfig, metric=None, n_iters: int = 50, seed: int = 0) -> float:
    """Estimate max over x of alpha <x, A^T A x> / <x, M x>; convergence needs <= 1."""
    metric = metric or build_metric(problem, config)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(problem.domain_shape)
    for _ in range(n_iters):
        w = metric.solve(config.alpha * problem.normal(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    num = config.alpha * float(np.vdot(v, problem.normal(v)))
    den = float(np.vdot(v, metric.apply(v)))
    return math.inf if den <= 0.0 else num / den


def largest_eigenvalue(op, shape: tuple[int, ...], seed: int = 0, tol: float = 1e-8) -> float:
    """Largest algebraic eigenvalue of a symmetric image-to-image operator (Lanczos)."""
    apply = _as_function(op)
    shape = tuple(shape)
    n = math.prod(shape)
    linop = spla.LinearOperator((n, n), matvec=lambda v: apply(np.asarray(v).reshape(shape)).ravel(), dtype=np.float64)
    if n <= 32:
        dense = np.column_stack([linop.matvec(e) for e in np.eye(n)])
        return float(np.linalg.eigvalsh(0.5 * (dense + dense.T)).max())
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        vals = spla.eigsh(linop, k=1, which="LA", v0=v0, tol=tol, return_eigenvectors=False)
    except spla.ArpackNoConvergence as e:
        if not len(e.eigenvalues):
            raise NumericalError("Lanczos did not converge for the largest eigenvalue") from e
        vals = e.eigenvalues
        logger.warning("largest_eigenvalue: Lanczos did not converge, using partial estimate %.6g", float(vals.max()))
    return float(np.max(vals))


def dominating_gamma(
    problem: SplitProblem,
    alpha: float,
    mask: Optional[SpectralMask] = None,
    margin: float = 1e-2,
    seed: int = 0,
) -> float:
    """gamma with gamma I + alpha C >= alpha A^T A, C from ``mask`` (C = 0 without one).

    gamma = alpha * lambda_max(A^T A - C) * (1 + margin), floored at a small
    positive value so M stays invertible.
    """
    if not alpha > 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    if mask is None:
        gap = largest_eigenvalue(problem.normal, problem.domain_shape, seed)
        peak = gap
    else:
        h = np.real(mask.values)
        gap = largest_eigenvalue(lambda x: problem.normal(x) - apply_circulant(h, x), problem.domain_shape, seed)
        peak = float(np.abs(h).max(initial=0.0))
    floor = 1e-6 * alpha * max(1.0, peak)
    gamma = max(alpha * max(gap, 0.0) * (1.0 + margin), floor)
    logger.info("dominating_gamma: lambda_max(A^T A - C)=%.6g -> gamma=%.6g", gap, gamma)
    return gamma


# --- analysis quantities ---------------------------------------------------


def _seminorm_parts(dx: np.ndarray, du: list[np.ndarray], problem: SplitProblem, config: SolverConfig, metric):
    metric = metric or build_metric(problem, config)
    alpha = config.alpha
    adx = problem.forward(dx)
    dual = sum(float(np.sum((dui - alpha * a) ** 2)) for dui, a in zip(du, adx))
    m_term = alpha * float(np.vdot(dx, metric.apply(dx)))
    a_term = alpha**2 * sum(float(np.vdot(a, a)) for a in adx)
    return dual, m_term, a_term


def seminorm_D(dx: np.ndarray, du: list[np.ndarray], problem: SplitProblem, config: SolverConfig, metric=None) -> float:
    """D(dx, du) = sqrt(||du - alpha A dx||^2 + ||dx||^2_{alpha M - alpha^2 A^T A})."""
    dual, m_term, a_term = _seminorm_parts(dx, du, problem, config, metric)
    radicand = dual + m_term - a_term
    if radicand < -1e-10 * max(1.0, dual + m_term + a_term):
        raise MetricError(f"D-seminorm radicand {radicand:.3e} < 0: alpha M - alpha^2 A^T A is not PSD")
    return math.sqrt(max(radicand, 0.0))


def rate_bound(
    k: int,
    x0: np.ndarray,
    u0: list[np.ndarray],
    x_star: np.ndarray,
    u_star: list[np.ndarray],
    L: float,
    problem: SplitProblem,
    config: SolverConfig,
    metric=None,
) -> float:
    """Upper bound on g(Ax^{k+1} - b) - g(Ax* - b) for L-Lipschitz g."""
    dx = x0 - x_star
    du = [a - b for a, b in zip(u0, u_star)]
    dual, m_term, a_term = _seminorm_parts(dx, du, problem, config, metric)
    quad = m_term - a_term
    if quad < -1e-10 * max(1.0, m_term + a_term):
        raise MetricError(f"||x0 - x*||^2 in alpha M - alpha^2 A^T A is {quad:.3e} < 0")
    u_norm = math.sqrt(sum(float(np.vdot(a, a)) for a in u_star))
    total = math.sqrt(dual) + u_norm + L + math.sqrt(max(quad, 0.0))
    return total**2 / (config.alpha * math.sqrt(k + 1))


@dataclass
class Reference:
    x_star: np.ndarray
    u_star: list[np.ndarray]
    objective_star: float
    converged: bool = True
    rel_change: float = 0.0
    iterations: int = 0

    def __iter__(self):
        return iter((self.x_star, self.u_star, self.objective_star))


def reference_key(problem: SplitProblem, config: SolverConfig, n_iters_ref: int) -> str:
    return array_digest(extra={"problem": problem.describe(), "config": config.describe(), "n_iters": n_iters_ref})[:16]


def _save_reference(path: Path, ref: Reference):
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"u_{i}": ui for i, ui in enumerate(ref.u_star)}
    np.savez(
        path,
        x_star=ref.x_star,
        objective_star=ref.objective_star,
        converged=ref.converged,
        rel_change=ref.rel_change,
        iterations=ref.iterations,
        **arrays,
    )


def _load_reference(path: Path, n_blocks: int) -> Reference:
    with np.load(path) as z:
        return Reference(
            x_star=z["x_star"],
            u_star=[z[f"u_{i}"] for i in range(n_blocks)],
            objective_star=float(z["objective_star"]),
            converged=bool(z["converged"]),
            rel_change=float(z["rel_change"]),
            iterations=int(z["iterations"]),
        )


def compute_reference(
    problem: SplitProblem,
    config: SolverConfig,
    n_iters_ref: Optional[int] = None,
    cache_dir: Optional[Path] = None,
) -> Reference:
    """Long NCS run defining x*, u* and f* for suboptimality; cached by problem hash."""
    n_iters_ref = n_iters_ref or 50 * config.max_iters
    if n_iters_ref < 1:
        raise UsageError("n_iters_ref must be >= 1")
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"reference-{reference_key(problem, config, n_iters_ref)}.npz"
        if path.exists():
            logger.info("Loading cached reference %s", path)
            return _load_reference(path, len(problem.blocks))

    cfg = replace(config, max_iters=n_iters_ref - 1, record_every=max(1, n_iters_ref))
    state, _ = ncs_solve(problem, cfg)
    f_prev = problem.objective(state.x)
    state = ncs_step(state, problem, config, build_metric(problem, config))
    f_star = problem.objective(state.x)
    change = abs(f_star - f_prev) / max(1.0, abs(f_star)) if math.isfinite(f_star) else math.inf
    ref = Reference(state.x, state.u, f_star, converged=change <= 1e-12, rel_change=change, iterations=n_iters_ref)
    if not ref.converged:
        msg = f"Reference objective still changing ({change:.3e} relative) after {n_iters_ref} iterations"
        logger.warning(msg)
        warnings.warn(msg, ReferenceWarning, stacklevel=2)
    if path is not None:
        _save_reference(path, ref)
    return ref
