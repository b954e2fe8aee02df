"""TV-regularized CT and PET problems in split form, plus their circulant masks.

CT:   minimize 1/2 ||E x - b||^2 + lam ||D x||_1
PET:  minimize sum_i (s E x)_i - b_i log (s E x)_i + lam ||D x||_1

Both are written as g(A x - b) with A = [s E; (beta/alpha) D] so that the
dual step alpha and the regularization balance beta stay separate knobs.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .circulant import SpectralMask, calibrate_scale, empirical_mask, laplacian_mask_2d, nonnegative_part, radon_mask
from .errors import UsageError
from .ops import GradientMap, IdentityMap, LinearMap, NormalMap
from .prox import L1Conj, NonnegConj, PoissonConj, QuadraticConj
from .solvers import Block, SolverConfig, SplitProblem, dominating_gamma

logger = logging.getLogger(__name__)

# Parameter sets for the desk-scale analogues of the published runs.
# "lam" is the TV weight; alpha/beta follow SolverConfig and ct_problem.
# gamma and the projection DC bin are left out: the published values assume
# another projector scaling, so config_for derives them from the operator
# (dominating_gamma, natural_dc) unless given explicitly.
PRESETS: dict[str, dict[str, dict]] = {
    "ct-parallel": {
        "ncs": {"alpha": 1e-2, "beta": 1e-2, "lam": 1.0},
        "pdhg": {"alpha": 1e-2, "beta": 3e-2, "lam": 1.0},
        "admm": {"alpha": 1.0, "beta": 3e-3, "n_cg": 10, "lam": 1.0},
    },
    "ct-fan": {
        "ncs": {"alpha": 3e-3, "beta": 1e-2, "lam": 10.0},
        "pdhg": {"alpha": 1e-3, "beta": 3e-3, "lam": 10.0},
        "admm": {"alpha": 1e-4, "beta": 3e-2, "n_cg": 10, "lam": 10.0},
    },
    "pet": {
        "ncs": {"alpha": 1e-3, "beta": 1e-3, "lam": 1e-3},
        "pdhg": {"alpha": 1e-2, "beta": 1e-2, "lam": 1e-3},
        "admm": {"alpha": 3e-4, "beta": 3e-1, "n_cg": 10, "lam": 1e-3},
    },
}


def preset(model: str, geometry: str, solver: str) -> dict:
    key = "pet" if model == "pet" else f"ct-{geometry}"
    try:
        return dict(PRESETS[key][solver])
    except KeyError:
        raise UsageError(f"No preset for model={model} geometry={geometry} solver={solver}") from None


def _check_scales(lam: float, alpha: float, beta: float):
    if lam < 0:
        raise UsageError(f"lambda must be nonnegative, got {lam}")
    if not alpha > 0 or not beta > 0:
        raise UsageError(f"alpha and beta must be positive, got alpha={alpha} beta={beta}")


def _regularizer_blocks(shape: tuple[int, ...], lam: float, alpha: float, beta: float, positivity: bool) -> list[Block]:
    if len(shape) != 2 or shape[0] != shape[1]:
        raise UsageError(f"TV problems need a square image domain, got {shape}")
    blocks = [Block(beta / alpha, GradientMap(shape[0]), L1Conj(lam * alpha / beta), name="tv")]
    if positivity:
        blocks.append(Block(1.0, IdentityMap(shape), NonnegConj(), name="positivity"))
    return blocks


def ct_problem(E: LinearMap, b: np.ndarray, lam: float, alpha: float, beta: float, positivity: bool = False) -> SplitProblem:
    _check_scales(lam, alpha, beta)
    data = Block(1.0, E, QuadraticConj(), offset=b, name="data")
    return SplitProblem([data, *_regularizer_blocks(E.domain_shape, lam, alpha, beta, positivity)])


def pet_problem(
    E: LinearMap,
    counts: np.ndarray,
    lam: float,
    alpha: float,
    beta: float,
    exposure_scale: float = 1.0,
    positivity: bool = False,
) -> SplitProblem:
    _check_scales(lam, alpha, beta)
    if not exposure_scale > 0:
        raise UsageError(f"exposure_scale must be positive, got {exposure_scale}")
    data = Block(exposure_scale, E, PoissonConj(counts), name="data")
    return SplitProblem([data, *_regularizer_blocks(E.domain_shape, lam, alpha, beta, positivity)])


def natural_dc(op: LinearMap) -> float:
    """DC eigenvalue of the best circulant fit of A^T A: ||A 1||^2 / n."""
    ones = np.ones(op.domain_shape)
    a1 = op.forward(ones)
    return float(np.vdot(a1, a1)) / ones.size


def projection_mask(
    op: LinearMap,
    dc_value: Optional[float] = None,
    n_samples: int = 10,
    seed: int = 0,
) -> SpectralMask:
    """Circulant fit of E^T E: calibrated C_R/|omega| for parallel beam, sampled otherwise.

    The DC bin defaults to natural_dc(op). Sampled masks are reduced to their
    nonnegative real part so the resulting C is symmetric PSD.
    """
    if dc_value is not None and dc_value < 0:
        raise UsageError(f"dc_value must be nonnegative, got {dc_value}")
    dc = natural_dc(op) if dc_value is None else dc_value
    meta = getattr(op, "meta", {})
    normal = NormalMap(op)
    if meta.get("geometry") == "parallel":
        N = op.domain_shape[0]
        scale = calibrate_scale(normal, radon_mask(N, 1.0, 0.0), n_samples, seed)
        logger.info("Radon mask: C_R=%.6g dc=%.6g", scale, dc)
        return radon_mask(N, scale, dc)
    mask = nonnegative_part(empirical_mask(normal, n_samples, seed))
    mask.values[0, 0] = dc
    return mask


def ct_metric_mask(
    problem: SplitProblem,
    dc_value: Optional[float] = None,
    n_samples: int = 10,
    seed: int = 0,
    data_mask: Optional[SpectralMask] = None,
) -> SpectralMask:
    """C ~ A^T A assembled block by block from weight^2 times each block's mask.

    ``data_mask`` replaces the projection block's estimate, e.g. a mask read
    from disk; only its nonnegative real part is used. ``dc_value`` sets that
    block's DC bin (before weighting).
    """
    N = problem.domain_shape[0]
    total = SpectralMask(np.zeros(problem.domain_shape))
    for blk in problem.blocks:
        if isinstance(blk.op, GradientMap):
            part = laplacian_mask_2d(N)
        elif isinstance(blk.op, IdentityMap):
            part = SpectralMask(np.ones(problem.domain_shape))
        elif data_mask is not None:
            part = nonnegative_part(data_mask)
        else:
            part = projection_mask(blk.op, dc_value, n_samples, seed)
        total = total + blk.weight**2 * part
    return total


def config_for(
    problem: SplitProblem,
    solver: str,
    alpha: float,
    gamma: Optional[float] = None,
    max_iters: int = 1000,
    dc_value: Optional[float] = None,
    mask: Optional[SpectralMask] = None,
    **kwargs,
) -> SolverConfig:
    """SolverConfig for a solver, estimating the NCS mask when none is given.

    With ``gamma=None`` NCS and PDHG get the smallest gamma (plus 1%) for
    which M dominates alpha A^T A; ADMM ignores gamma.
    """
    if solver == "ncs" and mask is None:
        mask = ct_metric_mask(problem, dc_value, seed=kwargs.get("seed", 0))
    if solver != "ncs":
        mask = None
    if gamma is None:
        gamma = 0.0 if solver == "admm" else dominating_gamma(problem, alpha, mask, seed=kwargs.get("seed", 0))
    return SolverConfig(alpha=alpha, gamma=gamma, kind=solver, mask=mask, max_iters=max_iters, dc_value=dc_value, **kwargs)
