"""Circulant approximations of normal operators, handled in the DFT domain.

Convention: the forward 2D DFT is unnormalized and the inverse carries the
1/N^2 factor (``scipy.fft`` defaults, ``norm="backward"``). A circulant
operator C acts as ``C x = ifft2(h * fft2(x))`` and its spectral mask ``h``
is indexed in DFT ordering, entry (j, k) holding frequency (j, k).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.fft as sfft

from .errors import ShapeError, UsageError
from .utils import fft_workers

logger = logging.getLogger(__name__)

CONVENTION = "unnormalized-forward"
DEFAULT_REL_TOL = 1e-12


@dataclass
class SpectralMask:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeError(f"Spectral mask must be square, got {self.values.shape}")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def is_conjugate_symmetric(self, atol: float = 1e-12) -> bool:
        mirrored = np.roll(np.flip(self.values, axis=(0, 1)), 1, axis=(0, 1))
        scale = max(1.0, float(np.abs(self.values).max(initial=0.0)))
        return bool(np.allclose(self.values, np.conj(mirrored), rtol=0.0, atol=atol * scale))

    def __add__(self, other: SpectralMask) -> SpectralMask:
        return SpectralMask(self.values + _values(other))

    def __mul__(self, scalar: float) -> SpectralMask:
        return SpectralMask(self.values * scalar)

    __rmul__ = __mul__


MaskLike = Union[SpectralMask, np.ndarray]


def _values(mask: MaskLike) -> np.ndarray:
    return mask.values if isinstance(mask, SpectralMask) else np.asarray(mask)


def apply_circulant(mask: MaskLike, x: np.ndarray) -> np.ndarray:
    """Real part of F^-1 (h * F x)."""
    h = _values(mask)
    x = np.asarray(x, dtype=np.float64)
    if h.shape != x.shape:
        raise ShapeError(f"Mask shape {h.shape} does not match image shape {x.shape}")
    workers = fft_workers()
    return sfft.ifft2(h * sfft.fft2(x, workers=workers), workers=workers).real


def pinv_mask(mask: MaskLike, rel_tol: float = DEFAULT_REL_TOL) -> SpectralMask:
    """Componentwise pseudoinverse; bins at or below rel_tol * max|h| map to 0."""
    if rel_tol < 0:
        raise UsageError("rel_tol must be nonnegative")
    h = np.asarray(_values(mask), dtype=np.complex128)
    mag = np.abs(h)
    peak = float(mag.max(initial=0.0))
    out = np.zeros_like(h)
    if peak == 0.0:
        return SpectralMask(out)
    keep = mag > rel_tol * peak
    out[keep] = 1.0 / h[keep]
    return SpectralMask(out)


def laplacian_mask_2d(N: int) -> SpectralMask:
    """Eigenvalues of the periodic 5-point Laplacian, 4(sin^2(j pi/N) + sin^2(k pi/N))."""
    if N < 1:
        raise UsageError("N must be >= 1")
    s = np.sin(np.arange(N) * np.pi / N) ** 2
    return SpectralMask(4.0 * (s[:, None] + s[None, :]))


def folded_frequencies(N: int) -> np.ndarray:
    j = np.arange(N)
    return np.minimum(j, N - j)


def radon_mask(N: int, scale_C_R: float, dc_value: float) -> SpectralMask:
    """C_R / |omega| mask of the parallel-beam normal operator with a tuned DC bin."""
    if N < 2:
        raise UsageError("N must be >= 2")
    if scale_C_R <= 0:
        raise UsageError(f"scale_C_R must be positive, got {scale_C_R}")
    if dc_value < 0:
        raise UsageError(f"dc_value must be nonnegative, got {dc_value}")
    f = folded_frequencies(N).astype(np.float64)
    r2 = f[:, None] ** 2 + f[None, :] ** 2
    r2[0, 0] = 1.0
    h = scale_C_R / np.sqrt(r2)
    h[0, 0] = dc_value
    return SpectralMask(h, meta={"C_R": float(scale_C_R), "dc_value": float(dc_value)})


def _as_callable(normal_op) -> tuple[Callable[[np.ndarray], np.ndarray], tuple[int, int] | None]:
    shape = getattr(normal_op, "domain_shape", None)
    if hasattr(normal_op, "forward"):
        return normal_op.forward, shape
    return normal_op, shape


def empirical_mask(normal_op, n_samples: int = 10, rng_seed: int = 0, shape: tuple[int, int] | None = None) -> SpectralMask:
    """Per-bin least-squares fit of F op(v) ~ h * F v over Gaussian probes v.

    Each bin is sum conj(F v) F op(v) / sum |F v|^2, a ratio of means, so a
    single probe with a near-zero coefficient cannot dominate the estimate.
    ``normal_op`` is an image-to-image map (a LinearMap or a callable); the
    caller composes A^T A. Bins whose probe coefficient falls below
    1e-12 * ||F v|| are left out for that probe; bins left out by every probe
    are set to 0 and listed in ``meta["skipped_bins"]``.
    """
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    op, op_shape = _as_callable(normal_op)
    shape = tuple(shape or op_shape or ())
    if len(shape) != 2:
        raise ShapeError("empirical_mask needs a 2D image shape")

    rng = np.random.default_rng(rng_seed)
    workers = fft_workers()
    num = np.zeros(shape, dtype=np.complex128)
    den = np.zeros(shape, dtype=np.float64)
    for _ in range(n_samples):
        v = rng.standard_normal(shape)
        fv = sfft.fft2(v, workers=workers)
        fav = sfft.fft2(np.asarray(op(v), dtype=np.float64).reshape(shape), workers=workers)
        ok = np.abs(fv) >= 1e-12 * np.linalg.norm(fv)
        num[ok] += np.conj(fv[ok]) * fav[ok]
        den[ok] += np.abs(fv[ok]) ** 2

    h = np.zeros(shape, dtype=np.complex128)
    seen = den > 0
    h[seen] = num[seen] / den[seen]
    skipped = [tuple(int(i) for i in ij) for ij in np.argwhere(~seen)]
    if skipped:
        logger.warning("empirical_mask: %d frequency bins never sampled, set to 0", len(skipped))
    return SpectralMask(h, meta={"n_samples": n_samples, "rng_seed": rng_seed, "skipped_bins": skipped})


def nonnegative_part(mask: MaskLike) -> SpectralMask:
    """Real part clamped at 0: the symmetric PSD circulant closest to ``mask`` bin by bin."""
    values = _values(mask)
    real = np.maximum(np.real(values), 0.0)
    clipped = int(np.count_nonzero(np.real(values) < 0))
    if clipped:
        logger.info("nonnegative_part: clamped %d negative bins (min %.4g)", clipped, float(np.real(values).min()))
    meta = dict(mask.meta) if isinstance(mask, SpectralMask) else {}
    meta["clamped_bins"] = clipped
    return SpectralMask(real, meta=meta)


def calibrate_scale(normal_op, template: MaskLike, n_samples: int = 10, rng_seed: int = 0) -> float:
    """Least-squares c with F op(v) ~ c * template * F v over probes, DC excluded."""
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    t = np.array(_values(template), dtype=np.complex128)
    t[0, 0] = 0.0
    if not np.any(t):
        raise UsageError("calibrate_scale: template is zero away from DC")
    op, _ = _as_callable(normal_op)

    rng = np.random.default_rng(rng_seed)
    workers = fft_workers()
    num = 0.0
    den = 0.0
    for _ in range(n_samples):
        v = rng.standard_normal(t.shape)
        fv = sfft.fft2(v, workers=workers)
        fav = sfft.fft2(np.asarray(op(v), dtype=np.float64).reshape(t.shape), workers=workers)
        model = t * fv
        model[0, 0] = 0.0
        fav[0, 0] = 0.0
        num += float(np.real(np.vdot(model, fav)))
        den += float(np.real(np.vdot(model, model)))
    c = num / den
    logger.debug("calibrate_scale: c=%.6g over %d probes", c, n_samples)
    return c
