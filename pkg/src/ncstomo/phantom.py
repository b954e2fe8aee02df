"""Ellipse phantoms and simulated CT/PET measurements."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from skimage.draw import ellipse as draw_ellipse

from .errors import DataError, UsageError
from .ops import LinearMap

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_FRACTION = 0.005


@dataclass
class Ellipse:
    """Ellipse in normalized coordinates: the image spans [-1, 1] on both axes, y up."""

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float  # degrees, counter-clockwise
    intensity: float

    def __post_init__(self):
        self.center = (float(self.center[0]), float(self.center[1]))
        self.axes = (float(self.axes[0]), float(self.axes[1]))
        if not all(math.isfinite(v) for v in (*self.center, *self.axes, self.angle, self.intensity)):
            raise UsageError(f"Ellipse parameters must be finite: {self}")
        if min(self.axes) <= 0:
            raise UsageError(f"Ellipse axes must be positive: {self.axes}")


# (x0, y0, a, b, angle in degrees, intensity)
SHEPP_LOGAN = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
)


def shepp_logan_ellipses() -> list[Ellipse]:
    return [Ellipse((x0, y0), (a, b), phi, rho) for x0, y0, a, b, phi, rho in SHEPP_LOGAN]


@dataclass
class PhantomSpec:
    N: int
    ellipses: list[Ellipse] = field(default_factory=shepp_logan_ellipses)

    def to_dict(self) -> dict:
        return {"N": self.N, "ellipses": [asdict(e) for e in self.ellipses]}

    @classmethod
    def from_dict(cls, d: dict, N: Optional[int] = None) -> PhantomSpec:
        try:
            size = int(N if N is not None else d["N"])
            ellipses = [
                Ellipse(tuple(e["center"]), tuple(e["axes"]), float(e.get("angle", 0.0)), float(e["intensity"]))
                for e in d["ellipses"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"Invalid phantom spec: {e}") from e
        return cls(size, ellipses)


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Sum of ellipse indicators sampled at pixel centres."""
    N = spec.N
    if N < 8:
        raise UsageError(f"Phantom size must be >= 8, got {N}")
    img = np.zeros((N, N))
    half = N / 2
    mid = (N - 1) / 2
    for e in spec.ellipses:
        rr, cc = draw_ellipse(
            mid - e.center[1] * half,
            mid + e.center[0] * half,
            e.axes[1] * half,
            e.axes[0] * half,
            shape=(N, N),
            rotation=np.deg2rad(e.angle),
        )
        img[rr, cc] += e.intensity
    return img


# --- noise -----------------------------------------------------------------


@dataclass
class NoiseSpec:
    kind: str = "gaussian"  # gaussian | poisson
    sigma: Optional[float] = None  # absolute; None means DEFAULT_SIGMA_FRACTION of max(Ex)
    sigma_fraction: Optional[float] = None
    exposure_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise UsageError(f"Unknown noise kind {self.kind!r}")
        if self.sigma is not None and self.sigma < 0:
            raise UsageError("sigma must be >= 0")
        if self.sigma_fraction is not None and self.sigma_fraction < 0:
            raise UsageError("sigma fraction must be >= 0")
        if not self.exposure_scale > 0:
            raise UsageError("exposure_scale must be > 0")

    def sigma_for(self, clean: np.ndarray) -> float:
        if self.sigma is not None:
            return self.sigma
        frac = DEFAULT_SIGMA_FRACTION if self.sigma_fraction is None else self.sigma_fraction
        return frac * float(np.max(clean, initial=0.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSpec:
        return cls(**{k: d[k] for k in ("kind", "sigma", "sigma_fraction", "exposure_scale", "seed") if k in d})


def parse_noise(text: str, seed: int = 0) -> NoiseSpec:
    """'gaussian', 'gaussian:SIGMA', 'gaussian:P%' or 'poisson:SCALE'."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    arg = arg.strip()
    try:
        if kind == "gaussian":
            if not arg:
                return NoiseSpec("gaussian", seed=seed)
            if arg.endswith("%"):
                return NoiseSpec("gaussian", sigma_fraction=float(arg[:-1]) / 100, seed=seed)
            return NoiseSpec("gaussian", sigma=float(arg), seed=seed)
        if kind == "poisson":
            return NoiseSpec("poisson", exposure_scale=float(arg) if arg else 1.0, seed=seed)
    except ValueError as e:
        raise UsageError(f"Bad noise spec {text!r}: {e}") from e
    raise UsageError(f"Bad noise spec {text!r}; expected gaussian[:SIGMA|:P%] or poisson:SCALE")


def simulate_ct(x: np.ndarray, E: LinearMap, noise: NoiseSpec) -> np.ndarray:
    """b = E x + sigma * n with n standard normal from the noise seed."""
    clean = E.forward(np.asarray(x, dtype=np.float64))
    sigma = noise.sigma_for(clean)
    logger.info("simulate_ct: sigma=%.6g seed=%d", sigma, noise.seed)
    if sigma == 0.0:
        return clean
    rng = np.random.default_rng(noise.seed)
    return clean + sigma * rng.standard_normal(clean.shape)


def simulate_pet(x: np.ndarray, E: LinearMap, exposure_scale: float, seed: int) -> np.ndarray:
    """b_i ~ Poisson(exposure_scale * (E x)_i).

    numpy's Generator.poisson samples by inversion for small means and by
    transformed rejection for large ones, so (x, seed) fixes the counts.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DataError(f"PET activity must be nonnegative (min {x.min():.3g})")
    if not exposure_scale > 0:
        raise UsageError("exposure_scale must be > 0")
    mean = np.maximum(exposure_scale * E.forward(x), 0.0)
    rng = np.random.default_rng(seed)
    return rng.poisson(mean).astype(np.int64)


def simulate(x: np.ndarray, E: LinearMap, noise: NoiseSpec) -> np.ndarray:
    if noise.kind == "poisson":
        return simulate_pet(x, E, noise.exposure_scale, noise.seed).astype(np.float64)
    return simulate_ct(x, E, noise)
