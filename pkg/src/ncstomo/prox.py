"""Proximal operators of conjugate functions, prox_{alpha g*}, for the dual updates.

Each ``ProxConj`` also carries the primal prox ``prox_{t g}`` so that the pair
can be checked against Moreau's identity
``prox_{alpha g*}(z) = z - alpha * prox_{g/alpha}(z / alpha)``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from typing import Callable

import numpy as np

from .errors import DataError, UsageError
from .utils import array_digest


def prox_conj_quadratic(z: np.ndarray, alpha: float) -> np.ndarray:
    """g(y) = 1/2 ||y||^2."""
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    return np.asarray(z, dtype=np.float64) / (1.0 + alpha)


def project_box(z: np.ndarray, s: float) -> np.ndarray:
    """Componentwise clamp to [-s, s]; the conjugate prox of s ||.||_1."""
    if s < 0:
        raise UsageError("box radius must be nonnegative")
    return np.clip(np.asarray(z, dtype=np.float64), -s, s)


def prox_conj_poisson(u: np.ndarray, c: np.ndarray | float) -> np.ndarray:
    """S(u; c) = 1 + (u - 1 - sqrt((u-1)^2 + 4c)) / 2, with c = alpha * b."""
    u = np.asarray(u, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0):
        raise UsageError("Poisson prox needs c >= 0")
    w = u - 1.0
    out = 1.0 + 0.5 * (w - np.sqrt(w * w + 4.0 * c))
    # c = 0 reduces to min(u, 1); evaluate it directly so no rounding enters
    return np.where(c == 0.0, np.minimum(u, 1.0), out)


def prox_conj_nonneg(u: np.ndarray) -> np.ndarray:
    """(delta_{R+})* = delta_{R-}: projection onto the nonpositive orthant."""
    return np.minimum(np.asarray(u, dtype=np.float64), 0.0)


def moreau_conj(prox_g: Callable[[np.ndarray, float], np.ndarray], z: np.ndarray, alpha: float) -> np.ndarray:
    """prox_{alpha g*}(z) from ``prox_g(w, t) = prox_{t g}(w)``."""
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    z = np.asarray(z, dtype=np.float64)
    return z - alpha * prox_g(z / alpha, 1.0 / alpha)


def soft_threshold(w: np.ndarray, t: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.sign(w) * np.maximum(np.abs(w) - t, 0.0)


class ProxConj(ABC):
    @abstractmethod
    def evaluate(self, z: np.ndarray, alpha: float) -> np.ndarray:
        """prox_{alpha g*}(z)."""

    @abstractmethod
    def prox_primal(self, w: np.ndarray, t: float) -> np.ndarray:
        """prox_{t g}(w)."""

    @abstractmethod
    def objective(self, y: np.ndarray) -> float: ...

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class QuadraticConj(ProxConj):
    def evaluate(self, z, alpha):
        return prox_conj_quadratic(z, alpha)

    def prox_primal(self, w, t):
        return np.asarray(w, dtype=np.float64) / (1.0 + t)

    def objective(self, y):
        y = np.asarray(y, dtype=np.float64)
        return 0.5 * float(np.vdot(y, y))


class L1Conj(ProxConj):
    """g(y) = radius * ||y||_1."""

    def __init__(self, radius: float):
        if radius < 0:
            raise UsageError("radius must be nonnegative")
        self.radius = float(radius)

    def evaluate(self, z, alpha):
        return project_box(z, self.radius)

    def prox_primal(self, w, t):
        return soft_threshold(w, t * self.radius)

    def objective(self, y):
        return self.radius * float(np.abs(y).sum())

    def lipschitz(self, size: int) -> float:
        return self.radius * math.sqrt(size)

    def describe(self):
        return {"kind": "L1Conj", "radius": self.radius}


class PoissonConj(ProxConj):
    """g(y) = sum_i l(y_i; b_i), the Poisson negative log-likelihood up to constants."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)
        if np.any(self.counts < 0):
            raise DataError(f"Poisson counts must be nonnegative (min {self.counts.min():.4g})")

    def evaluate(self, z, alpha):
        if alpha <= 0:
            raise UsageError("alpha must be positive")
        return prox_conj_poisson(z, alpha * self.counts)

    def prox_primal(self, w, t):
        w = np.asarray(w, dtype=np.float64) - t
        return 0.5 * (w + np.sqrt(w * w + 4.0 * t * self.counts))

    def objective(self, y):
        y = np.asarray(y, dtype=np.float64)
        b = self.counts
        if np.any(y < 0) or np.any((y == 0) & (b > 0)):
            return math.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(b > 0, b * np.log(np.where(b > 0, y, 1.0)), 0.0)
        return float(np.sum(y - logs))

    def describe(self):
        return {"kind": "PoissonConj", "counts": array_digest(self.counts)}


class NonnegConj(ProxConj):
    """g = delta_{R+}; reported objective is 0 (constraint met only in the limit)."""

    def evaluate(self, z, alpha):
        return prox_conj_nonneg(z)

    def prox_primal(self, w, t):
        return np.maximum(np.asarray(w, dtype=np.float64), 0.0)

    def objective(self, y):
        return 0.0
