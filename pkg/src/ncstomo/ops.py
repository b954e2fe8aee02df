"""Linear forward/adjoint operators on N x N images.

Image coordinates: pixel (i, j) (row, column) is centred at
u = j - (N-1)/2, v = (N-1)/2 - i with unit pitch. Every operator here is
stored so that ``adjoint`` is the exact transpose of ``forward``.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .circulant import MaskLike, apply_circulant
from .errors import GeometryError, ShapeError
from .utils import array_digest

logger = logging.getLogger(__name__)


class LinearMap(ABC):
    domain_shape: tuple[int, ...]
    range_shape: tuple[int, ...]

    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def adjoint(self, y: np.ndarray) -> np.ndarray: ...

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def describe(self) -> dict:
        return {"kind": type(self).__name__, "domain": list(self.domain_shape), "range": list(self.range_shape)}

    def _check(self, a: np.ndarray, shape: tuple[int, ...], what: str) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if a.size != math.prod(shape):
            raise ShapeError(f"{type(self).__name__}.{what}: expected {shape}, got {a.shape}")
        return a


class IdentityMap(LinearMap):
    def __init__(self, shape: Sequence[int]):
        self.domain_shape = self.range_shape = tuple(shape)

    def forward(self, x):
        return self._check(x, self.domain_shape, "forward").reshape(self.range_shape).copy()

    def adjoint(self, y):
        return self._check(y, self.range_shape, "adjoint").reshape(self.domain_shape).copy()


class DenseMap(LinearMap):
    """Explicit matrix; small-instance oracle for exact ADMM and equivalence tests."""

    def __init__(self, matrix: np.ndarray, domain_shape: Sequence[int] | None = None, range_shape: Sequence[int] | None = None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError("DenseMap needs a 2D matrix")
        m, n = self.matrix.shape
        self.domain_shape = tuple(domain_shape) if domain_shape else (n,)
        self.range_shape = tuple(range_shape) if range_shape else (m,)
        if math.prod(self.domain_shape) != n or math.prod(self.range_shape) != m:
            raise ShapeError(f"Shapes {self.domain_shape}->{self.range_shape} do not fit a {m}x{n} matrix")

    def forward(self, x):
        x = self._check(x, self.domain_shape, "forward")
        return (self.matrix @ x.ravel()).reshape(self.range_shape)

    def adjoint(self, y):
        y = self._check(y, self.range_shape, "adjoint")
        return (self.matrix.T @ y.ravel()).reshape(self.domain_shape)

    def pinv(self) -> np.ndarray:
        return sla.pinv(self.matrix)

    def normal_pinv(self, rcond: float = 1e-12) -> np.ndarray:
        """(A^T A)^+ from the SVD of A."""
        _, s, vt = sla.svd(self.matrix, full_matrices=False)
        keep = s > rcond * (s[0] if s.size else 0.0)
        v = vt[keep].T
        return (v / s[keep] ** 2) @ v.T

    def describe(self):
        return {**super().describe(), "digest": array_digest(self.matrix)}


def dense_map(matrix: np.ndarray, domain_shape: Sequence[int] | None = None, range_shape: Sequence[int] | None = None) -> DenseMap:
    return DenseMap(matrix, domain_shape, range_shape)


class SparseMap(LinearMap):
    def __init__(self, matrix: sp.spmatrix, domain_shape: Sequence[int], range_shape: Sequence[int], meta: dict | None = None):
        self.matrix = sp.csr_matrix(matrix, dtype=np.float64)
        self.matrix.sum_duplicates()
        self._matrix_t = self.matrix.T.tocsr()
        self.domain_shape = tuple(domain_shape)
        self.range_shape = tuple(range_shape)
        self.meta = dict(meta or {})
        m, n = self.matrix.shape
        if math.prod(self.domain_shape) != n or math.prod(self.range_shape) != m:
            raise ShapeError(f"Shapes {self.domain_shape}->{self.range_shape} do not fit a {m}x{n} matrix")

    def forward(self, x):
        x = self._check(x, self.domain_shape, "forward")
        return (self.matrix @ x.ravel()).reshape(self.range_shape)

    def adjoint(self, y):
        y = self._check(y, self.range_shape, "adjoint")
        return (self._matrix_t @ y.ravel()).reshape(self.domain_shape)

    def describe(self):
        if self.meta:
            return {**super().describe(), **self.meta}
        coo = self.matrix.tocoo()
        return {**super().describe(), "digest": array_digest(coo.row, coo.col, coo.data)}


# --- parallel beam ---------------------------------------------------------


def min_detectors(N: int) -> int:
    n = math.ceil(math.sqrt(2) * N)
    return n if n % 2 else n + 1


def default_detectors(N: int) -> int:
    n = math.ceil(math.sqrt(2) * N + 1)
    return n if n % 2 else n + 1


def _check_coverage(N: int, n_detectors: int):
    if n_detectors % 2 == 0:
        raise GeometryError(f"n_detectors must be odd, got {n_detectors}")
    if n_detectors < min_detectors(N):
        raise GeometryError(f"{n_detectors} detectors do not cover a {N}x{N} image (need >= {min_detectors(N)})")


def _radon_matrix(N: int, n_angles: int, n_detectors: int) -> sp.csr_matrix:
    """Ray-driven bilinear sampling at unit steps along every (theta, s) line."""
    center = (N - 1) / 2
    theta = np.pi * np.arange(n_angles) / n_angles
    s = np.arange(n_detectors) - (n_detectors - 1) / 2
    half = math.ceil(math.sqrt(2) * (N + 1) / 2)
    t = np.arange(-half, half + 1, dtype=np.float64)

    rows, cols, vals = [], [], []
    for a, th in enumerate(theta):
        c, sn = math.cos(th), math.sin(th)
        u = s[:, None] * c - t[None, :] * sn
        v = s[:, None] * sn + t[None, :] * c
        cc = u + center
        rr = center - v
        c0 = np.floor(cc)
        r0 = np.floor(rr)
        fc = cc - c0
        fr = rr - r0
        c0 = c0.astype(np.int64)
        r0 = r0.astype(np.int64)
        ray = np.broadcast_to((a * n_detectors + np.arange(n_detectors))[:, None], cc.shape)
        corners = (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        )
        for dr, dc, w in corners:
            ri = r0 + dr
            ci = c0 + dc
            ok = (ri >= 0) & (ri < N) & (ci >= 0) & (ci < N) & (w > 0)
            rows.append(ray[ok])
            cols.append((ri * N + ci)[ok])
            vals.append(w[ok])

    m = n_angles * n_detectors
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, N * N),
    )
    return mat.tocsr()


class RadonTransform(SparseMap):
    """Discrete Radon transform; angles t*pi/n_angles, detectors centred with unit spacing."""

    def __init__(self, N: int, n_angles: int, n_detectors: int | None = None):
        n_detectors = n_detectors or default_detectors(N)
        _check_coverage(N, n_detectors)
        if n_angles < 1:
            raise GeometryError("n_angles must be >= 1")
        self.N, self.n_angles, self.n_detectors = N, n_angles, n_detectors
        super().__init__(
            _radon_matrix(N, n_angles, n_detectors),
            domain_shape=(N, N),
            range_shape=(n_angles, n_detectors),
            meta={"geometry": "parallel", "N": N, "n_angles": n_angles, "n_detectors": n_detectors},
        )


@lru_cache(maxsize=8)
def radon_operator(N: int, n_angles: int, n_detectors: int | None = None) -> RadonTransform:
    return RadonTransform(N, n_angles, n_detectors)


def radon_forward(x: np.ndarray, n_angles: int, n_detectors: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"radon_forward needs a square image, got {x.shape}")
    return radon_operator(x.shape[0], n_angles, n_detectors).forward(x)


def radon_adjoint(s: np.ndarray, N: int) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"radon_adjoint needs a 2D sinogram, got {s.shape}")
    return radon_operator(N, s.shape[0], s.shape[1]).adjoint(s)


# --- fan beam --------------------------------------------------------------


def default_fan_angle(N: int, source_radius: float) -> float:
    return 2.0 * math.asin(min(1.0, (N * math.sqrt(2) / 2) / source_radius))


def _siddon_ray(src: np.ndarray, d: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    half = N / 2
    t_in, t_out = -np.inf, np.inf
    for a in range(2):
        if abs(d[a]) < 1e-15:
            if not -half <= src[a] <= half:
                return np.empty(0, np.int64), np.empty(0)
            continue
        ta = (-half - src[a]) / d[a]
        tb = (half - src[a]) / d[a]
        t_in = max(t_in, min(ta, tb))
        t_out = min(t_out, max(ta, tb))
    if not t_out > t_in:
        return np.empty(0, np.int64), np.empty(0)

    planes = -half + np.arange(N + 1)
    ts = [np.array([t_in, t_out])]
    for a in range(2):
        if abs(d[a]) >= 1e-15:
            ta = (planes - src[a]) / d[a]
            ts.append(ta[(ta > t_in) & (ta < t_out)])
    ts = np.unique(np.concatenate(ts))

    seg = np.diff(ts)
    mid = 0.5 * (ts[:-1] + ts[1:])
    u = src[0] + mid * d[0]
    v = src[1] + mid * d[1]
    j = np.clip(np.floor(u + half).astype(np.int64), 0, N - 1)
    i = np.clip(np.floor(half - v).astype(np.int64), 0, N - 1)
    keep = seg > 1e-12
    return (i * N + j)[keep], seg[keep]


def build_fanbeam(
    N: int,
    n_views: int,
    n_rays: int,
    source_radius: float | None = None,
    fan_angle: float | None = None,
) -> SparseMap:
    """Siddon ray/pixel intersection-length system matrix for a circular fan-beam scan.

    Views are spread over [0, 2 pi); rays are equi-angular across the fan.
    """
    source_radius = float(source_radius if source_radius is not None else N)
    if source_radius <= N * math.sqrt(2) / 2:
        raise GeometryError(f"Source radius {source_radius} lies inside the image corner circle")
    fan_angle = float(fan_angle if fan_angle is not None else default_fan_angle(N, source_radius))
    if not 0 < fan_angle < np.pi:
        raise GeometryError(f"fan_angle must lie in (0, pi), got {fan_angle}")

    rows, cols, vals = [], [], []
    offsets = -fan_angle / 2 + (np.arange(n_rays) + 0.5) * fan_angle / n_rays
    for view in range(n_views):
        beta = 2 * np.pi * view / n_views
        src = source_radius * np.array([math.cos(beta), math.sin(beta)])
        for r, phi in enumerate(offsets):
            ang = beta + np.pi + phi
            d = np.array([math.cos(ang), math.sin(ang)])
            idx, seg = _siddon_ray(src, d, N)
            rows.append(np.full(idx.size, view * n_rays + r, dtype=np.int64))
            cols.append(idx)
            vals.append(seg)

    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_views * n_rays, N * N),
    )
    meta = {
        "geometry": "fan",
        "N": N,
        "n_views": n_views,
        "n_rays": n_rays,
        "source_radius": source_radius,
        "fan_angle": fan_angle,
    }
    logger.debug("fan-beam matrix %s with %d nonzeros", mat.shape, mat.nnz)
    return SparseMap(mat, domain_shape=(N, N), range_shape=(n_views, n_rays), meta=meta)


# --- finite differences ----------------------------------------------------


@dataclass
class GradField:
    horizontal: np.ndarray  # N x (N-1)
    vertical: np.ndarray  # (N-1) x N

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.horizontal.ravel(), self.vertical.ravel()])

    @classmethod
    def from_vector(cls, g: np.ndarray, N: int) -> GradField:
        g = np.asarray(g, dtype=np.float64).ravel()
        k = N * (N - 1)
        if g.size != 2 * k:
            raise ShapeError(f"GradField for N={N} needs {2 * k} entries, got {g.size}")
        return cls(g[:k].reshape(N, N - 1), g[k:].reshape(N - 1, N))


def grad_forward(x: np.ndarray) -> GradField:
    x = np.asarray(x, dtype=np.float64)
    return GradField(x[:, 1:] - x[:, :-1], x[1:, :] - x[:-1, :])


def grad_adjoint(g: GradField) -> np.ndarray:
    """Negative divergence, the exact transpose of grad_forward."""
    N = g.horizontal.shape[0]
    out = np.zeros((N, N))
    out[:, :-1] -= g.horizontal
    out[:, 1:] += g.horizontal
    out[:-1, :] -= g.vertical
    out[1:, :] += g.vertical
    return out


class GradientMap(LinearMap):
    def __init__(self, N: int):
        self.N = N
        self.domain_shape = (N, N)
        self.range_shape = (2 * N * (N - 1),)

    def forward(self, x):
        x = self._check(x, self.domain_shape, "forward").reshape(self.domain_shape)
        return grad_forward(x).to_vector()

    def adjoint(self, y):
        y = self._check(y, self.range_shape, "adjoint")
        return grad_adjoint(GradField.from_vector(y, self.N))


# --- composites ------------------------------------------------------------


class CirculantMap(LinearMap):
    def __init__(self, mask: MaskLike):
        h = getattr(mask, "values", mask)
        self.mask = mask
        self.domain_shape = self.range_shape = tuple(np.shape(h))

    def forward(self, x):
        return apply_circulant(self.mask, np.asarray(x).reshape(self.domain_shape))

    def adjoint(self, y):
        h = getattr(self.mask, "values", self.mask)
        return apply_circulant(np.conj(h), np.asarray(y).reshape(self.range_shape))


class NormalMap(LinearMap):
    """A^T A as an image-to-image map."""

    def __init__(self, op: LinearMap):
        self.op = op
        self.domain_shape = self.range_shape = op.domain_shape

    def forward(self, x):
        return self.op.normal(x)

    def adjoint(self, y):
        return self.op.normal(y)

    def describe(self):
        return {"kind": "NormalMap", "of": self.op.describe()}


class StackedMap(LinearMap):
    """[w_1 A_1; w_2 A_2; ...] over a shared domain, range flattened and concatenated."""

    def __init__(self, blocks: Sequence[tuple[float, LinearMap]]):
        if not blocks:
            raise ShapeError("StackedMap needs at least one block")
        self.blocks = [(float(w), op) for w, op in blocks]
        self.domain_shape = self.blocks[0][1].domain_shape
        for _, op in self.blocks:
            if op.domain_shape != self.domain_shape:
                raise ShapeError(f"Block domains differ: {op.domain_shape} vs {self.domain_shape}")
        self.sizes = [math.prod(op.range_shape) for _, op in self.blocks]
        self.range_shape = (sum(self.sizes),)

    def split(self, y: np.ndarray) -> list[np.ndarray]:
        y = np.asarray(y, dtype=np.float64).ravel()
        cuts = np.cumsum(self.sizes)[:-1]
        return [part.reshape(op.range_shape) for part, (_, op) in zip(np.split(y, cuts), self.blocks)]

    def forward(self, x):
        return np.concatenate([(w * op.forward(x)).ravel() for w, op in self.blocks])

    def adjoint(self, y):
        parts = self.split(self._check(y, self.range_shape, "adjoint"))
        out = np.zeros(self.domain_shape)
        for (w, op), part in zip(self.blocks, parts):
            out += w * op.adjoint(part)
        return out

    def describe(self):
        return {"kind": "StackedMap", "blocks": [[w, op.describe()] for w, op in self.blocks]}


def to_dense(op: LinearMap) -> np.ndarray:
    """Materialize op as an m x n matrix (small operators only)."""
    matrix = getattr(op, "matrix", None)
    if isinstance(matrix, np.ndarray):
        return matrix.copy()
    if sp.issparse(matrix):
        return matrix.toarray()
    n = math.prod(op.domain_shape)
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(np.asarray(op.forward(e.reshape(op.domain_shape))).ravel())
    return np.stack(cols, axis=1)


# --- scan geometry ---------------------------------------------------------


@dataclass
class Geometry:
    kind: str = "parallel"  # parallel | fan
    n_angles: int = 60
    n_detectors: int | None = None
    source_radius: float | None = None
    fan_angle: float | None = None

    def __post_init__(self):
        if self.kind not in ("parallel", "fan"):
            raise GeometryError(f"Unknown geometry kind: {self.kind}")

    def build(self, N: int) -> SparseMap:
        if self.kind == "parallel":
            return radon_operator(N, self.n_angles, self.n_detectors or default_detectors(N))
        return build_fanbeam(N, self.n_angles, self.n_detectors or default_detectors(N), self.source_radius, self.fan_angle)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Geometry:
        return cls(**{k: d[k] for k in ("kind", "n_angles", "n_detectors", "source_radius", "fan_angle") if k in d})
