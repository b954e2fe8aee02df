"""On-disk formats.

Arrays are raw little-endian row-major payloads with a JSON sidecar next to
them (``<path>.json``) holding at least ``type`` and ``shape``. Masks store
the real plane followed by the imaginary plane. Sparse system matrices are
COO triplets: int64 rows, int64 cols, float64 values.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .circulant import CONVENTION, SpectralMask
from .errors import HeaderError, ShapeError, TruncatedError
from .ops import SparseMap
from .solvers import ConvergenceRecord
from .utils import load_json, save_json

logger = logging.getLogger(__name__)

RECORD_HEADER = ("iter", "objective", "rel_subopt", "seminorm_step", "wall_ms")

_F64 = np.dtype("<f8")
_I64 = np.dtype("<i8")


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _read_header(path: Path, expected_type: Optional[str]) -> dict:
    side = sidecar_path(path)
    try:
        header = load_json(side)
    except FileNotFoundError as e:
        raise HeaderError(f"Missing header {side}") from e
    except json.JSONDecodeError as e:
        raise HeaderError(f"Malformed header {side}: {e}") from e
    if not isinstance(header, dict) or "type" not in header or "shape" not in header:
        raise HeaderError(f"Header {side} needs 'type' and 'shape'")
    if expected_type is not None and header["type"] != expected_type:
        raise HeaderError(f"{side}: expected type {expected_type!r}, found {header['type']!r}")
    try:
        header["shape"] = [int(s) for s in header["shape"]]
    except (TypeError, ValueError) as e:
        raise HeaderError(f"{side}: bad shape {header['shape']!r}") from e
    if any(s < 0 for s in header["shape"]):
        raise HeaderError(f"{side}: negative extent in shape {header['shape']}")
    return header


def _read_payload(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = count * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedError(f"{path}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise ShapeError(f"{path}: {len(raw)} bytes, header shape implies {expected}")
    return np.frombuffer(raw, dtype=dtype, count=count)


def write_array(path: Path, array: np.ndarray, kind: str, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(array, dtype=_F64)
    path.write_bytes(a.tobytes())
    save_json({"type": kind, "dtype": "float64", "byteorder": "little", "shape": list(a.shape), **(meta or {})}, sidecar_path(path))
    return path


def read_array(path: Path, kind: Optional[str] = None, expected_shape: Optional[tuple[int, ...]] = None) -> tuple[np.ndarray, dict]:
    header = _read_header(path, kind)
    shape = tuple(header["shape"])
    if header.get("dtype", "float64") != "float64":
        raise HeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    if expected_shape is not None and shape != tuple(expected_shape):
        raise ShapeError(f"{path}: shape {shape}, expected {tuple(expected_shape)}")
    data = _read_payload(path, _F64, math.prod(shape)).reshape(shape).astype(np.float64)
    return data, header


def write_image(path: Path, image: np.ndarray, meta: Optional[dict] = None) -> Path:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"Images are 2D, got {image.shape}")
    return write_array(path, image, "image", meta)


def read_image(path: Path, expected_shape: Optional[tuple[int, int]] = None) -> tuple[np.ndarray, dict]:
    img, header = read_array(path, "image", expected_shape)
    if img.ndim != 2:
        raise ShapeError(f"{path}: images are 2D, got {img.shape}")
    return img, header


def write_sinogram(path: Path, sino: np.ndarray, geometry: Optional[dict] = None, noise: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    extra = dict(meta or {})
    if geometry is not None:
        extra["geometry"] = geometry
    if noise is not None:
        extra["noise"] = noise
    return write_array(path, sino, "sinogram", extra)


def read_sinogram(path: Path) -> tuple[np.ndarray, dict]:
    return read_array(path, "sinogram")


def write_mask(path: Path, mask: SpectralMask) -> Path:
    planes = np.stack([mask.values.real, mask.values.imag])
    meta = {"N": mask.size, "convention": CONVENTION}
    meta.update({k: v for k, v in mask.meta.items() if k != "skipped_bins"})
    if mask.meta.get("skipped_bins"):
        meta["skipped_bins"] = [list(ij) for ij in mask.meta["skipped_bins"]]
    return write_array(path, planes, "mask", meta)


def read_mask(path: Path) -> SpectralMask:
    planes, header = read_array(path, "mask")
    if header.get("convention") != CONVENTION:
        raise HeaderError(f"{path}: mask convention {header.get('convention')!r}, expected {CONVENTION!r}")
    N = int(header.get("N", -1))
    if planes.shape != (2, N, N):
        raise ShapeError(f"{path}: mask planes {planes.shape} do not match N={N}")
    meta = {k: v for k, v in header.items() if k not in ("type", "dtype", "byteorder", "shape", "N", "convention")}
    return SpectralMask(planes[0] + 1j * planes[1], meta=meta)


def write_sparse(path: Path, op: SparseMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = op.matrix.tocoo()
    with open(path, "wb") as f:
        f.write(coo.row.astype(_I64).tobytes())
        f.write(coo.col.astype(_I64).tobytes())
        f.write(coo.data.astype(_F64).tobytes())
    header = {
        "type": "sparse",
        "shape": list(coo.shape),
        "nnz": int(coo.nnz),
        "domain_shape": list(op.domain_shape),
        "range_shape": list(op.range_shape),
        "meta": op.meta,
    }
    save_json(header, sidecar_path(path))
    return path


def read_sparse(path: Path) -> SparseMap:
    header = _read_header(path, "sparse")
    try:
        nnz = int(header["nnz"])
        domain_shape = tuple(header["domain_shape"])
        range_shape = tuple(header["range_shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise HeaderError(f"{path}: incomplete sparse header ({e})") from e
    raw = Path(path).read_bytes()
    expected = nnz * (2 * _I64.itemsize + _F64.itemsize)
    if len(raw) < expected:
        raise TruncatedError(f"{path}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise ShapeError(f"{path}: {len(raw)} bytes, nnz={nnz} implies {expected}")
    rows = np.frombuffer(raw, _I64, nnz, 0)
    cols = np.frombuffer(raw, _I64, nnz, nnz * 8)
    vals = np.frombuffer(raw, _F64, nnz, nnz * 16)
    m, n = header["shape"]
    if nnz and (rows.max() >= m or cols.max() >= n or rows.min() < 0 or cols.min() < 0):
        raise ShapeError(f"{path}: triplet indices exceed matrix shape {m}x{n}")
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(m, n))
    return SparseMap(mat, domain_shape, range_shape, header.get("meta") or {})


def write_pgm(path: Path, image: np.ndarray) -> Path:
    """8-bit binary PGM, min-max windowed; a constant image gets a symmetric window around its value."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM export needs a 2D image, got {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    scaled = np.floor((img - lo) / (hi - lo) * 255.0 + 0.5)
    pixels = np.clip(scaled, 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path


def write_record(path: Path, record: ConvergenceRecord) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RECORD_HEADER)
        for k, obj, rel, d, ms in record.rows():
            writer.writerow([k, repr(obj), repr(rel), repr(d), repr(ms)])
    return path


def read_record(path: Path) -> ConvergenceRecord:
    record = ConvergenceRecord()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_HEADER:
            raise HeaderError(f"{path}: expected CSV header {','.join(RECORD_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_HEADER):
                raise ShapeError(f"{path}:{lineno}: {len(row)} fields, expected {len(RECORD_HEADER)}")
            record.append(int(row[0]), *(float(v) for v in row[1:]))
    return record


@dataclass
class RunManifest:
    subcommand: str
    params: dict
    argv: list[str]
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = ""
    wall_time_s: float = 0.0

    def save(self, path: Path) -> Path:
        save_json(asdict(self), Path(path))
        return Path(path)

    @classmethod
    def load(cls, path: Path) -> RunManifest:
        try:
            d = load_json(Path(path))
            return cls(**d)
        except json.JSONDecodeError as e:
            raise HeaderError(f"Malformed manifest {path}: {e}") from e
        except TypeError as e:
            raise HeaderError(f"Manifest {path} has unexpected fields: {e}") from e
