from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np


def save_json(obj: dict, out_path: Path):
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(obj, f, indent=2)


def load_json(path: Path) -> dict:
    with open(path) as f:
        return json.load(f)


def fft_workers() -> int:
    """Thread cap for scipy.fft, from NCS_THREADS (default 1)."""
    raw = os.environ.get("NCS_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def limit_threads(n: int | None = None):
    # Avoid BLAS oversubscription when several solver runs share a machine
    n = n or fft_workers()
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    os.environ.setdefault("OPENBLAS_NUM_THREADS", str(n))
    os.environ.setdefault("MKL_NUM_THREADS", str(n))


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def array_digest(*arrays: np.ndarray, extra: dict | None = None) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    if extra:
        h.update(json.dumps(extra, sort_keys=True, default=str).encode())
    return h.hexdigest()
