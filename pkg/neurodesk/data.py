"""
Dataset representation, the binary matrix container, and the preprocessing steps
applied to every volume-by-voxel matrix before a model sees it.

Preprocessing order is fixed: mask_below_mean -> remove_mean_image -> zscore_voxels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# ==========================================
# 1. Constants & Errors
# ==========================================

MATRIX_MAGIC = "NDMAT/1"
SUPPORTED_DTYPES = ("<f4", "<f8")
MASK_DTYPE = "<i8"

# relative slack for "mean equals grand mean" under rounding
MASK_RTOL = 1e-12
# columns with a population sigma below this (relative to |mean|) are treated as constant
DEGENERATE_SIGMA = 1e-12


class MatrixFileMissingError(FileNotFoundError):
    pass


class MatrixHeaderError(ValueError):
    pass


class MatrixSizeError(ValueError):
    pass


class NonFiniteValuesError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


# ==========================================
# 2. Domain Types
# ==========================================

@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    """Voxel grid dims and the linear indices of the voxels kept as matrix columns."""
    dims: tuple[int, int, int]
    mask: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"geometry dims must be three positive counts, got {self.dims}")
        mask = np.array(self.mask, dtype=np.int64).reshape(-1)
        if mask.size and (mask[0] < 0 or mask[-1] >= int(np.prod(dims))):
            raise ValueError(f"mask indices must lie in [0, {int(np.prod(dims))}), got [{mask[0]}, {mask[-1]}]")
        if np.any(np.diff(mask) <= 0):
            raise ValueError("mask indices must be strictly increasing")
        mask.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    """Dense samples x features matrix (volumes x voxels, subjects x voxels). Immutable."""
    values: np.ndarray
    geometry: Optional[VolumeGeometry] = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionMismatchError(f"expected a 2-D matrix, got {arr.ndim} dimensions")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionMismatchError(f"matrix needs rows >= 1 and cols >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.count_nonzero(~np.isfinite(arr)))
            raise NonFiniteValuesError(f"matrix holds {bad} non-finite values")
        if self.geometry is not None and self.geometry.mask.size != arr.shape[1]:
            raise DimensionMismatchError(
                f"geometry mask has {self.geometry.mask.size} voxels but matrix has {arr.shape[1]} columns")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "SampleMatrix":
        """Same geometry, new values (column count must not change)."""
        return SampleMatrix(values, self.geometry)


def as_matrix(x: Union[SampleMatrix, np.ndarray]) -> np.ndarray:
    """Raw float64 view of either a SampleMatrix or an array-like."""
    if isinstance(x, SampleMatrix):
        return x.values
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# ==========================================
# 3. Binary Container (matrices and models)
# ==========================================

def write_container(path: PathLike, magic: str, header: dict, blocks: dict[str, np.ndarray],
                    dtype: str = "<f4") -> None:
    """
    Magic line, one JSON header line, then the raw little-endian blocks in header order.
    Float blocks use `dtype`; integer blocks are stored as int64.
    """
    if dtype not in SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype tag {dtype!r}, expected one of {SUPPORTED_DTYPES}")
    layout = []
    payload = []
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        tag = MASK_DTYPE if np.issubdtype(arr.dtype, np.integer) else dtype
        layout.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        payload.append(np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes(order="C"))
    full_header = dict(header, dtype=dtype, blocks=layout)
    head = (magic + "\n" + json.dumps(full_header, sort_keys=True) + "\n").encode("utf-8")
    Path(path).write_bytes(head + b"".join(payload))


def read_container(path: PathLike, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise MatrixFileMissingError(f"file not found: {path}")
    raw = path.read_bytes()

    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1) if first >= 0 else -1
    if first < 0 or second < 0:
        raise MatrixHeaderError(f"{path}: header is incomplete")
    if raw[:first].decode("utf-8", errors="replace") != magic:
        raise MatrixHeaderError(f"{path}: expected magic {magic!r}, got {raw[:first][:32]!r}")
    try:
        header = json.loads(raw[first + 1:second].decode("utf-8"))
        layout = header["blocks"]
        specs = [(b["name"], tuple(int(s) for s in b["shape"]), np.dtype(b["dtype"])) for b in layout]
    except (ValueError, KeyError, TypeError) as exc:
        raise MatrixHeaderError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype") not in SUPPORTED_DTYPES:
        raise MatrixHeaderError(f"{path}: unsupported dtype tag {header.get('dtype')!r}")

    body = memoryview(raw)[second + 1:]
    expected = sum(int(np.prod(shape)) * dt.itemsize for _, shape, dt in specs)
    if len(body) != expected:
        raise MatrixSizeError(f"{path}: payload holds {len(body)} bytes, header describes {expected}")

    blocks = {}
    offset = 0
    for name, shape, dt in specs:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=dt, count=count, offset=offset).reshape(shape)
        offset += count * dt.itemsize
        blocks[name] = arr.astype(np.int64 if dt.kind == "i" else np.float64)
    return header, blocks


# ==========================================
# 4. Matrix File I/O
# ==========================================

def save_matrix(m: SampleMatrix, path: PathLike, dtype: str = "<f4") -> None:
    header = {
        "kind": "matrix",
        "rows": m.rows,
        "cols": m.cols,
        "dims": list(m.geometry.dims) if m.geometry is not None else None,
        "mask": m.geometry is not None,
    }
    blocks = {}
    if m.geometry is not None:
        blocks["mask"] = m.geometry.mask
    blocks["values"] = m.values
    write_container(path, MATRIX_MAGIC, header, blocks, dtype=dtype)


def load_matrix(path: PathLike) -> SampleMatrix:
    header, blocks = read_container(path, MATRIX_MAGIC)
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
        has_mask = bool(header["mask"])
        dims = header["dims"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MatrixHeaderError(f"{path}: matrix header misses a field ({exc})") from exc
    if "values" not in blocks or blocks["values"].shape != (rows, cols):
        raise MatrixHeaderError(f"{path}: values block does not match rows={rows}, cols={cols}")

    geometry = None
    if has_mask:
        if "mask" not in blocks or dims is None:
            raise MatrixHeaderError(f"{path}: mask flag set but mask block or dims missing")
        geometry = VolumeGeometry(tuple(dims), blocks["mask"])
    return SampleMatrix(blocks["values"], geometry)


def load_labels(path: PathLike, column: str = "label") -> np.ndarray:
    """Integer labels from one column of a CSV table."""
    path = Path(path)
    if not path.is_file():
        raise MatrixFileMissingError(f"label file not found: {path}")
    df = pd.read_csv(path)
    if column not in df.columns:
        raise MatrixHeaderError(f"{path}: column {column!r} not found, have {list(df.columns)}")
    return df[column].to_numpy(dtype=np.int64)


# ==========================================
# 5. Preprocessing
# ==========================================

def mask_below_mean(m: SampleMatrix) -> tuple[SampleMatrix, np.ndarray]:
    """Keep the columns whose across-sample mean is not below the grand mean."""
    col_means = m.values.mean(axis=0)
    grand_mean = m.values.mean()
    slack = MASK_RTOL * max(1.0, abs(grand_mean))
    retained = np.flatnonzero(col_means >= grand_mean - slack)
    if retained.size == 0:
        raise EmptyMaskError(f"every column falls below the grand mean {grand_mean:.6g}")

    geometry = None
    if m.geometry is not None:
        geometry = VolumeGeometry(m.geometry.dims, m.geometry.mask[retained])
    logger.debug("[mask] kept %d of %d columns", retained.size, m.cols)
    return SampleMatrix(m.values[:, retained], geometry), retained


def remove_mean_image(m: SampleMatrix) -> SampleMatrix:
    return m.with_values(m.values - m.values.mean(axis=0, keepdims=True))


def zscore_voxels(m: SampleMatrix) -> SampleMatrix:
    """Per-column zero mean / unit population sigma; constant columns become zeros."""
    if m.rows < 2:
        raise ValueError(f"z-scoring needs at least 2 rows, got {m.rows}")
    mean = m.values.mean(axis=0)
    centered = m.values - mean
    sigma = centered.std(axis=0)
    degenerate = sigma <= DEGENERATE_SIGMA * np.maximum(1.0, np.abs(mean))
    safe = np.where(degenerate, 1.0, sigma)
    out = np.where(degenerate, 0.0, centered / safe)
    if degenerate.any():
        logger.debug("[zscore] %d constant columns set to zero", int(degenerate.sum()))
    return m.with_values(out)


def preprocess(m: SampleMatrix, mask: bool = True) -> tuple[SampleMatrix, np.ndarray]:
    """mask -> remove mean image -> z-score. Returns the matrix and retained columns."""
    if mask:
        m, retained = mask_below_mean(m)
    else:
        retained = np.arange(m.cols)
    return zscore_voxels(remove_mean_image(m)), retained


def is_zscored(m: Union[SampleMatrix, np.ndarray], atol: float = 1e-6) -> bool:
    """True when every non-constant column has mean ~0 and population sigma ~1."""
    x = as_matrix(m)
    sigma = x.std(axis=0)
    live = sigma > atol
    return bool(np.all(np.abs(x.mean(axis=0)) <= atol) and np.all(np.abs(sigma[live] - 1.0) <= atol))
