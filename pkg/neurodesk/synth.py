"""
Synthetic ground truth that mimics simulated fMRI: isotropic Gaussian blob spatial maps
on a 2-D grid, smooth unit-variance time courses, linear mixing plus white noise at an
exact SNR. Also a two-class (or graded) generator of subject-level volumes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter1d

from neurodesk.data import SampleMatrix, VolumeGeometry, save_matrix

logger = logging.getLogger(__name__)

SEVERITY_LEVELS = ("low", "medium", "high")
SEVERITY_SCALE = {"low": 0.5, "medium": 1.0, "high": 1.5}
HEALTHY = "control"
# lattice spacing at overlap 0, in units of the widest blob
DISJOINT_SPACING = 4.0
# subject cohorts: between-subject blob amplitude sd equals the voxel noise sd
COHORT_EFFECT = 1.0
COHORT_NOISE = 1.0
COHORT_AMPLITUDE_SD = 1.0


class CentersOutsideGridError(ValueError):
    pass


class SynthSpec(BaseModel):
    """Generator parameters. JSON may use the short keys R and T."""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    grid: tuple[int, int] = (32, 32)
    n_sources: int = Field(8, ge=1, alias="R")
    centers: Optional[list[tuple[float, float]]] = None
    widths: Union[float, list[float]] = 2.0
    overlap: float = Field(0.0, ge=0)
    n_timepoints: int = Field(200, ge=2, alias="T")
    snr: float = Field(10.0, gt=0)
    smoothing: float = Field(5.0, gt=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "SynthSpec":
        if min(self.grid) < 1:
            raise ValueError(f"grid sides must be positive, got {self.grid}")
        widths = self.widths if isinstance(self.widths, list) else [self.widths]
        if len(widths) not in (1, self.n_sources):
            raise ValueError(f"widths needs 1 or {self.n_sources} entries, got {len(widths)}")
        if min(widths) <= 0:
            raise ValueError("widths must be positive")
        if self.centers is not None and len(self.centers) != self.n_sources:
            raise ValueError(f"centers needs {self.n_sources} entries, got {len(self.centers)}")
        return self

    @property
    def width_array(self) -> np.ndarray:
        w = np.atleast_1d(np.asarray(self.widths, dtype=np.float64))
        return np.broadcast_to(w, (self.n_sources,)).copy()

    @property
    def n_voxels(self) -> int:
        return self.grid[0] * self.grid[1]

    def echo(self) -> dict:
        return self.model_dump(mode="json")


@dataclass(eq=False)
class SynthGroundTruth:
    SM: np.ndarray
    TC: np.ndarray
    X: np.ndarray
    centers: np.ndarray
    spec: SynthSpec

    @property
    def geometry(self) -> VolumeGeometry:
        nx, ny = self.spec.grid
        return VolumeGeometry((nx, ny, 1), np.arange(nx * ny))

    @property
    def noiseless(self) -> np.ndarray:
        return self.TC @ self.SM


# ==========================================
# 1. Building blocks
# ==========================================

def lattice_centers(spec: SynthSpec) -> np.ndarray:
    """Square lattice centered in the grid; spacing shrinks as overlap grows."""
    spacing = DISJOINT_SPACING * spec.width_array.max() / (1.0 + spec.overlap)
    cols = math.ceil(math.sqrt(spec.n_sources))
    rows = math.ceil(spec.n_sources / cols)
    idx = np.arange(spec.n_sources)
    offsets = np.column_stack([idx // cols - (rows - 1) / 2.0, idx % cols - (cols - 1) / 2.0]) * spacing
    middle = (np.asarray(spec.grid, dtype=np.float64) - 1.0) / 2.0
    return middle + offsets


def resolve_centers(spec: SynthSpec) -> np.ndarray:
    centers = lattice_centers(spec) if spec.centers is None else np.asarray(spec.centers, dtype=np.float64)
    upper = np.asarray(spec.grid, dtype=np.float64) - 1.0
    outside = np.any((centers < 0) | (centers > upper), axis=1)
    if outside.any():
        raise CentersOutsideGridError(
            f"{int(outside.sum())} source centers fall outside the {spec.grid[0]}x{spec.grid[1]} grid "
            f"(first: {centers[outside][0].tolist()})")
    return centers


def blob_maps(spec: SynthSpec, centers: np.ndarray) -> np.ndarray:
    """R x V Gaussian blobs, each scaled to max exactly 1."""
    gx, gy = np.meshgrid(np.arange(spec.grid[0]), np.arange(spec.grid[1]), indexing="ij")
    gx, gy = gx.ravel().astype(np.float64), gy.ravel().astype(np.float64)
    d2 = (gx[None, :] - centers[:, :1]) ** 2 + (gy[None, :] - centers[:, 1:]) ** 2
    sm = np.exp(-d2 / (2.0 * spec.width_array[:, None] ** 2))
    return sm / sm.max(axis=1, keepdims=True)


def smooth_timecourses(n_timepoints: int, n_sources: int, smoothing: float,
                       rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal((n_timepoints, n_sources))
    tc = gaussian_filter1d(white, sigma=smoothing, axis=0, mode="reflect")
    tc = tc - tc.mean(axis=0)
    return tc / tc.std(axis=0)


def _noise_at_snr(signal: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(signal.shape)
    return noise * np.sqrt(np.mean(signal ** 2) / (snr * np.mean(noise ** 2)))


# ==========================================
# 2. Generators
# ==========================================

def generate(spec: SynthSpec) -> SynthGroundTruth:
    rng = np.random.default_rng(spec.seed)
    centers = resolve_centers(spec)
    sm = blob_maps(spec, centers)
    tc = smooth_timecourses(spec.n_timepoints, spec.n_sources, spec.smoothing, rng)
    signal = tc @ sm
    x = signal + _noise_at_snr(signal, spec.snr, rng)
    logger.debug("[synth] R=%d grid=%s T=%d snr=%g overlap=%g",
                 spec.n_sources, spec.grid, spec.n_timepoints, spec.snr, spec.overlap)
    return SynthGroundTruth(sm, tc, x, centers, spec)


def overlap_sweep(base: SynthSpec, levels: list[float]) -> list[SynthGroundTruth]:
    """One dataset per overlap level on the lattice layout; level i uses seed base.seed + i."""
    if not levels:
        raise ValueError("overlap sweep needs at least one level")
    out = []
    for i, level in enumerate(levels):
        spec = SynthSpec.model_validate({**base.model_dump(), "overlap": level,
                                         "centers": None, "seed": base.seed + i})
        logger.info("[synth] overlap level %d/%d = %g", i + 1, len(levels), level)
        out.append(generate(spec))
    return out


def _subject_volumes(spec: SynthSpec, n_per_class: int, effect: np.ndarray,
                     noise: float, amplitude_sd: float) -> tuple[SampleMatrix, np.ndarray]:
    """effect: per-sample multiplier of the class-1 change (0 for class 0 rows)."""
    rng = np.random.default_rng(spec.seed)
    sm = blob_maps(spec, resolve_centers(spec))
    affected = sm[: math.ceil(spec.n_sources / 2)].sum(axis=0)
    n = 2 * n_per_class
    amplitudes = 1.0 + amplitude_sd * rng.standard_normal((n, spec.n_sources))
    values = amplitudes @ sm + effect[:, None] * affected + noise * rng.standard_normal((n, sm.shape[1]))
    labels = np.repeat(np.array([0, 1], dtype=np.int64), n_per_class)
    nx, ny = spec.grid
    return SampleMatrix(values, VolumeGeometry((nx, ny, 1), np.arange(nx * ny))), labels


def generate_labeled(spec: SynthSpec, n_per_class: int = 100, effect: float = COHORT_EFFECT,
                     noise: float = COHORT_NOISE, amplitude_sd: float = COHORT_AMPLITUDE_SD
                     ) -> tuple[SampleMatrix, np.ndarray]:
    """
    Class 0: base blob pattern (per-subject blob amplitudes) + noise.
    Class 1: same, plus `effect` times the first ceil(R/2) blobs.
    Rows are ordered class 0 then class 1.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise < 0 or amplitude_sd < 0:
        raise ValueError("noise and amplitude_sd must be nonnegative")
    shift = np.repeat([0.0, effect], n_per_class)
    return _subject_volumes(spec, n_per_class, shift, noise, amplitude_sd)


def generate_graded(spec: SynthSpec, n_per_class: int = 100, effect: float = COHORT_EFFECT,
                    noise: float = COHORT_NOISE, amplitude_sd: float = COHORT_AMPLITUDE_SD
                    ) -> tuple[SampleMatrix, np.ndarray, np.ndarray]:
    """As generate_labeled, with class-1 rows cycling through low/medium/high severity."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    severity = np.array([HEALTHY] * n_per_class
                        + [SEVERITY_LEVELS[i % len(SEVERITY_LEVELS)] for i in range(n_per_class)], dtype=object)
    shift = np.array([0.0 if s == HEALTHY else effect * SEVERITY_SCALE[s] for s in severity])
    matrix, labels = _subject_volumes(spec, n_per_class, shift, noise, amplitude_sd)
    return matrix, labels, severity


# ==========================================
# 3. Persistence
# ==========================================

def save_ground_truth(gt: SynthGroundTruth, out_dir: Union[str, Path], dtype: str = "<f4") -> dict[str, Path]:
    """SM / TC / X matrix files plus the spec echo (with resolved centers)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / f"{name}.ndm" for name in ("SM", "TC", "X")}
    geometry = gt.geometry
    save_matrix(SampleMatrix(gt.SM, geometry), paths["SM"], dtype=dtype)
    save_matrix(SampleMatrix(gt.TC), paths["TC"], dtype=dtype)
    save_matrix(SampleMatrix(gt.X, geometry), paths["X"], dtype=dtype)

    echo = dict(gt.spec.echo(), resolved_centers=gt.centers.tolist())
    paths["spec"] = out_dir / "spec.json"
    paths["spec"].write_text(json.dumps(echo, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths
