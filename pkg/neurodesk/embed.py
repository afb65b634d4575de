"""
2-D map of high-dimensional samples by divide and concur with the difference map.

Every directed k-NN edge (i, j) is one constraint owning two replicas, one of point i
and one of point j. The divide projection moves each replica pair to the nearest
configuration meeting the edge's target distance; the concur projection puts every
replica of a point at the point's average replica position.

Replica field layout: shape (2E, 2), source replicas of edges 0..E-1 first, then
the destination replicas in the same edge order.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.linalg import orthogonal_procrustes
from scipy.spatial.distance import cdist

from neurodesk.data import DimensionMismatchError, as_matrix

logger = logging.getLogger(__name__)

# a constraint within this relative distance of its target counts as met and is left untouched
SATISFIED_RTOL = 1e-12
# zero input distances (duplicate rows) get this fraction of the smallest positive distance
ZERO_DISTANCE_FLOOR = 1e-6
LOG_EVERY = 100

ConstraintMode = Literal["exact-distance", "cap"]


class EmbedConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k: int = Field(10, ge=1)
    beta: float = 0.9
    max_iters: int = Field(2000, ge=1)
    tol: float = Field(1e-6, gt=0)
    osc_window: int = Field(50, ge=2)
    osc_tol: float = Field(1e-9, ge=0)
    mode: ConstraintMode = "exact-distance"
    seed: int = Field(0, ge=0)
    power_iters: int = Field(100, ge=1)

    @field_validator("beta")
    @classmethod
    def _beta_nonzero(cls, v: float) -> float:
        if v == 0:
            raise ValueError("beta must be non-zero")
        return v


# ==========================================
# 1. Constraint graph
# ==========================================

@dataclass(frozen=True, eq=False)
class ConstraintGraph:
    """neighbors[i] lists N_i (nearest first); targets[i, m] is the 2-D target for edge (i, neighbors[i, m])."""
    n: int
    neighbors: np.ndarray
    targets: np.ndarray
    mode: str

    @property
    def n_edges(self) -> int:
        return self.neighbors.size

    @property
    def src(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.neighbors.shape[1])

    @property
    def dst(self) -> np.ndarray:
        return self.neighbors.ravel()

    @property
    def owner(self) -> np.ndarray:
        """Point index owning each replica row."""
        return np.concatenate([self.src, self.dst])


def build_constraints(data, k: int, mode: ConstraintMode = "exact-distance") -> ConstraintGraph:
    """Exact Euclidean k-NN (ties to the lower index) with targets scaled to median 1."""
    x = as_matrix(data)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"embedding needs at least 2 points, got {n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    m = min(k, n - 1)

    dist = cdist(x, x)
    np.fill_diagonal(dist, np.inf)
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, :m]
    nn_dist = np.take_along_axis(dist, neighbors, axis=1)

    if mode == "cap":
        targets = np.ones_like(nn_dist)
    elif mode == "exact-distance":
        positive = nn_dist[nn_dist > 0]
        floor = ZERO_DISTANCE_FLOOR * (positive.min() if positive.size else 1.0)
        if positive.size < nn_dist.size:
            logger.warning("[embed] %d neighbor pairs at distance 0; target floored", nn_dist.size - positive.size)
        nn_dist = np.maximum(nn_dist, floor)
        targets = nn_dist / np.median(nn_dist)
    else:
        raise ValueError(f"unknown constraint mode {mode!r}")
    return ConstraintGraph(n, neighbors, targets, mode)


# ==========================================
# 2. Projections
# ==========================================

def _pair_directions(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Unit vectors at angle 2*pi*hash(i, j)/2^32 for separating coincident replicas."""
    mask = np.uint64(0xFFFFFFFF)
    h = (src.astype(np.uint64) * np.uint64(0x9E3779B1) + dst.astype(np.uint64) * np.uint64(0x85EBCA77)) & mask
    h ^= h >> np.uint64(16)
    h = (h * np.uint64(0x7FEB352D)) & mask
    h ^= h >> np.uint64(15)
    h = (h * np.uint64(0x846CA68B)) & mask
    h ^= h >> np.uint64(16)
    angle = 2.0 * np.pi * h.astype(np.float64) / 2.0 ** 32
    return np.column_stack([np.cos(angle), np.sin(angle)])


def divide_project(replicas: np.ndarray, g: ConstraintGraph) -> np.ndarray:
    """Per-edge minimal-movement projection onto |p - q| = d (or |p - q| <= d in cap mode)."""
    E = g.n_edges
    p, q = replicas[:E], replicas[E:]
    d = g.targets.ravel()
    u = q - p
    r = np.hypot(u[:, 0], u[:, 1])

    coincident = r == 0
    unit = np.empty_like(u)
    unit[~coincident] = u[~coincident] / r[~coincident, None]
    if coincident.any():
        unit[coincident] = _pair_directions(g.src[coincident], g.dst[coincident])

    met = np.abs(r - d) <= SATISFIED_RTOL * d
    if g.mode == "cap":
        met |= r <= d
    shift = np.where(met, 0.0, (r - d) / 2.0)[:, None] * unit
    return np.concatenate([p + shift, q - shift])


def concur_project(replicas: np.ndarray, g: ConstraintGraph) -> np.ndarray:
    """Consensus position per point: its first replica plus the mean offset of all its replicas."""
    owner = g.owner
    first = np.full(g.n, -1, dtype=np.int64)
    # reversed assignment leaves the earliest replica index per point
    first[owner[::-1]] = np.arange(owner.size)[::-1]
    base = replicas[first]
    offsets = replicas - base[owner]
    counts = np.bincount(owner, minlength=g.n).astype(np.float64)
    mean_offset = np.column_stack([
        np.bincount(owner, weights=offsets[:, c], minlength=g.n) / counts for c in range(2)
    ])
    return base + mean_offset


# ==========================================
# 3. Difference map
# ==========================================

@dataclass(eq=False)
class ReplicaState:
    replicas: np.ndarray
    consensus: np.ndarray
    residual_trace: list[float] = field(default_factory=list)

    @classmethod
    def from_positions(cls, positions: np.ndarray, g: ConstraintGraph) -> "ReplicaState":
        pos = np.asarray(positions, dtype=np.float64)
        if pos.shape != (g.n, 2):
            raise DimensionMismatchError(f"positions must be ({g.n}, 2), got {pos.shape}")
        return cls(pos[g.owner].copy(), pos.copy())


def difference_map_step(state: ReplicaState, g: ConstraintGraph, beta: float) -> ReplicaState:
    """
    x_c = P_c(f_d(x)), f_d = (1 + 1/beta) P_d(x) - x/beta
    x_d = P_d(f_c(x)), f_c = (1 - 1/beta) P_c(x) + x/beta
    x  <- x + beta (x_c - x_d); residual = RMS(x_c - x_d)
    """
    x = state.replicas
    owner = g.owner
    pd = divide_project(x, g)
    pc = concur_project(x, g)[owner]
    f_d = pd + (pd - x) / beta
    f_c = pc - (pc - x) / beta

    consensus = concur_project(f_d, g)
    x_c = consensus[owner]
    x_d = divide_project(f_c, g)
    diff = x_c - x_d
    residual = float(np.sqrt(np.mean(diff ** 2)))
    return ReplicaState(x + beta * diff, consensus, state.residual_trace + [residual])


def detect_oscillation(trace: list[float], window: int, tol: float) -> bool:
    """True when the best residual of the last window fails to beat the window before it by more than tol."""
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window}")
    if len(trace) < 2 * window:
        return False
    recent = min(trace[-window:])
    before = min(trace[-2 * window:-window])
    return not recent < before - tol


# ==========================================
# 4. Driver
# ==========================================

def initial_positions(data, cfg: EmbedConfig, g: Optional[ConstraintGraph] = None) -> np.ndarray:
    """
    Projection on the top two principal directions (seeded subspace power iteration with a
    fixed iteration count), signs fixed so each direction's largest-magnitude entry is
    positive, scaled to unit median edge length.
    """
    x = as_matrix(data)
    centered = x - x.mean(axis=0)
    if centered.shape[1] == 1:
        pos = np.column_stack([centered[:, 0], np.zeros(len(centered))])
    else:
        rng = np.random.default_rng(cfg.seed)
        basis, _ = np.linalg.qr(rng.standard_normal((centered.shape[1], 2)))
        for _ in range(cfg.power_iters):
            basis, _ = np.linalg.qr(centered.T @ (centered @ basis))
        pivots = np.argmax(np.abs(basis), axis=0)
        basis = basis * np.sign(basis[pivots, [0, 1]])
        pos = centered @ basis

    g = g if g is not None else build_constraints(x, cfg.k, cfg.mode)
    lengths = np.linalg.norm(pos[g.src] - pos[g.dst], axis=1)
    scale = np.median(lengths)
    return pos / scale if scale > 0 else pos


@dataclass(eq=False)
class EmbedResult:
    positions: np.ndarray
    status: str
    residual_trace: list[float]
    oscillation_scores: np.ndarray
    graph: ConstraintGraph

    @property
    def iterations(self) -> int:
        return len(self.residual_trace)

    def report(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "final_residual": self.residual_trace[-1] if self.residual_trace else None,
            "n_points": self.graph.n,
            "n_constraints": self.graph.n_edges,
            "mode": self.graph.mode,
            "oscillation_scores": [float(s) for s in self.oscillation_scores],
        }


def embed(data, cfg: EmbedConfig, init: Optional[np.ndarray] = None) -> EmbedResult:
    """Iterate the difference map until converged, oscillating, or out of iterations."""
    x = as_matrix(data)
    g = build_constraints(x, cfg.k, cfg.mode)
    start = initial_positions(x, cfg, g) if init is None else np.asarray(init, dtype=np.float64)
    state = ReplicaState.from_positions(start, g)
    history = deque(maxlen=cfg.osc_window)

    status = "max_iters"
    for it in range(cfg.max_iters):
        state = difference_map_step(state, g, cfg.beta)
        history.append(state.consensus)
        residual = state.residual_trace[-1]
        if (it + 1) % LOG_EVERY == 0:
            logger.info("[embed] iter %d residual=%.3e", it + 1, residual)
        if residual < cfg.tol:
            status = "converged"
            break
        if detect_oscillation(state.residual_trace, cfg.osc_window, cfg.osc_tol):
            status = "oscillating"
            break

    stacked = np.stack(history)
    scores = stacked.var(axis=0).sum(axis=1)
    logger.info("[embed] %s after %d iterations (residual %.3e)",
                status, len(state.residual_trace), state.residual_trace[-1])
    return EmbedResult(state.consensus, status, state.residual_trace, scores, g)


def procrustes_residual(a: np.ndarray, b: np.ndarray) -> float:
    """Relative residual of b after the best rotation/reflection of a onto it (both centered)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"position sets differ in shape: {a.shape} vs {b.shape}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    rotation, _ = orthogonal_procrustes(a, b)
    norm = np.linalg.norm(b)
    return float(np.linalg.norm(a @ rotation - b) / norm) if norm > 0 else 0.0
