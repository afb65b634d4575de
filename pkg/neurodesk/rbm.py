"""
Gaussian-visible / tanh-hidden restricted Boltzmann machine.

Energy (quadratic term positive so the Gibbs distribution normalizes):
    E(v, h) = sum_j (v_j - a_j)^2 / (2 sigma_j^2) - sum_i b_i h_i - sum_ij (v_j / sigma_j) W_ji h_i
Hidden units are +/-1 spins with mean tanh(b_i + sum_j (v_j / sigma_j) W_ji).
Training is CD-k (k=1 by default) with an L1 penalty on W.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp, softmax

from neurodesk.data import (
    DimensionMismatchError,
    SampleMatrix,
    as_matrix,
    is_zscored,
    read_container,
    write_container,
)

logger = logging.getLogger(__name__)

RBM_MAGIC = "NDRBM/1"
FORMAT_VERSION = 1
MAX_EXACT_HIDDEN = 12
LOG_EVERY = 10


class StateSpaceTooLargeError(ValueError):
    pass


# ==========================================
# 1. Configuration & Parameters
# ==========================================

class RbmTrainConfig(BaseModel):
    """CD training hyper-parameters. `lambda` is accepted as the JSON key for l1."""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    n_hidden: int = Field(64, ge=1)
    epsilon: float = Field(0.08, gt=0)
    l1: float = Field(0.1, ge=0, alias="lambda")
    batch_size: int = Field(5, ge=1)
    epochs: int = Field(100, ge=1)
    cd_steps: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    init_std: float = Field(0.01, gt=0)
    sample_hidden: bool = True
    sample_visible: bool = False
    visible: Literal["gaussian", "tanh"] = "gaussian"


@dataclass(eq=False)
class RbmParams:
    W: np.ndarray
    a: np.ndarray
    b: np.ndarray
    sigma: Optional[np.ndarray] = None
    visible: str = "gaussian"

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        V, H = self.W.shape
        self.a = np.array(self.a, dtype=np.float64).reshape(-1)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.sigma = np.ones(V) if self.sigma is None else np.array(self.sigma, dtype=np.float64).reshape(-1)
        if V < 1 or H < 1:
            raise DimensionMismatchError(f"RBM needs V >= 1 and H >= 1, got {self.W.shape}")
        if self.a.size != V or self.sigma.size != V or self.b.size != H:
            raise DimensionMismatchError(
                f"bias sizes a={self.a.size}, b={self.b.size}, sigma={self.sigma.size} do not fit W {self.W.shape}")
        if not all(np.all(np.isfinite(x)) for x in (self.W, self.a, self.b, self.sigma)):
            raise ValueError("RBM parameters must be finite")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma entries must be positive")
        if self.visible not in ("gaussian", "tanh"):
            raise ValueError(f"unknown visible type {self.visible!r}")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]


@dataclass(eq=False)
class RbmGradient:
    W: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.a, self.b])


@dataclass
class TrainTrace:
    recon_error: list[float] = field(default_factory=list)
    mean_abs_w: list[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(1, len(self.recon_error) + 1),
            "recon_error": self.recon_error,
            "mean_abs_w": self.mean_abs_w,
        })


def init_params(n_visible: int, cfg: RbmTrainConfig, rng: np.random.Generator) -> RbmParams:
    W = rng.normal(0.0, cfg.init_std, size=(n_visible, cfg.n_hidden))
    return RbmParams(W, np.zeros(n_visible), np.zeros(cfg.n_hidden), visible=cfg.visible)


# ==========================================
# 2. Conditionals & Energy
# ==========================================

def _batch(v, width: int, what: str) -> tuple[np.ndarray, bool]:
    arr = as_matrix(v) if isinstance(v, SampleMatrix) else np.asarray(v, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != width:
        raise DimensionMismatchError(f"{what} has width {arr.shape[1]}, model expects {width}")
    return arr, single


def energy(v, h, p: RbmParams):
    vv, single = _batch(v, p.n_visible, "v")
    hh, _ = _batch(h, p.n_hidden, "h")
    quad = (((vv - p.a) / p.sigma) ** 2).sum(axis=1) / 2.0
    coupling = (((vv / p.sigma) @ p.W) * hh).sum(axis=1)
    e = quad - hh @ p.b - coupling
    return float(e[0]) if single else e


def free_energy(v, p: RbmParams):
    """F(v) = -log sum_h exp(-E(v, h)), summed analytically over +/-1 spins."""
    vv, single = _batch(v, p.n_visible, "v")
    x = p.b + (vv / p.sigma) @ p.W
    # log(2 cosh x) written to stay finite for large |x|
    log2cosh = np.abs(x) + np.log1p(np.exp(-2.0 * np.abs(x)))
    f = (((vv - p.a) / p.sigma) ** 2).sum(axis=1) / 2.0 - log2cosh.sum(axis=1)
    return float(f[0]) if single else f


def hidden_mean(v, p: RbmParams) -> np.ndarray:
    vv, single = _batch(v, p.n_visible, "v")
    out = np.tanh(p.b + (vv / p.sigma) @ p.W)
    return out[0] if single else out


def sample_hidden(mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """+/-1 spins with P(+1) = (1 + mean) / 2."""
    mean = np.asarray(mean, dtype=np.float64)
    return np.where(rng.random(mean.shape) < (1.0 + mean) / 2.0, 1.0, -1.0)


def visible_mean(h, p: RbmParams) -> np.ndarray:
    hh, single = _batch(h, p.n_hidden, "h")
    out = p.a + p.sigma * (hh @ p.W.T)
    if p.visible == "tanh":
        out = np.clip(out, -1.0, 1.0)
    return out[0] if single else out


def sample_visible(mean: np.ndarray, p: RbmParams, rng: np.random.Generator, noise: bool = True) -> np.ndarray:
    """Gaussian visibles get N(0, sigma_j^2) noise; tanh visibles stay at their mean."""
    mean = np.asarray(mean, dtype=np.float64)
    if not noise or p.visible == "tanh":
        return mean.copy()
    return mean + p.sigma * rng.standard_normal(mean.shape)


# ==========================================
# 3. Contrastive Divergence
# ==========================================

def cd_gradient(batch, p: RbmParams, cfg: RbmTrainConfig,
                rng: np.random.Generator) -> tuple[RbmGradient, float]:
    """
    CD-k estimate of the log-likelihood gradient (no L1, no learning rate) and the
    batch reconstruction error of the mean-field one-step reconstruction.
    """
    v0, _ = _batch(batch, p.n_visible, "batch")
    n = v0.shape[0]

    h0 = hidden_mean(v0, p)
    h = sample_hidden(h0, rng) if cfg.sample_hidden else h0
    v, hk = v0, h0
    for step in range(cfg.cd_steps):
        v = sample_visible(visible_mean(h, p), p, rng, noise=cfg.sample_visible)
        hk = hidden_mean(v, p)
        if step + 1 < cfg.cd_steps:
            h = sample_hidden(hk, rng) if cfg.sample_hidden else hk

    x0 = v0 / p.sigma
    xk = v / p.sigma
    grad = RbmGradient(
        W=(x0.T @ h0 - xk.T @ hk) / n,
        a=((v0 - v) / p.sigma ** 2).mean(axis=0),
        b=(h0 - hk).mean(axis=0),
    )
    recon = visible_mean(h0, p)
    return grad, float(np.mean((v0 - recon) ** 2))


def cd1_update(batch, p: RbmParams, cfg: RbmTrainConfig, rng: np.random.Generator,
               velocity: Optional[RbmGradient] = None) -> tuple[RbmParams, float]:
    """One CD step: W += eps * (grad_W - lambda * sign(W)); biases likewise without the penalty."""
    grad, err = cd_gradient(batch, p, cfg, rng)
    step = RbmGradient(
        W=cfg.epsilon * (grad.W - cfg.l1 * np.sign(p.W)),
        a=cfg.epsilon * grad.a,
        b=cfg.epsilon * grad.b,
    )
    if velocity is not None and cfg.momentum > 0:
        for name in ("W", "a", "b"):
            vel = getattr(velocity, name)
            vel *= cfg.momentum
            vel += getattr(step, name)
        step = velocity
    updated = replace(p, W=p.W + step.W, a=p.a + step.a, b=p.b + step.b)
    return updated, err


def train(data, cfg: RbmTrainConfig, init: Optional[RbmParams] = None) -> tuple[RbmParams, TrainTrace]:
    """Seeded, shuffled mini-batch CD training. Same (data, cfg) -> bit-identical parameters."""
    x = as_matrix(data)
    n, V = x.shape
    if cfg.visible == "gaussian" and not is_zscored(x):
        logger.warning("[rbm] training data is not z-scored; Gaussian visibles assume unit variance")

    rng = np.random.default_rng(cfg.seed)
    p = init if init is not None else init_params(V, cfg, rng)
    if p.n_visible != V:
        raise DimensionMismatchError(f"data has {V} columns, model expects {p.n_visible}")
    velocity = RbmGradient(np.zeros_like(p.W), np.zeros_like(p.a), np.zeros_like(p.b))
    trace = TrainTrace()

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            p, err = cd1_update(x[idx], p, cfg, rng, velocity)
            total += err * idx.size
        trace.recon_error.append(total / n)
        trace.mean_abs_w.append(float(np.mean(np.abs(p.W))))
        if (epoch + 1) % LOG_EVERY == 0 or epoch == 0:
            logger.info("[rbm] epoch %d/%d recon=%.5f mean|W|=%.5f",
                        epoch + 1, cfg.epochs, trace.recon_error[-1], trace.mean_abs_w[-1])
    return p, trace


# ==========================================
# 4. Post-training
# ==========================================

def flip_negative_fields(p: RbmParams) -> RbmParams:
    """Negate W[:, i] and b_i for every unit whose receptive field sums negative."""
    flip = np.where(p.W.sum(axis=0) < 0, -1.0, 1.0)
    return replace(p, W=p.W * flip, b=p.b * flip)


def feed_forward_timecourses(data, p: RbmParams) -> SampleMatrix:
    x = as_matrix(data)
    if np.any(np.abs(x.mean(axis=0)) > 1e-6):
        logger.warning("[rbm] time courses computed on data that is not mean-removed")
    return SampleMatrix(np.atleast_2d(hidden_mean(x, p)))


def receptive_fields(p: RbmParams) -> SampleMatrix:
    """One row per hidden unit: its weights over the visible units (a spatial map)."""
    return SampleMatrix(p.W.T)


def active_units(p: RbmParams, rel_tol: float = 0.05) -> int:
    """Units whose receptive-field L1 norm is at least rel_tol of the strongest unit's."""
    norms = np.abs(p.W).sum(axis=0)
    top = norms.max()
    if top == 0:
        return 0
    return int(np.count_nonzero(norms >= rel_tol * top))


# ==========================================
# 5. Exact Likelihood (small H oracle)
# ==========================================

def _hidden_states(n_hidden: int) -> np.ndarray:
    if n_hidden > MAX_EXACT_HIDDEN:
        raise StateSpaceTooLargeError(
            f"exact enumeration needs 2^{n_hidden} hidden states; limit is H <= {MAX_EXACT_HIDDEN}")
    return np.array(list(itertools.product((-1.0, 1.0), repeat=n_hidden)))


def _state_log_weights(p: RbmParams, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized log p(h) after integrating v out, and c = W h per state."""
    c = states @ p.W.T
    logw = states @ p.b + (p.a / p.sigma * c + c ** 2 / 2.0).sum(axis=1)
    return logw, c


def log_partition(p: RbmParams) -> float:
    if p.visible != "gaussian":
        raise ValueError("exact likelihood is defined for Gaussian visibles only")
    logw, _ = _state_log_weights(p, _hidden_states(p.n_hidden))
    return float(logsumexp(logw) + np.sum(np.log(np.sqrt(2.0 * np.pi) * p.sigma)))


def exact_loglik(data, p: RbmParams) -> float:
    """Mean log-likelihood of the rows of `data`, by enumerating the hidden states."""
    x, _ = _batch(data, p.n_visible, "data")
    return float(-np.mean(free_energy(x, p)) - log_partition(p))


def exact_loglik_gradient(data, p: RbmParams) -> RbmGradient:
    """Exact gradient of the mean log-likelihood w.r.t. W, a, b (data term minus model term)."""
    x, _ = _batch(data, p.n_visible, "data")
    if p.visible != "gaussian":
        raise ValueError("exact likelihood is defined for Gaussian visibles only")
    states = _hidden_states(p.n_hidden)
    n = x.shape[0]

    t = hidden_mean(x, p)
    data_W = (x / p.sigma).T @ t / n
    data_a = ((x - p.a) / p.sigma ** 2).mean(axis=0)
    data_b = t.mean(axis=0)

    logw, c = _state_log_weights(p, states)
    prob = softmax(logw)
    model_W = (p.a / p.sigma + c).T @ (prob[:, None] * states)
    model_a = prob @ c / p.sigma
    model_b = prob @ states

    return RbmGradient(W=data_W - model_W, a=data_a - model_a, b=data_b - model_b)


# ==========================================
# 6. Persistence
# ==========================================

def save_rbm(p: RbmParams, path: Union[str, Path], dtype: str = "<f4") -> None:
    unit_sigma = bool(np.all(p.sigma == 1.0))
    header = {
        "kind": "rbm",
        "format_version": FORMAT_VERSION,
        "n_visible": p.n_visible,
        "n_hidden": p.n_hidden,
        "sigma_mode": "unit" if unit_sigma else "stored",
        "visible": p.visible,
    }
    blocks = {"W": p.W, "a": p.a, "b": p.b}
    if not unit_sigma:
        blocks["sigma"] = p.sigma
    write_container(path, RBM_MAGIC, header, blocks, dtype=dtype)


def load_rbm(path: Union[str, Path]) -> RbmParams:
    header, blocks = read_container(path, RBM_MAGIC)
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported RBM format version {header.get('format_version')!r}")
    sigma = blocks.get("sigma") if header.get("sigma_mode") == "stored" else None
    return RbmParams(blocks["W"], blocks["a"], blocks["b"], sigma, visible=header.get("visible", "gaussian"))
