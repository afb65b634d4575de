"""
Deep belief network: a stack of RBM-pretrained tanh layers with a softmax head,
fine-tuned end to end by backpropagation of the cross-entropy.

Layer 1 is a Gaussian-visible RBM on the (z-scored) data. Every upper layer is a
tanh-visible RBM trained on the mean activations of the layer below.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import log_softmax, softmax

from neurodesk import rbm
from neurodesk.data import (
    DimensionMismatchError,
    SampleMatrix,
    as_matrix,
    read_container,
    write_container,
)

logger = logging.getLogger(__name__)

DBN_MAGIC = "NDDBN/1"
FORMAT_VERSION = 1


class DepthRangeError(ValueError):
    pass


class MissingHeadError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class FineTuneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(0.01, gt=0)
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    l2: float = Field(0.0, ge=0)
    class_weight: Literal["none", "balanced"] = "none"


# ==========================================
# 1. Model
# ==========================================

@dataclass(eq=False)
class DbnModel:
    """layers[i] = (W_i, b_i) mapping width n_{i-1} -> n_i; softmax = (W, b) or None before fine-tuning."""
    layers: list[tuple[np.ndarray, np.ndarray]]
    softmax: Optional[tuple[np.ndarray, np.ndarray]] = None
    pretrain_traces: list[rbm.TrainTrace] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a DBN needs at least one hidden layer")
        layers = []
        prev = None
        for i, (W, b) in enumerate(self.layers, start=1):
            W = np.array(W, dtype=np.float64, ndmin=2)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if b.size != W.shape[1]:
                raise DimensionMismatchError(f"layer {i}: bias has {b.size} entries, W has {W.shape[1]} columns")
            if prev is not None and W.shape[0] != prev:
                raise DimensionMismatchError(f"layer {i} expects width {W.shape[0]}, layer below has {prev}")
            prev = W.shape[1]
            layers.append((W, b))
        self.layers = layers
        if self.softmax is not None:
            W, b = (np.array(self.softmax[0], dtype=np.float64, ndmin=2),
                    np.array(self.softmax[1], dtype=np.float64).reshape(-1))
            if W.shape[0] != prev or b.size != W.shape[1]:
                raise DimensionMismatchError(f"softmax head {W.shape} does not fit top width {prev}")
            if W.shape[1] < 2:
                raise ValueError(f"softmax head needs at least 2 classes, got {W.shape[1]}")
            self.softmax = (W, b)
        for W, b in self._all_params():
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("DBN parameters must be finite")

    def _all_params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self.layers + ([self.softmax] if self.softmax is not None else [])

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        """Input width followed by every hidden width."""
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    @property
    def n_classes(self) -> Optional[int]:
        return None if self.softmax is None else self.softmax[0].shape[1]

    def copy(self) -> "DbnModel":
        head = None if self.softmax is None else (self.softmax[0].copy(), self.softmax[1].copy())
        return DbnModel([(W.copy(), b.copy()) for W, b in self.layers], head, list(self.pretrain_traces))


def truncate(m: DbnModel, depth: int) -> DbnModel:
    """The first `depth` pretrained layers, without a head."""
    if not 1 <= depth <= m.depth:
        raise DepthRangeError(f"depth must be in 1..{m.depth}, got {depth}")
    return DbnModel([(W.copy(), b.copy()) for W, b in m.layers[:depth]], None, m.pretrain_traces[:depth])


# ==========================================
# 2. Greedy pretraining
# ==========================================

def pretrain(data, layer_sizes: list[int], cfg: rbm.RbmTrainConfig) -> DbnModel:
    """Train one RBM per layer, bottom-up, each on the hidden means of the layer below."""
    if not layer_sizes:
        raise ValueError("layer_sizes must name at least one hidden width")
    if min(layer_sizes) < 1:
        raise ValueError(f"layer widths must be positive, got {layer_sizes}")

    x = as_matrix(data)
    layers = []
    traces = []
    for i, width in enumerate(layer_sizes):
        layer_cfg = cfg.model_copy(update={
            "n_hidden": int(width),
            "visible": "gaussian" if i == 0 else "tanh",
            "seed": cfg.seed + i,
        })
        logger.info("[dbn %d/%d] pretraining %d -> %d", i + 1, len(layer_sizes), x.shape[1], width)
        params, trace = rbm.train(x, layer_cfg)
        layers.append((params.W, params.b))
        traces.append(trace)
        x = rbm.hidden_mean(x, params)
    return DbnModel(layers, None, traces)


# ==========================================
# 3. Inference
# ==========================================

def forward(m: DbnModel, x) -> list[np.ndarray]:
    """Activations of every hidden layer, bottom first."""
    h = as_matrix(x)
    if h.shape[1] != m.widths[0]:
        raise DimensionMismatchError(f"input has width {h.shape[1]}, model expects {m.widths[0]}")
    acts = []
    for W, b in m.layers:
        h = np.tanh(h @ W + b)
        acts.append(h)
    return acts


def hidden_features(m: DbnModel, x, depth: int) -> SampleMatrix:
    if not 1 <= depth <= m.depth:
        raise DepthRangeError(f"depth must be in 1..{m.depth}, got {depth}")
    return SampleMatrix(forward(m, x)[depth - 1])


def predict(m: DbnModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Class index per row (ties to the lowest index) and the class-probability rows."""
    if m.softmax is None:
        raise MissingHeadError("model has no softmax head; fine-tune it first")
    top = forward(m, x)[-1]
    probs = softmax(top @ m.softmax[0] + m.softmax[1], axis=1)
    return np.argmax(probs, axis=1), probs


# ==========================================
# 4. Fine-tuning
# ==========================================

def _check_labels(labels, n_rows: int, n_classes: Optional[int]) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if y.size != n_rows:
        raise DimensionMismatchError(f"{y.size} labels for {n_rows} samples")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise LabelRangeError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise LabelRangeError(f"labels must be >= 0, got {y.min()}")
    if n_classes is not None and y.max() >= n_classes:
        raise LabelRangeError(f"label {y.max()} outside the head's {n_classes} classes")
    return y


def _sample_weights(y: np.ndarray, n_classes: int, mode: str) -> np.ndarray:
    if mode == "none":
        return np.ones(y.size)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    per_class = np.where(counts > 0, y.size / (n_classes * np.maximum(counts, 1.0)), 0.0)
    return per_class[y]


def loss_and_gradients(m: DbnModel, x, labels, l2: float = 0.0,
                       sample_weight: Optional[np.ndarray] = None
                       ) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """
    Weighted mean cross-entropy plus l2/2 * sum ||W||^2 (weights only), and its gradient
    for every (W, b) pair: hidden layers bottom-up, then the softmax head.
    """
    if m.softmax is None:
        raise MissingHeadError("loss needs a softmax head")
    xx = as_matrix(x)
    y = _check_labels(labels, xx.shape[0], m.n_classes)
    w = np.ones(y.size) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    w = w / w.sum()

    acts = forward(m, xx)
    Ws, bs = m.softmax
    logits = acts[-1] @ Ws + bs
    logp = log_softmax(logits, axis=1)
    loss = -float(np.sum(w * logp[np.arange(y.size), y]))
    loss += 0.5 * l2 * sum(float(np.sum(W ** 2)) for W, _ in m._all_params())

    delta = np.exp(logp)
    delta[np.arange(y.size), y] -= 1.0
    delta *= w[:, None]

    grads = [(acts[-1].T @ delta + l2 * Ws, delta.sum(axis=0))]
    delta = (delta @ Ws.T) * (1.0 - acts[-1] ** 2)
    for i in range(m.depth - 1, -1, -1):
        W, _ = m.layers[i]
        below = acts[i - 1] if i > 0 else xx
        grads.append((below.T @ delta + l2 * W, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - below ** 2)
    grads.reverse()
    return loss, grads


def fine_tune(m: DbnModel, data, labels, cfg: FineTuneConfig) -> tuple[DbnModel, list[float]]:
    """
    Mini-batch SGD on every layer and the head. Attaches a zero-initialized head when
    the model has none. Returns the tuned copy and the full-training-set loss per epoch.
    """
    x = as_matrix(data)
    y = _check_labels(labels, x.shape[0], m.n_classes)
    model = m.copy()
    if model.softmax is None:
        n_classes = max(2, int(y.max()) + 1)
        model.softmax = (np.zeros((model.widths[-1], n_classes)), np.zeros(n_classes))
    weights = _sample_weights(y, model.n_classes, cfg.class_weight)

    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_gradients(model, x[idx], y[idx], cfg.l2, weights[idx])
            params = model._all_params()
            for (W, b), (gW, gb) in zip(params, grads):
                W -= cfg.learning_rate * gW
                b -= cfg.learning_rate * gb
        loss, _ = loss_and_gradients(model, x, y, cfg.l2, weights)
        losses.append(loss)
        if (epoch + 1) % 50 == 0 or epoch == 0:
            logger.info("[dbn fine-tune] epoch %d/%d loss=%.5f", epoch + 1, cfg.epochs, loss)
    if not all(np.all(np.isfinite(W)) for W, _ in model._all_params()):
        raise FloatingPointError("fine-tuning diverged; lower the learning rate")
    return model, losses


# ==========================================
# 5. Persistence
# ==========================================

def save_dbn(m: DbnModel, path: Union[str, Path], dtype: str = "<f4") -> None:
    header = {
        "kind": "dbn",
        "format_version": FORMAT_VERSION,
        "depth": m.depth,
        "widths": m.widths,
        "n_classes": m.n_classes,
    }
    blocks = {}
    for i, (W, b) in enumerate(m.layers, start=1):
        blocks[f"W{i}"] = W
        blocks[f"b{i}"] = b
    if m.softmax is not None:
        blocks["softmax_W"], blocks["softmax_b"] = m.softmax
    write_container(path, DBN_MAGIC, header, blocks, dtype=dtype)


def load_dbn(path: Union[str, Path]) -> DbnModel:
    header, blocks = read_container(path, DBN_MAGIC)
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported DBN format version {header.get('format_version')!r}")
    depth = int(header["depth"])
    layers = [(blocks[f"W{i}"], blocks[f"b{i}"]) for i in range(1, depth + 1)]
    head = None
    if header.get("n_classes") is not None:
        head = (blocks["softmax_W"], blocks["softmax_b"])
    return DbnModel(layers, head)
