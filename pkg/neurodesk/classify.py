"""
Classification harness for learned features: class-balanced folds, macro F-score,
k-nearest-neighbour and multinomial logistic-regression classifiers, and the
depth experiment comparing raw data against DBN features of increasing depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import cdist
from scipy.special import log_softmax
from sklearn.metrics import f1_score

from neurodesk import dbn, rbm
from neurodesk.data import DimensionMismatchError, as_matrix

logger = logging.getLogger(__name__)

CLASSIFIERS = ("LR", "KNN")
PROTOCOLS = ("cv", "all")


# ==========================================
# 1. Folds
# ==========================================

@dataclass(frozen=True, eq=False)
class FoldPlan:
    assignment: np.ndarray
    n_folds: int

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, test indices) for one fold."""
        if not 0 <= fold < self.n_folds:
            raise ValueError(f"fold must be in 0..{self.n_folds - 1}, got {fold}")
        return np.flatnonzero(self.assignment != fold), np.flatnonzero(self.assignment == fold)


def kfold_split(labels, folds: int, seed: int = 0) -> FoldPlan:
    """Seeded shuffle within each class, then round-robin over folds with a running offset."""
    y = np.asarray(labels).reshape(-1)
    if folds < 1:
        raise ValueError(f"folds must be >= 1, got {folds}")
    if folds > y.size:
        raise ValueError(f"{folds} folds requested for {y.size} samples")
    rng = np.random.default_rng(seed)
    assignment = np.empty(y.size, dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        assignment[idx] = (offset + np.arange(idx.size)) % folds
        offset = (offset + idx.size) % folds
    return FoldPlan(assignment, folds)


def holdout_split(labels, fraction: float = 0.2, seed: int = 0) -> np.ndarray:
    """Boolean validation flag per sample, the same fraction drawn from every class."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    y = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng(seed)
    flag = np.zeros(y.size, dtype=bool)
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        flag[idx[: int(round(fraction * idx.size))]] = True
    return flag


# ==========================================
# 2. Scores
# ==========================================

def _score_inputs(pred, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.size != truth.size:
        raise DimensionMismatchError(f"{pred.size} predictions for {truth.size} labels")
    if truth.size == 0:
        raise ValueError("cannot score empty predictions")
    return pred, truth, np.union1d(pred, truth)


def macro_f_score(pred, truth) -> float:
    pred, truth, classes = _score_inputs(pred, truth)
    return float(f1_score(truth, pred, labels=classes, average="macro", zero_division=0))


def per_class_f_scores(pred, truth) -> dict[int, float]:
    pred, truth, classes = _score_inputs(pred, truth)
    scores = f1_score(truth, pred, labels=classes, average=None, zero_division=0)
    return {int(c): float(s) for c, s in zip(classes, scores)}


# ==========================================
# 3. Classifiers
# ==========================================

def knn_classify(train, train_labels, test, k: int = 5) -> np.ndarray:
    """Majority vote of the k nearest training rows; distance and vote ties go to the lower index."""
    x_train, x_test = as_matrix(train), as_matrix(test)
    y = np.asarray(train_labels, dtype=np.int64).reshape(-1)
    if x_train.shape[0] == 0 or y.size == 0:
        raise ValueError("k-NN needs a non-empty training set")
    if y.size != x_train.shape[0]:
        raise DimensionMismatchError(f"{y.size} labels for {x_train.shape[0]} training rows")
    if x_train.shape[1] != x_test.shape[1]:
        raise DimensionMismatchError(f"train width {x_train.shape[1]} != test width {x_test.shape[1]}")
    if not 1 <= k <= x_train.shape[0]:
        raise ValueError(f"k must be in 1..{x_train.shape[0]}, got {k}")

    nearest = np.argsort(cdist(x_test, x_train), axis=1, kind="stable")[:, :k]
    n_classes = int(y.max()) + 1
    return np.array([np.argmax(np.bincount(y[row], minlength=n_classes)) for row in nearest], dtype=np.int64)


class LogRegConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    l2: float = Field(1e-4, ge=0)
    max_iters: int = Field(500, ge=1)
    grad_tol: float = Field(1e-8, ge=0)


@dataclass(eq=False)
class LogRegModel:
    W: np.ndarray
    b: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]


def logreg_loss_and_gradient(model: LogRegModel, data, labels, l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy + l2/2 ||W||^2 and its gradient w.r.t. (W, b)."""
    x = as_matrix(data)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.shape[1] != model.W.shape[0]:
        raise DimensionMismatchError(f"data width {x.shape[1]}, model expects {model.W.shape[0]}")
    logp = log_softmax(x @ model.W + model.b, axis=1)
    rows = np.arange(y.size)
    loss = -float(logp[rows, y].mean()) + 0.5 * l2 * float(np.sum(model.W ** 2))
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= y.size
    return loss, x.T @ delta + l2 * model.W, delta.sum(axis=0)


def logreg_train(data, labels, cfg: Optional[LogRegConfig] = None) -> tuple[LogRegModel, list[float]]:
    """
    Full-batch gradient descent from zero with step 1/L, where
    L = ||[X 1]||_2^2 / (2 n) + l2 bounds the loss curvature. Returns the model and loss per iteration.
    """
    cfg = cfg or LogRegConfig()
    x = as_matrix(data)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0]:
        raise DimensionMismatchError(f"{y.size} labels for {x.shape[0]} rows")
    if y.min() < 0:
        raise ValueError("labels must be nonnegative class indices")
    n_classes = max(2, int(y.max()) + 1)
    model = LogRegModel(np.zeros((x.shape[1], n_classes)), np.zeros(n_classes))

    augmented = np.column_stack([x, np.ones(x.shape[0])])
    lipschitz = np.linalg.norm(augmented, 2) ** 2 / (2.0 * x.shape[0]) + cfg.l2
    step = 1.0 / lipschitz

    losses = []
    for _ in range(cfg.max_iters):
        loss, gW, gb = logreg_loss_and_gradient(model, x, y, cfg.l2)
        losses.append(loss)
        if np.sqrt(np.sum(gW ** 2) + np.sum(gb ** 2)) <= cfg.grad_tol:
            break
        model.W -= step * gW
        model.b -= step * gb
    return model, losses


def logreg_predict(model: LogRegModel, data) -> np.ndarray:
    x = as_matrix(data)
    if x.shape[1] != model.W.shape[0]:
        raise DimensionMismatchError(f"data width {x.shape[1]}, model expects {model.W.shape[0]}")
    return np.argmax(x @ model.W + model.b, axis=1)


# ==========================================
# 4. Depth experiment
# ==========================================

def standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """z-score both splits with the training split's statistics (constant columns -> 0)."""
    mean = train.mean(axis=0)
    sd = train.std(axis=0)
    scale = np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 0.0)
    return (train - mean) * scale, (test - mean) * scale


def _score(features_train, y_train, features_test, y_test, knn_k: int,
           logreg_cfg: LogRegConfig) -> dict[str, tuple[float, dict[int, float]]]:
    f_train, f_test = standardize(features_train, features_test)
    lr, _ = logreg_train(f_train, y_train, logreg_cfg)
    lr_pred = logreg_predict(lr, f_test)
    knn_pred = knn_classify(f_train, y_train, f_test, min(knn_k, len(y_train)))
    return {
        "LR": (macro_f_score(lr_pred, y_test), per_class_f_scores(lr_pred, y_test)),
        "KNN": (macro_f_score(knn_pred, y_test), per_class_f_scores(knn_pred, y_test)),
    }


def _split_scores(x_train, y_train, x_test, y_test, layer_sizes: list[int], rbm_cfg: rbm.RbmTrainConfig,
                  ft_cfg: dbn.FineTuneConfig, knn_k: int, logreg_cfg: LogRegConfig) -> dict:
    """Scores of raw rows and of every depth's fine-tuned top-layer features for one split."""
    x_train, x_test = standardize(x_train, x_test)
    out = {("raw", clf): res for clf, res in _score(x_train, y_train, x_test, y_test, knn_k, logreg_cfg).items()}
    stack = dbn.pretrain(x_train, layer_sizes, rbm_cfg)
    for depth in range(1, len(layer_sizes) + 1):
        tuned, _ = dbn.fine_tune(dbn.truncate(stack, depth), x_train, y_train, ft_cfg)
        f_train = dbn.hidden_features(tuned, x_train, depth).values
        f_test = dbn.hidden_features(tuned, x_test, depth).values
        for clf, res in _score(f_train, y_train, f_test, y_test, knn_k, logreg_cfg).items():
            out[(str(depth), clf)] = res
    return out


def depth_experiment(data, labels, layer_sizes: list[int], rbm_cfg: rbm.RbmTrainConfig,
                     ft_cfg: dbn.FineTuneConfig, folds: int = 10, seed: int = 0, knn_k: int = 5,
                     logreg_cfg: Optional[LogRegConfig] = None,
                     protocol: Literal["cv", "all"] = "cv") -> pd.DataFrame:
    """
    Macro F of LR and KNN on raw data and on the top-layer features of fine-tuned
    DBNs of depth 1..len(layer_sizes). Each depth fine-tunes its own truncation of
    one greedy pretraining.

    protocol="cv": class-balanced k-fold cross validation, one pretraining per fold.
    protocol="all": pretrain, fine-tune, fit and score on every row (representational
    capacity, no held-out data); `folds` is ignored and sd_f is 0.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    x = as_matrix(data)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0]:
        raise DimensionMismatchError(f"{y.size} labels for {x.shape[0]} rows")
    logreg_cfg = logreg_cfg or LogRegConfig()
    depths = ["raw"] + [str(d) for d in range(1, len(layer_sizes) + 1)]
    scores = {(d, c): [] for d in depths for c in CLASSIFIERS}

    if protocol == "all":
        logger.info("[depth] all %d rows, no held-out split", y.size)
        for key, res in _split_scores(x, y, x, y, layer_sizes, rbm_cfg, ft_cfg, knn_k, logreg_cfg).items():
            scores[key].append(res)
    else:
        plan = kfold_split(y, folds, seed)
        for fold in range(folds):
            train_idx, test_idx = plan.split(fold)
            if test_idx.size == 0:
                continue
            logger.info("[cv %d/%d] train=%d test=%d", fold + 1, folds, train_idx.size, test_idx.size)
            fold_cfg = rbm_cfg.model_copy(update={"seed": rbm_cfg.seed + fold * len(layer_sizes)})
            fold_scores = _split_scores(x[train_idx], y[train_idx], x[test_idx], y[test_idx],
                                        layer_sizes, fold_cfg, ft_cfg, knn_k, logreg_cfg)
            for key, res in fold_scores.items():
                scores[key].append(res)

    classes = np.unique(y)
    rows = []
    for (depth, clf), results in scores.items():
        macro = np.array([r[0] for r in results])
        row = {
            "depth": depth,
            "classifier": clf,
            "mean_f": float(macro.mean()),
            "sd_f": float(macro.std(ddof=1)) if macro.size > 1 else 0.0,
            "folds": int(macro.size),
        }
        for cls in classes:
            row[f"f_class_{int(cls)}"] = float(np.mean([r[1].get(int(cls), 0.0) for r in results]))
        rows.append(row)
    return pd.DataFrame(rows)
