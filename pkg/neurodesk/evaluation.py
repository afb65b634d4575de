"""
Quantitative evaluation against ground truth: PCA baseline, component matching,
functional network connectivity (FNC), modularity and the paired t-test.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import ttest_rel
from sklearn.metrics import silhouette_score

from neurodesk.data import DimensionMismatchError, as_matrix

logger = logging.getLogger(__name__)

# singular values below this fraction of the largest count as rank-deficient
RANK_RTOL = 1e-10


class DegenerateVarianceError(ValueError):
    pass


class DegenerateRankError(ValueError):
    pass


# ==========================================
# 1. Correlation helpers
# ==========================================

def _unit_rows(x: np.ndarray) -> np.ndarray:
    """Rows centered and scaled to unit norm; zero-variance rows stay all-zero."""
    centered = x - x.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(centered, axis=1, keepdims=True)
    return np.divide(centered, norm, out=np.zeros_like(centered), where=norm > 0)


def correlation_matrix(a, b) -> np.ndarray:
    """Pearson r between every row of a and every row of b (r = 0 for a constant row)."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"row lengths differ: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(_unit_rows(a) @ _unit_rows(b).T, -1.0, 1.0)


# ==========================================
# 2. PCA baseline & matching
# ==========================================

def sign_convention(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), pivots])
    signs[signs == 0] = 1.0
    return signs


def pca_baseline(data, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Top principal directions of the row-centered data.
    Returns (components: n_components x cols, projections: rows x n_components).
    """
    x = as_matrix(data)
    if not 1 <= n_components <= min(x.shape):
        raise ValueError(f"n_components must be in 1..{min(x.shape)}, got {n_components}")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] == 0 or s[n_components - 1] <= RANK_RTOL * s[0]:
        rank = int(np.count_nonzero(s > RANK_RTOL * s[0])) if s[0] > 0 else 0
        raise DegenerateRankError(f"data has rank {rank}, cannot extract {n_components} components")
    comps = vt[:n_components]
    comps = comps * sign_convention(comps)[:, None]
    return comps, centered @ comps.T


@dataclass(frozen=True)
class MatchResult:
    est_index: np.ndarray
    gt_index: np.ndarray
    signs: np.ndarray
    correlations: np.ndarray
    mean_sm: float
    mean_tc: Optional[float] = None

    @property
    def permutation(self) -> dict[int, int]:
        """Estimated component -> matched ground-truth component."""
        return {int(e): int(g) for e, g in zip(self.est_index, self.gt_index)}


def match_components(est, gt, est_tc=None, gt_tc=None) -> MatchResult:
    """
    Hungarian assignment maximizing the summed |Pearson r| between estimated and
    ground-truth maps. Optional time courses (columns per component) are scored on the
    same assignment and signs.
    """
    r = correlation_matrix(est, gt)
    est_idx, gt_idx = linear_sum_assignment(-np.abs(r))
    matched = r[est_idx, gt_idx]
    signs = np.where(matched < 0, -1.0, 1.0)
    corr = np.abs(matched)

    mean_tc = None
    if est_tc is not None and gt_tc is not None:
        e_tc, g_tc = as_matrix(est_tc), as_matrix(gt_tc)
        tc_r = correlation_matrix(e_tc[:, est_idx].T, g_tc[:, gt_idx].T)
        mean_tc = float(np.mean(np.abs(np.diag(tc_r))))
    return MatchResult(est_idx, gt_idx, signs, corr, float(corr.mean()), mean_tc)


def _connectivity(prefix: str, est_tc, match: MatchResult, gt_fnc: np.ndarray) -> dict[str, float]:
    est = matched_fnc(est_tc, match)
    return {f"{prefix}_fnc": fnc_accuracy(est, gt_fnc), f"{prefix}_modularity": modularity(est)[0]}


def source_recovery(gt_maps, gt_tc, data, est_maps, est_tc=None) -> dict[str, float]:
    """
    Matched SM/TC correlations of an estimate and of the PCA baseline on `data`
    with as many components as ground-truth sources. With at least 2 sources and
    3 time points the matched FNC accuracy and modularity of each are added.
    """
    gt_maps, gt_tc = as_matrix(gt_maps), as_matrix(gt_tc)
    model = match_components(est_maps, gt_maps, est_tc, gt_tc if est_tc is not None else None)
    comps, proj = pca_baseline(data, gt_maps.shape[0])
    pca = match_components(comps, gt_maps, proj, gt_tc)
    out = {"model_sm": model.mean_sm, "pca_sm": pca.mean_sm, "pca_tc": pca.mean_tc}
    if model.mean_tc is not None:
        out["model_tc"] = model.mean_tc
    if gt_maps.shape[0] >= 2 and gt_tc.shape[0] >= 3:
        gt_fnc = fnc(gt_tc)
        out.update(_connectivity("pca", proj, pca, gt_fnc))
        if est_tc is not None:
            out.update(_connectivity("model", est_tc, model, gt_fnc))
    logger.info("[eval] SM correlation model=%.3f pca=%.3f", model.mean_sm, pca.mean_sm)
    return out


def matched_fnc(est_tc, match: MatchResult) -> np.ndarray:
    """FNC of the matched estimated time courses, ordered and signed like the ground truth."""
    tc = as_matrix(est_tc)
    order = np.argsort(match.gt_index, kind="stable")
    cols = tc[:, match.est_index[order]] * match.signs[order]
    return fnc(cols)


# ==========================================
# 3. Connectivity & modularity
# ==========================================

def fnc(tc) -> np.ndarray:
    """R x R correlation of time-course columns; constant columns get 0 off the diagonal."""
    x = as_matrix(tc)
    if x.shape[0] < 3:
        raise ValueError(f"FNC needs at least 3 time points, got {x.shape[0]}")
    c = correlation_matrix(x.T, x.T)
    c = (c + c.T) / 2.0
    np.fill_diagonal(c, 1.0)
    return c


def fnc_accuracy(est_fnc: np.ndarray, gt_fnc: np.ndarray) -> float:
    """Pearson r between the upper triangles of two FNC matrices of equal size."""
    est_fnc, gt_fnc = np.asarray(est_fnc), np.asarray(gt_fnc)
    if est_fnc.shape != gt_fnc.shape:
        raise DimensionMismatchError(f"FNC shapes differ: {est_fnc.shape} vs {gt_fnc.shape}")
    iu = np.triu_indices(len(gt_fnc), k=1)
    return float(correlation_matrix(est_fnc[iu], gt_fnc[iu])[0, 0])


def _community_matrix(labels: np.ndarray, n_comm: int) -> np.ndarray:
    m = np.zeros((labels.size, n_comm))
    m[np.arange(labels.size), labels] = 1.0
    return m


def _signed_q(c: np.ndarray, labels: np.ndarray) -> float:
    """Q+ / s+ minus Q- / (s+ + s-), with positive and negative weights normalized separately."""
    w = c.copy()
    np.fill_diagonal(w, 0.0)
    pos, neg = np.maximum(w, 0.0), np.maximum(-w, 0.0)
    s_pos, s_neg = pos.sum(), neg.sum()
    member = _community_matrix(labels, labels.max() + 1)

    def part(weights: np.ndarray, total: float) -> float:
        if total == 0:
            return 0.0
        within = np.trace(member.T @ weights @ member)
        strength = weights.sum(axis=1) @ member
        return within - float(strength @ strength) / total

    q_pos = part(pos, s_pos) / s_pos if s_pos > 0 else 0.0
    q_neg = part(neg, s_neg) / (s_pos + s_neg) if s_neg > 0 else 0.0
    return float(q_pos - q_neg)


def modularity(c) -> tuple[float, np.ndarray]:
    """
    Greedy agglomerative partition of the positive-weight graph (diagonal excluded),
    merging the pair with the largest modularity gain while it is positive; ties go
    to the lowest community indices. Labels are numbered by first member node.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionMismatchError(f"modularity needs a square matrix, got {c.shape}")
    if not np.allclose(c, c.T):
        raise ValueError("modularity needs a symmetric matrix")
    n = len(c)
    w = np.maximum(c, 0.0)
    np.fill_diagonal(w, 0.0)
    total = w.sum()
    labels = np.arange(n)
    if total == 0:
        return 0.0, labels

    members = [[i] for i in range(n)]
    while len(members) > 1:
        member = np.zeros((n, len(members)))
        for k, nodes in enumerate(members):
            member[nodes, k] = 1.0
        between = member.T @ w @ member
        strength = w.sum(axis=1) @ member
        gain = 2.0 * between / total - 2.0 * np.outer(strength, strength) / total ** 2
        iu = np.triu_indices(len(members), k=1)
        best = int(np.argmax(gain[iu]))
        if gain[iu][best] <= 0:
            break
        a, b = iu[0][best], iu[1][best]
        members[a] = sorted(members[a] + members[b])
        del members[b]

    members.sort(key=lambda nodes: nodes[0])
    for k, nodes in enumerate(members):
        labels[nodes] = k
    return _signed_q(c, labels), labels


# ==========================================
# 4. Statistics
# ==========================================

def paired_t_test(x, y) -> tuple[float, float]:
    """Paired t statistic and two-sided p value."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DimensionMismatchError(f"paired samples differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError(f"paired t-test needs at least 2 pairs, got {x.size}")
    d = x - y
    if np.all(d == d[0]):
        raise DegenerateVarianceError("paired differences have zero variance")
    res = ttest_rel(x, y)
    return float(res.statistic), float(res.pvalue)


def paired_comparison(model, baseline) -> dict[str, Optional[float]]:
    """Report-ready paired t-test of model vs baseline scores; t and p are None when undefined."""
    model = np.asarray(model, dtype=np.float64).reshape(-1)
    baseline = np.asarray(baseline, dtype=np.float64).reshape(-1)
    out: dict[str, Optional[float]] = {
        "n": int(model.size),
        "model_mean": float(model.mean()) if model.size else None,
        "baseline_mean": float(baseline.mean()) if baseline.size else None,
        "t": None,
        "p": None,
    }
    try:
        out["t"], out["p"] = paired_t_test(model, baseline)
    except DimensionMismatchError:
        raise
    except ValueError as exc:
        logger.warning("[eval] %s; no t-test", exc)
    return out


def silhouette(positions, labels) -> float:
    """Mean silhouette coefficient of labeled points (Euclidean)."""
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")
    return float(silhouette_score(as_matrix(positions), labels, metric="euclidean"))
