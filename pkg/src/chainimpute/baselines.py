"""Non-neural baselines: spatial kNN, DTW barycenter, MICE and training-mean imputation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DistanceMatrix, MaskedRecording, Recording
from .errors import ValidationError

log = logging.getLogger(__name__)


# ------------------------------------------------------------
# kNN
# ------------------------------------------------------------

def knn_impute(rec: MaskedRecording, d: DistanceMatrix, k: int = 3,
               only: np.ndarray | None = None) -> np.ndarray:
    """Each missing voxel gets the plain mean of its k spatially nearest observed voxels.

    Distance ties go to the lower voxel index. ``only`` restricts which missing
    voxels are filled (the others keep NaN).
    """
    missing = rec.missing_voxels
    observed = np.flatnonzero(~missing)
    if len(observed) == 0:
        raise ValidationError("kNN needs at least one observed voxel")
    k = min(k, len(observed))
    out = rec.values.copy()
    targets = np.flatnonzero(missing if only is None else (missing & only))
    for v in targets:
        dist = d.entries[v, observed]
        nearest = observed[np.argsort(dist, kind="stable")[:k]]
        out[v] = rec.values[nearest].mean(axis=0)
    return out


# ------------------------------------------------------------
# DTW and barycenter averaging
# ------------------------------------------------------------

@dataclass(frozen=True)
class DtwResult:
    cost: float
    path: list


def _dtw_table(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, m = len(a), len(b)
    local = np.abs(a[:, None] - b[None, :])
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        row_prev = D[i - 1]
        row = D[i]
        li = local[i - 1]
        for j in range(1, m + 1):
            row[j] = li[j - 1] + min(row_prev[j - 1], row[j - 1], row_prev[j])
    return D


def _backtrack(D: np.ndarray) -> list:
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        # predecessor preference: diagonal, then (0, 1) step, then (1, 0) step
        options = [(i - 1, j - 1), (i, j - 1), (i - 1, j)]
        best = min(options, key=lambda ij: D[ij])
        i, j = best
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def dtw(a, b) -> DtwResult:
    """Dynamic time warping with |a_i - b_j| local cost and the optimal alignment path."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("DTW needs nonempty sequences")
    D = _dtw_table(a, b)
    return DtwResult(float(D[-1, -1]), _backtrack(D))


def _dtw_batch_costs(center: np.ndarray, series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DP tables of ``center`` against every row of ``series`` at once: (N, n+1, m+1)."""
    N, m = series.shape
    n = len(center)
    local = np.abs(center[None, :, None] - series[:, None, :])
    D = np.full((N, n + 1, m + 1), np.inf)
    D[:, 0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[:, i, j] = local[:, i - 1, j - 1] + np.minimum(
                np.minimum(D[:, i - 1, j - 1], D[:, i, j - 1]), D[:, i - 1, j])
    return D[:, -1, -1].copy(), D


def dba_barycenter(series: Sequence, iters: int = 10, tol: float = 1e-9,
                   return_trace: bool = False):
    """DTW barycenter averaging starting from the arithmetic mean.

    Each round aligns every series to the current center and replaces each center
    sample by the mean of the values aligned to it. A round whose total DTW cost
    does not drop by at least ``tol`` is rejected and iteration stops, so the cost
    trace is non-increasing.
    """
    S = np.asarray(series, dtype=np.float64)
    if S.ndim != 2 or len(S) == 0:
        raise ValidationError("need at least one series of common length")
    center = S.mean(axis=0)
    costs, tables = _dtw_batch_costs(center, S)
    trace = [float(costs.sum())]
    for _ in range(iters):
        sums = np.zeros_like(center)
        counts = np.zeros_like(center)
        for s, D in zip(S, tables):
            for i, j in _backtrack(D):
                sums[i] += s[j]
                counts[i] += 1
        candidate = sums / counts
        new_costs, new_tables = _dtw_batch_costs(candidate, S)
        total = float(new_costs.sum())
        if total > trace[-1] - tol:
            break
        center, tables = candidate, new_tables
        trace.append(total)
    return (center, trace) if return_trace else center


def barycenter_impute(rec: MaskedRecording, iters: int = 10) -> np.ndarray:
    """Every missing voxel receives the DBA barycenter of the observed voxel series."""
    missing = rec.missing_voxels
    if missing.all():
        raise ValidationError("no observed voxels to average")
    out = rec.values.copy()
    if missing.any():
        out[missing] = dba_barycenter(rec.values[~missing], iters)
    return out


# ------------------------------------------------------------
# MICE (deterministic single imputation)
# ------------------------------------------------------------

RIDGE = 1e-8


@dataclass
class MiceModel:
    coef: np.ndarray       # (V, V), column j regresses voxel j on the others; zero diagonal
    intercept: np.ndarray  # (V,)
    means: np.ndarray      # (V,) training means, used to initialise missing entries
    n_cycles: int = 5


def mice_fit(train: Sequence[Recording], n_cycles: int = 5) -> MiceModel:
    """Least squares of each voxel on all others, with a small ridge for singular systems."""
    if len(train) == 0:
        raise ValidationError("training set is empty")
    X = np.concatenate([r.values for r in train], axis=1).T  # (N, V)
    N, V = X.shape
    if N < V:
        log.warning("MICE: %d samples for %d regressors per voxel; relying on ridge jitter", N, V - 1)
    means = X.mean(axis=0)
    Xc = X - means
    G = Xc.T @ Xc
    coef = np.zeros((V, V))
    for j in range(V):
        others = np.r_[0:j, j + 1:V]
        A = G[np.ix_(others, others)] + RIDGE * np.eye(V - 1)
        coef[others, j] = np.linalg.solve(A, G[others, j])
    intercept = means - coef.T @ means
    return MiceModel(coef, intercept, means, n_cycles)


def mice_impute(model: MiceModel, rec: MaskedRecording) -> np.ndarray:
    missing = rec.missing_voxels
    x = rec.values.copy()
    if not missing.any():
        return x
    idx = np.flatnonzero(missing)
    x[idx] = model.means[idx, None]
    for _ in range(model.n_cycles):
        for j in idx:
            x[j] = model.coef[:, j] @ x + model.intercept[j]
    return x


# ------------------------------------------------------------
# Mean imputation
# ------------------------------------------------------------

def mean_impute(means, rec: MaskedRecording, d: DistanceMatrix, k: int = 3) -> np.ndarray:
    """Constant training-mean series; voxels with no training mean (NaN) fall back to kNN."""
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (rec.V,):
        raise ValidationError(f"need {rec.V} means, got shape {means.shape}")
    missing = rec.missing_voxels
    out = rec.values.copy()
    known = ~np.isnan(means)
    fill = missing & known
    out[fill] = means[fill, None]
    unknown = missing & ~known
    if unknown.any():
        out[unknown] = knn_impute(rec, d, k, only=unknown)[unknown]
    return out
