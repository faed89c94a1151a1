"""MAE/RMSE over missing voxels along the time axis and the feature axis.

Two divisor conventions are offered:

``per-element``
    residues averaged over every missing entry (M * T of them);
``paper-literal``
    time axis: each missing voxel's Manhattan distance (sum over T) averaged
    over the M voxels, and RMSE as sqrt(mean over voxels of that distance squared).
    Feature axis: the same with the roles of voxels and timesteps swapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PER_ELEMENT = "per-element"
PAPER_LITERAL = "paper-literal"
MODES = (PER_ELEMENT, PAPER_LITERAL)
METRICS = ("mae_time", "rmse_time", "mae_feature", "rmse_feature")


def _residues(truth, imputed, mask) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    mask = np.asarray(mask)
    if truth.shape != imputed.shape or mask.shape != truth.shape:
        raise ValidationError("truth, imputed and mask must share a shape")
    rows = (mask == 1).any(axis=1)
    if not rows.any():
        raise ValidationError("no missing voxels to score")
    return truth[rows] - imputed[rows]  # (M, T)


def _check_mode(mode):
    if mode not in MODES:
        raise ValidationError(f"unknown metric mode {mode!r}; expected one of {MODES}")


def mae_time(truth, imputed, mask, mode: str = PER_ELEMENT) -> float:
    _check_mode(mode)
    r = np.abs(_residues(truth, imputed, mask))
    if mode == PER_ELEMENT:
        return float(r.mean())
    return float(r.sum(axis=1).mean())


def rmse_time(truth, imputed, mask, mode: str = PER_ELEMENT) -> float:
    _check_mode(mode)
    r = _residues(truth, imputed, mask)
    if mode == PER_ELEMENT:
        return float(np.sqrt((r * r).mean()))
    manhattan = np.abs(r).sum(axis=1)
    return float(np.sqrt((manhattan ** 2).mean()))


def mae_feature(truth, imputed, mask, mode: str = PER_ELEMENT) -> float:
    _check_mode(mode)
    r = np.abs(_residues(truth, imputed, mask))
    if mode == PER_ELEMENT:
        return float(r.mean(axis=0).mean())
    return float(r.sum(axis=0).mean())


def rmse_feature(truth, imputed, mask, mode: str = PER_ELEMENT) -> float:
    _check_mode(mode)
    r = _residues(truth, imputed, mask)
    if mode == PER_ELEMENT:
        return float(np.sqrt((r * r).mean(axis=0).mean()))
    manhattan = np.abs(r).sum(axis=0)
    return float(np.sqrt((manhattan ** 2).mean()))


def score(truth, imputed, mask, mode: str = PER_ELEMENT) -> tuple[float, float, float, float]:
    """(mae_time, rmse_time, mae_feature, rmse_feature) for one recording."""
    return (mae_time(truth, imputed, mask, mode), rmse_time(truth, imputed, mask, mode),
            mae_feature(truth, imputed, mask, mode), rmse_feature(truth, imputed, mask, mode))


def format_pm(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


@dataclass
class MetricsReport:
    per_recording: list
    model_name: str = ""
    removal_mode: str = ""
    missing_rate: float = 0.0
    metric_mode: str = PER_ELEMENT
    seed: int | None = None
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.per_recording, dtype=np.float64).reshape(-1, len(METRICS))
        if len(vals) == 0:
            raise ValidationError("report needs at least one recording")
        if (vals < 0).any():
            raise ValidationError("metric values must be nonnegative")
        self.per_recording = [tuple(float(x) for x in row) for row in vals]
        self.mean = {m: float(vals[:, i].mean()) for i, m in enumerate(METRICS)}
        self.std = {m: float(vals[:, i].std()) for i, m in enumerate(METRICS)}

    @property
    def n_recordings(self) -> int:
        return len(self.per_recording)

    def summary(self, metric: str, digits: int = 2) -> str:
        return format_pm(self.mean[metric], self.std[metric], digits)


def aggregate(reports) -> MetricsReport:
    """Pool per-recording values of several reports: mean and population std per metric.

    Entries may be MetricsReport objects or raw 4-tuples.
    """
    rows, first = [], None
    for rep in reports:
        if isinstance(rep, MetricsReport):
            first = first or rep
            rows.extend(rep.per_recording)
        else:
            rows.append(tuple(rep))
    if not rows:
        raise ValidationError("nothing to aggregate")
    if first is None:
        return MetricsReport(rows)
    return MetricsReport(rows, first.model_name, first.removal_mode, first.missing_rate,
                         first.metric_mode)
