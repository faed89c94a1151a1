"""Recordings, masks, spatial/correlation matrices, normalization and synthetic data.

A recording is a V x T matrix: one row per voxel, one column per timestep.
Missing voxels are whole rows carrying NaN, with ``mask == 1`` on those rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

STD_FLOOR = 1e-8


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ------------------------------------------------------------
# Value objects
# ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Recording:
    """Complete multivariate series ``values`` (V, T) with voxel ``coords`` (V, 3)."""

    values: np.ndarray
    coords: np.ndarray
    subject_id: str = ""
    window_id: int = 0

    def __post_init__(self):
        values = _frozen(self.values)
        coords = _frozen(self.coords)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"values must be a non-empty V x T matrix, got shape {values.shape}")
        if np.isnan(values).any():
            raise ValidationError("complete recording contains NaN")
        if coords.shape != (values.shape[0], 3):
            raise ValidationError(f"coords must be ({values.shape[0]}, 3), got {coords.shape}")
        _check_unique_rows(coords)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "coords", coords)

    @property
    def V(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class MaskedRecording:
    """Recording with missing voxels.

    ``values`` holds NaN exactly where ``mask == 1``; ``truth`` is the complete
    matrix when known (synthetic corruption), otherwise None.
    """

    values: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    truth: np.ndarray | None = None
    subject_id: str = ""
    window_id: int = 0

    def __post_init__(self):
        values = _frozen(self.values)
        mask = _frozen(self.mask, dtype=np.uint8)
        coords = _frozen(self.coords)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"values must be a non-empty V x T matrix, got shape {values.shape}")
        if mask.shape != values.shape:
            raise ValidationError(f"mask shape {mask.shape} != values shape {values.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValidationError("mask must be binary")
        if not np.array_equal(np.isnan(values), mask == 1):
            raise ValidationError("NaN entries of values must coincide with mask == 1")
        if not (mask == mask[:, :1]).all():
            raise ValidationError("mask must be constant along each voxel row")
        if coords.shape != (values.shape[0], 3):
            raise ValidationError(f"coords must be ({values.shape[0]}, 3), got {coords.shape}")
        _check_unique_rows(coords)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "coords", coords)
        if self.truth is not None:
            truth = _frozen(self.truth)
            if truth.shape != values.shape or np.isnan(truth).any():
                raise ValidationError("truth must be a NaN-free matrix shaped like values")
            obs = mask == 0
            if not np.array_equal(truth[obs], values[obs]):
                raise ValidationError("truth must equal values on observed entries")
            object.__setattr__(self, "truth", truth)

    @property
    def V(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def missing_voxels(self) -> np.ndarray:
        """Boolean length-V vector, True for removed voxels."""
        return self.mask[:, 0] == 1

    @classmethod
    def from_recording(cls, rec: Recording, missing: np.ndarray) -> "MaskedRecording":
        """Remove the voxels flagged in ``missing`` (length-V boolean) from ``rec``."""
        missing = np.asarray(missing, dtype=bool)
        values = rec.values.copy()
        values[missing] = np.nan
        mask = np.zeros(values.shape, dtype=np.uint8)
        mask[missing] = 1
        return cls(values=values, mask=mask, coords=rec.coords, truth=rec.values,
                   subject_id=rec.subject_id, window_id=rec.window_id)

    def complete(self) -> Recording:
        if self.truth is None:
            raise ValidationError("recording has no ground truth")
        return Recording(self.truth, self.coords, self.subject_id, self.window_id)


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    entries: np.ndarray
    # subjects the matrix was fit on; lets callers assert there is no test leakage
    subjects: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))

    @property
    def V(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))

    @property
    def V(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    subjects: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        mean = _frozen(self.mean)
        std = _frozen(self.std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValidationError("mean and std must be vectors of equal length")
        if not (std > 0).all():
            raise ValidationError("std entries must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def V(self) -> int:
        return self.mean.shape[0]


def _check_unique_rows(coords: np.ndarray) -> None:
    if len(np.unique(coords, axis=0)) != len(coords):
        raise ValidationError("coordinate rows must be unique")


# ------------------------------------------------------------
# Matrices
# ------------------------------------------------------------

def compute_distance_matrix(coords) -> DistanceMatrix:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValidationError(f"coords must be V x 3, got {coords.shape}")
    _check_unique_rows(coords)
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return DistanceMatrix(d)


def _concat(train: Sequence[Recording]) -> np.ndarray:
    if len(train) == 0:
        raise ValidationError("training set is empty")
    V = train[0].V
    for rec in train:
        if rec.V != V:
            raise ValidationError(f"voxel count mismatch: {rec.V} != {V}")
    return np.concatenate([rec.values for rec in train], axis=1)


def _subjects(train: Iterable[Recording]) -> frozenset:
    return frozenset(rec.subject_id for rec in train)


def compute_correlation_matrix(train: Sequence[Recording]) -> CorrelationMatrix:
    """Pearson correlation of every voxel pair over the concatenated training series."""
    x = _concat(train)
    if x.shape[1] < 2:
        raise ValidationError("need at least two samples per voxel")
    xc = x - x.mean(axis=1, keepdims=True)
    ss = np.sqrt((xc * xc).sum(axis=1))
    flat = ss <= STD_FLOOR * np.sqrt(x.shape[1])
    denom = np.outer(ss, ss)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (xc @ xc.T) / denom
    c[flat, :] = 0.0
    c[:, flat] = 0.0
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return CorrelationMatrix(c, _subjects(train))


# ------------------------------------------------------------
# Normalization
# ------------------------------------------------------------

def fit_norm_stats(train: Sequence[Recording]) -> NormStats:
    x = _concat(train)
    return NormStats(x.mean(axis=1), np.maximum(x.std(axis=1), STD_FLOOR), _subjects(train))


def _check_V(rec, stats: NormStats) -> None:
    if rec.V != stats.V:
        raise ValidationError(f"recording has {rec.V} voxels, stats have {stats.V}")


def apply_norm(rec, stats: NormStats):
    """Z-score each voxel; works on Recording and MaskedRecording (NaN stays NaN)."""
    _check_V(rec, stats)
    mu, sd = stats.mean[:, None], stats.std[:, None]
    if isinstance(rec, MaskedRecording):
        truth = None if rec.truth is None else (rec.truth - mu) / sd
        return replace(rec, values=(rec.values - mu) / sd, truth=truth)
    return replace(rec, values=(rec.values - mu) / sd)


def invert_norm(rec, stats: NormStats):
    _check_V(rec, stats)
    mu, sd = stats.mean[:, None], stats.std[:, None]
    if isinstance(rec, MaskedRecording):
        truth = None if rec.truth is None else rec.truth * sd + mu
        return replace(rec, values=rec.values * sd + mu, truth=truth)
    return replace(rec, values=rec.values * sd + mu)


# ------------------------------------------------------------
# Spatial downsampling
# ------------------------------------------------------------

def downsample_spatial(rec: Recording, factor: int) -> Recording:
    """Average voxels over factor^3 coordinate blocks; block index becomes the new coordinate.

    Output voxels are ordered lexicographically by block index. Empty blocks are omitted.
    """
    if int(factor) != factor or factor < 1:
        raise ValidationError(f"factor must be a positive integer, got {factor}")
    blocks = np.floor_divide(rec.coords, factor)
    keys, inverse = np.unique(blocks, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(keys), rec.T))
    np.add.at(sums, inverse, rec.values)
    counts = np.bincount(inverse, minlength=len(keys)).astype(np.float64)
    return Recording(sums / counts[:, None], keys, rec.subject_id, rec.window_id)


# ------------------------------------------------------------
# Synthetic data
# ------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Synthetic spatially correlated dataset.

    Voxels are the first ``V`` cells of an n x n x n grid in z-major raster order,
    so the defaults give a 5 x 5 x 4 slab. ``width`` defaults to n / 3.
    """

    n: int = 5
    V: int = 100
    T: int = 14
    K: int = 4
    noise_std: float = 0.3
    n_subjects: int = 16
    windows_per_subject: int = 12
    width: float | None = None
    subject_jitter: float = 0.1
    min_period: float = 4.0


def grid_coords(n: int, V: int | None = None) -> np.ndarray:
    zz, yy, xx = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)
    if V is not None:
        if V > n ** 3:
            raise ValidationError(f"V={V} exceeds grid capacity {n ** 3}")
        coords = coords[:V]
    return coords


def synth_dataset(cfg: SynthConfig, seed) -> list[Recording]:
    """Sum of K spatial bumps times random-phase sinusoids, plus white noise.

    Loadings are shared across subjects up to a Gaussian jitter of
    ``subject_jitter``; each window draws fresh periods and phases.
    """
    if cfg.V < 1 or cfg.T < 1 or cfg.K < 1:
        raise ValidationError("V, T and K must be positive")
    rng = as_rng(seed)
    coords = grid_coords(cfg.n, cfg.V)
    width = cfg.n / 3.0 if cfg.width is None else cfg.width
    centers = rng.uniform(0.0, cfg.n - 1, size=(cfg.K, 3))
    d2 = ((coords[None, :, :] - centers[:, None, :]) ** 2).sum(axis=-1)
    if np.isinf(width):
        shared = np.ones_like(d2)
    else:
        shared = np.exp(-d2 / (2.0 * width ** 2))  # (K, V)
    t = np.arange(cfg.T, dtype=np.float64)
    max_period = max(float(cfg.T), cfg.min_period)
    out = []
    for s in range(cfg.n_subjects):
        loadings = shared + cfg.subject_jitter * rng.standard_normal(shared.shape)
        for w in range(cfg.windows_per_subject):
            periods = rng.uniform(cfg.min_period, max_period, size=cfg.K)
            phases = rng.uniform(0.0, 2 * np.pi, size=cfg.K)
            sources = np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None])
            values = loadings.T @ sources
            values = values + cfg.noise_std * rng.standard_normal(values.shape)
            out.append(Recording(values, coords, f"s{s:03d}", w))
    return out


def group_by_subject(recs: Iterable) -> dict[str, list]:
    groups: dict[str, list] = {}
    for rec in recs:
        groups.setdefault(rec.subject_id, []).append(rec)
    return groups
