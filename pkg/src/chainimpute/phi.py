"""Spatial imputation layers.

``PhiLayer`` fills missing voxels one at a time, most-correlated first, and each
estimate feeds the ones that follow. ``DropoutLayer`` shares the weight shape but
predicts every missing voxel in a single shot from the observed ones only.

Both layers hold a V x V weight matrix ``W`` whose column c predicts voxel c, and a
bias vector ``b``. The diagonal of ``W`` is kept at exactly zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corruption import RemovalSpec, corrupt
from .data import CorrelationMatrix, DistanceMatrix, MaskedRecording, Recording, as_rng
from .errors import FormatError, TrainingError, ValidationError
from .fileio import Reader, check_dims
from .optim import AdamState, adam_step


def priority_next(C, mask_row, filled) -> int:
    """Missing, unfilled voxel with the largest |correlation| to any observed-or-filled voxel.

    Ties go to the lowest index.
    """
    C = C.entries if isinstance(C, CorrelationMatrix) else np.asarray(C)
    missing = np.asarray(mask_row).astype(bool)
    filled = np.asarray(filled).astype(bool)
    candidates = missing & ~filled
    known = ~missing | filled
    if not candidates.any():
        raise ValidationError("no missing voxel left to fill")
    if not known.any():
        raise ValidationError("no observed or filled voxel to rank against")
    score = np.abs(C[:, known]).max(axis=1)
    score = np.where(candidates, score, -np.inf)
    return int(np.argmax(score))


def fill_order(C, missing) -> list[int]:
    """Full fill sequence for a boolean ``missing`` vector (incremental ``priority_next``)."""
    C = C.entries if isinstance(C, CorrelationMatrix) else np.asarray(C)
    missing = np.asarray(missing).astype(bool)
    if missing.all():
        raise ValidationError("all voxels are missing")
    absC = np.abs(C)
    score = absC[:, ~missing].max(axis=1)
    pending = missing.copy()
    order = []
    for _ in range(int(missing.sum())):
        c = int(np.argmax(np.where(pending, score, -np.inf)))
        order.append(c)
        pending[c] = False
        np.maximum(score, absC[:, c], out=score)
    return order


class SpatialLayer:
    """Shared state and persistence for the two spatial layers."""

    magic = b"PHIW"
    version = 1

    def __init__(self, W: np.ndarray, b: np.ndarray):
        W = np.array(W, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or b.shape != (W.shape[0],):
            raise ValidationError(f"W must be V x V and b length V, got {W.shape} and {b.shape}")
        np.fill_diagonal(W, 0.0)
        self.params = {"W": W, "b": b}

    @property
    def W(self) -> np.ndarray:
        return self.params["W"]

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]

    @property
    def V(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, V: int, rng) -> "SpatialLayer":
        rng = as_rng(rng)
        lim = 1.0 / np.sqrt(V)
        return cls(rng.uniform(-lim, lim, size=(V, V)), np.zeros(V))

    def zero_diagonal(self) -> None:
        np.fill_diagonal(self.params["W"], 0.0)

    # forward/backward on a (V, T) matrix with a boolean missing vector
    def forward(self, values: np.ndarray, missing: np.ndarray, C) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def impute(self, rec: MaskedRecording, C) -> np.ndarray:
        """V x T complete matrix; observed entries are copied bit-for-bit."""
        if rec.V != self.V:
            raise ValidationError(f"layer has {self.V} voxels, recording has {rec.V}")
        out, _ = self.forward(rec.values, rec.missing_voxels, C)
        return out

    def save(self, path) -> None:
        V = self.V
        with open(path, "wb") as fh:
            fh.write(self.magic + struct.pack("<HI", self.version, V))
            fh.write(np.ascontiguousarray(self.W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.b, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SpatialLayer":
        r = Reader(Path(path).read_bytes())
        magic = r.take(4, "magic")
        if magic != cls.magic:
            raise FormatError(f"bad magic {magic!r}, expected {cls.magic!r}", 0)
        version, V = r.unpack(struct.Struct("<HI"), "header")
        if version != cls.version:
            raise FormatError(f"unsupported version {version}", 4)
        check_dims(6, V, V)
        W = r.array("<f8", (V, V), "W")
        b = r.array("<f8", (V,), "b")
        r.finish()
        if np.any(np.diag(W) != 0):
            raise FormatError("weight matrix has a nonzero diagonal", 10)
        return cls(W, b)


@dataclass
class _ChainCache:
    x: np.ndarray          # (V, T) final state, observed + filled values
    observed: np.ndarray   # (V,) bool
    order: list


class PhiLayer(SpatialLayer):
    """Chained imputation: each fill uses observed values and every earlier fill."""

    def forward(self, values, missing, C):
        missing = np.asarray(missing, dtype=bool)
        out = np.array(values, dtype=np.float64, copy=True)
        if not missing.any():
            return out, _ChainCache(out, ~missing, [])
        order = fill_order(C, missing)
        x = np.where(missing[:, None], 0.0, out)
        W, b = self.W, self.b
        for c in order:
            x[c] = W[:, c] @ x + b[c]
        out[missing] = x[missing]
        return out, _ChainCache(x, ~missing, order)

    def backward(self, cache: _ChainCache, grad_out):
        """Reverse-mode through the fill sequence; ``grad_out`` is dL/d(output), (V, T)."""
        W = self.W
        dW = np.zeros_like(W)
        db = np.zeros_like(self.b)
        g = np.array(grad_out, dtype=np.float64, copy=True)
        x = cache.x
        known = cache.observed.copy()
        # known-set before each fill, walking forward
        known_before = []
        for c in cache.order:
            known_before.append(known.copy())
            known[c] = True
        for c, kb in zip(reversed(cache.order), reversed(known_before)):
            gc = g[c]
            idx = np.flatnonzero(kb)
            dW[idx, c] += x[idx] @ gc
            db[c] += gc.sum()
            # only earlier fills depend on parameters; observed rows are constants
            g[idx] += np.outer(W[idx, c], gc)
        np.fill_diagonal(dW, 0.0)
        return {"W": dW, "b": db}


@dataclass
class _ShotCache:
    x0: np.ndarray
    missing: np.ndarray


class DropoutLayer(SpatialLayer):
    """One-shot imputation: missing inputs are zeroed, so their weights drop out."""

    def forward(self, values, missing, C=None):
        missing = np.asarray(missing, dtype=bool)
        out = np.array(values, dtype=np.float64, copy=True)
        x0 = np.where(missing[:, None], 0.0, out)
        if missing.any():
            idx = np.flatnonzero(missing)
            out[idx] = self.W[:, idx].T @ x0 + self.b[idx, None]
        return out, _ShotCache(x0, missing)

    def backward(self, cache: _ShotCache, grad_out):
        dW = np.zeros_like(self.W)
        db = np.zeros_like(self.b)
        idx = np.flatnonzero(cache.missing)
        g = np.asarray(grad_out)[idx]
        dW[:, idx] = cache.x0 @ g.T
        db[idx] = g.sum(axis=1)
        np.fill_diagonal(dW, 0.0)
        return {"W": dW, "b": db}


def impute_volume(layer: SpatialLayer, psi_t, mask_t, C) -> np.ndarray:
    """Impute a single volume (length-V vector with NaN at missing voxels)."""
    psi_t = np.asarray(psi_t, dtype=np.float64)
    missing = np.asarray(mask_t).astype(bool)
    if missing.all():
        raise ValidationError("all voxels are missing")
    out, _ = layer.forward(psi_t[:, None], missing, C)
    return out[:, 0]


def impute_recording(layer: SpatialLayer, rec: MaskedRecording, C) -> np.ndarray:
    return layer.impute(rec, C)


# ------------------------------------------------------------
# Training
# ------------------------------------------------------------

@dataclass(frozen=True)
class PhiTrainConfig:
    lr: float = 5e-3
    epochs_per_alternation: int = 5

    def __post_init__(self):
        if not 0.0 <= self.lr <= 1e-2:
            raise ValidationError(f"lr must be in [0, 1e-2], got {self.lr}")
        if self.epochs_per_alternation < 1:
            raise ValidationError("epochs_per_alternation must be >= 1")


def masked_mae(pred: np.ndarray, truth: np.ndarray, missing: np.ndarray) -> tuple[float, np.ndarray]:
    """MAE over missing rows and its gradient w.r.t. ``pred``."""
    idx = np.flatnonzero(missing)
    diff = pred[idx] - truth[idx]
    n = diff.size
    grad = np.zeros_like(pred)
    grad[idx] = np.sign(diff) / n
    return float(np.abs(diff).mean()), grad


def spatial_step(layer: SpatialLayer, masked: MaskedRecording, C, adam: AdamState) -> float:
    out, cache = layer.forward(masked.values, masked.missing_voxels, C)
    loss, g = masked_mae(out, masked.truth, masked.missing_voxels)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss ({loss}) on recording "
                            f"{masked.subject_id}/{masked.window_id}")
    grads = layer.backward(cache, g)
    adam_step(layer.params, grads, adam)
    layer.zero_diagonal()
    return loss


def train_spatial(layer: SpatialLayer, train: Sequence[Recording], spec: RemovalSpec,
                  epochs: int, C, adam: AdamState, d: DistanceMatrix | None = None,
                  rng=None) -> list[float]:
    """Train for ``epochs`` passes; every recording is freshly corrupted on every pass.

    Returns the mean training loss of each epoch.
    """
    rng = as_rng(spec.seed if rng is None else rng)
    trace = []
    for _ in range(epochs):
        losses = []
        for i in rng.permutation(len(train)):
            masked = corrupt(train[i], spec, d, rng)
            if not masked.missing_voxels.any():
                continue
            losses.append(spatial_step(layer, masked, C, adam))
        trace.append(float(np.mean(losses)) if losses else 0.0)
    return trace


def train_phi(layer: PhiLayer, train, spec, cfg: PhiTrainConfig, C, adam: AdamState | None = None,
              d=None, rng=None, epochs: int | None = None) -> list[float]:
    adam = AdamState(lr=cfg.lr) if adam is None else adam
    n = cfg.epochs_per_alternation if epochs is None else epochs
    return train_spatial(layer, train, spec, n, C, adam, d, rng)


def train_dropout(layer: DropoutLayer, train, spec, cfg: PhiTrainConfig, C=None,
                  adam: AdamState | None = None, d=None, rng=None,
                  epochs: int | None = None) -> list[float]:
    adam = AdamState(lr=cfg.lr) if adam is None else adam
    n = cfg.epochs_per_alternation if epochs is None else epochs
    return train_spatial(layer, train, spec, n, C, adam, d, rng)


def dropout_impute(layer: DropoutLayer, rec: MaskedRecording) -> np.ndarray:
    return layer.impute(rec, None)
