"""Model registry: fit any imputer by name and apply it to masked recordings.

All fitting and imputation happens in normalized (z-scored) space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines
from .corruption import RemovalSpec
from .data import (CorrelationMatrix, DistanceMatrix, MaskedRecording, NormStats, Recording,
                   as_rng)
from .denoiser import DenoiserTrainConfig, GruDenoiser, denoise_recording, train_alternating
from .errors import ValidationError
from .optim import AdamState, RegConfig
from .phi import DropoutLayer, PhiLayer, PhiTrainConfig, SpatialLayer, train_spatial

MODELS = ("knn", "barycenter", "mice", "mean", "dropout", "dropout+d", "phi", "phi+d")
LEARNED = ("dropout", "dropout+d", "phi", "phi+d")


@dataclass(frozen=True)
class HyperParams:
    lr_phi: float = 5e-3
    lr_d: float = 5e-3
    epochs_phi: int = 5
    epochs_d: int = 5
    alternations: int = 4
    l1_d: float = 1e-5
    use_bias_d: bool = True
    dropout_d: float = 0.0
    rec_dropout_d: float = 0.0
    hidden_d: int = 16

    def __post_init__(self):
        for name in ("lr_phi", "lr_d"):
            if not 1e-5 <= getattr(self, name) <= 1e-2:
                raise ValidationError(f"{name} must be in [1e-5, 1e-2]")
        for name in ("epochs_phi", "epochs_d"):
            if getattr(self, name) not in (2, 3, 4, 5):
                raise ValidationError(f"{name} must be one of 2, 3, 4, 5")
        if self.alternations not in (2, 4, 8, 10):
            raise ValidationError("alternations must be one of 2, 4, 8, 10")
        if not 1e-5 <= self.l1_d <= 3:
            raise ValidationError("l1_d must be in [1e-5, 3]")
        for name in ("dropout_d", "rec_dropout_d"):
            if not 0 <= getattr(self, name) <= 0.3:
                raise ValidationError(f"{name} must be in [0, 0.3]")
        if self.hidden_d not in (8, 16, 32):
            raise ValidationError("hidden_d must be one of 8, 16, 32")
        object.__setattr__(self, "use_bias_d", bool(self.use_bias_d))

    @classmethod
    def sample(cls, rng) -> "HyperParams":
        """Log-uniform learning rates, uniform everything else."""
        rng = as_rng(rng)

        def loguniform(lo, hi):
            return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

        return cls(
            lr_phi=loguniform(1e-5, 1e-2),
            lr_d=loguniform(1e-5, 1e-2),
            epochs_phi=int(rng.choice([2, 3, 4, 5])),
            epochs_d=int(rng.choice([2, 3, 4, 5])),
            alternations=int(rng.choice([2, 4, 8, 10])),
            l1_d=loguniform(1e-5, 3.0),
            use_bias_d=bool(rng.integers(2)),
            dropout_d=float(rng.uniform(0, 0.3)),
            rec_dropout_d=float(rng.uniform(0, 0.3)),
            hidden_d=int(rng.choice([8, 16, 32])),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls, k)
            if isinstance(default, bool):
                kw[k] = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes")
            else:
                kw[k] = type(default)(v)
        return cls(**kw)

    def reg(self) -> RegConfig:
        return RegConfig(self.l1_d, self.dropout_d, self.rec_dropout_d, self.use_bias_d)


@dataclass
class FitContext:
    """Everything a model may need, fit on training subjects only."""

    train: Sequence[Recording]       # normalized
    stats: NormStats
    C: CorrelationMatrix
    d: DistanceMatrix
    spec: RemovalSpec
    params: HyperParams = HyperParams()
    d_batch_size: int = 4
    dba_iters: int = 10


class Imputer:
    name = ""

    def impute(self, rec: MaskedRecording) -> np.ndarray:
        raise NotImplementedError


class KnnImputer(Imputer):
    name = "knn"

    def __init__(self, d: DistanceMatrix, k: int = 3):
        self.d, self.k = d, k

    def impute(self, rec):
        return baselines.knn_impute(rec, self.d, self.k)


class BarycenterImputer(Imputer):
    name = "barycenter"

    def __init__(self, iters: int = 10):
        self.iters = iters

    def impute(self, rec):
        return baselines.barycenter_impute(rec, self.iters)


class MiceImputer(Imputer):
    name = "mice"

    def __init__(self, model: baselines.MiceModel):
        self.model = model

    def impute(self, rec):
        return baselines.mice_impute(self.model, rec)


class MeanImputer(Imputer):
    name = "mean"

    def __init__(self, means: np.ndarray, d: DistanceMatrix):
        self.means, self.d = means, d

    def impute(self, rec):
        return baselines.mean_impute(self.means, rec, self.d)


class SpatialImputer(Imputer):
    def __init__(self, layer: SpatialLayer, C: CorrelationMatrix, denoiser: GruDenoiser | None = None):
        self.layer, self.C, self.denoiser = layer, C, denoiser
        kind = "phi" if isinstance(layer, PhiLayer) else "dropout"
        self.name = kind + ("+d" if denoiser is not None else "")

    def impute(self, rec):
        out = self.layer.impute(rec, self.C)
        if self.denoiser is not None:
            out = denoise_recording(self.denoiser, out, rec.mask)
        return out


def fit_models(names: Sequence[str], ctx: FitContext, seed) -> dict[str, Imputer]:
    """Fit every requested model.

    Learned models sharing a spatial layer ("phi" and "phi+d") are trained once:
    the spatial layer never sees the denoiser, so the alternating run's layer is the
    layer-only model.
    """
    for n in names:
        if n not in MODELS:
            raise ValidationError(f"unknown model {n!r}; expected one of {MODELS}")
    out: dict[str, Imputer] = {}
    train_means = np.concatenate([r.values for r in ctx.train], axis=1).mean(axis=1)
    for n in names:
        if n == "knn":
            out[n] = KnnImputer(ctx.d)
        elif n == "barycenter":
            out[n] = BarycenterImputer(ctx.dba_iters)
        elif n == "mice":
            out[n] = MiceImputer(baselines.mice_fit(ctx.train))
        elif n == "mean":
            out[n] = MeanImputer(train_means, ctx.d)
    for kind, cls in (("phi", PhiLayer), ("dropout", DropoutLayer)):
        wanted = [n for n in names if n.split("+")[0] == kind]
        if not wanted:
            continue
        layer, gru = train_learned(cls, kind + "+d" in wanted, ctx, seed)
        if kind in wanted:
            out[kind] = SpatialImputer(layer, ctx.C)
        if kind + "+d" in wanted:
            out[kind + "+d"] = SpatialImputer(layer, ctx.C, gru)
    return {n: out[n] for n in names}


def train_learned(cls, with_denoiser: bool, ctx: FitContext, seed):
    hp = ctx.params
    V = ctx.train[0].V
    init_rng, train_rng = np.random.default_rng(seed).spawn(2)
    layer_rng, gru_rng = init_rng.spawn(2)
    layer = cls.init(V, layer_rng)
    spatial_cfg = PhiTrainConfig(hp.lr_phi, hp.epochs_phi)
    if not with_denoiser:
        # same stream train_alternating hands to its spatial phase
        spatial_rng, _ = train_rng.spawn(2)
        train_spatial(layer, ctx.train, ctx.spec, hp.epochs_phi * hp.alternations, ctx.C,
                      AdamState(lr=hp.lr_phi), ctx.d, spatial_rng)
        return layer, None
    gru = GruDenoiser.init(hp.hidden_d, hp.reg(), gru_rng)
    d_cfg = DenoiserTrainConfig(hp.lr_d, hp.epochs_d, hp.alternations, ctx.d_batch_size)
    train_alternating(layer, gru, ctx.train, ctx.spec, spatial_cfg, d_cfg, ctx.C, ctx.d, train_rng)
    return layer, gru


# ------------------------------------------------------------
# Persistence of fitted models (CLI)
# ------------------------------------------------------------

def save_fitted(imputer: Imputer, stats: NormStats, C: CorrelationMatrix, coords: np.ndarray,
                directory, params: HyperParams | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    extra = {}
    if isinstance(imputer, MiceImputer):
        extra = dict(mice_coef=imputer.model.coef, mice_intercept=imputer.model.intercept,
                     mice_means=imputer.model.means, mice_cycles=imputer.model.n_cycles)
    elif isinstance(imputer, MeanImputer):
        extra = dict(train_means=imputer.means)
    elif isinstance(imputer, SpatialImputer):
        imputer.layer.save(directory / "spatial.phiw")
        if imputer.denoiser is not None:
            imputer.denoiser.save(directory / "denoiser.grud")
    np.savez(directory / "fit.npz", norm_mean=stats.mean, norm_std=stats.std, corr=C.entries,
             coords=coords, subjects=np.array(sorted(stats.subjects)), **extra)
    meta = {"model": imputer.name}
    if params is not None:
        meta["params"] = asdict(params)
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_fitted(directory) -> tuple[Imputer, NormStats, CorrelationMatrix]:
    from .data import compute_distance_matrix

    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    name = meta["model"]
    with np.load(directory / "fit.npz") as z:
        subjects = frozenset(str(s) for s in z["subjects"])
        stats = NormStats(z["norm_mean"], z["norm_std"], subjects)
        C = CorrelationMatrix(z["corr"], subjects)
        d = compute_distance_matrix(z["coords"])
        arrays = {k: z[k] for k in z.files}
    if name == "knn":
        imp = KnnImputer(d)
    elif name == "barycenter":
        imp = BarycenterImputer()
    elif name == "mice":
        imp = MiceImputer(baselines.MiceModel(arrays["mice_coef"], arrays["mice_intercept"],
                                              arrays["mice_means"], int(arrays["mice_cycles"])))
    elif name == "mean":
        imp = MeanImputer(arrays["train_means"], d)
    else:
        kind = name.split("+")[0]
        cls = PhiLayer if kind == "phi" else DropoutLayer
        layer = cls.load(directory / "spatial.phiw")
        gru = GruDenoiser.load(directory / "denoiser.grud") if name.endswith("+d") else None
        imp = SpatialImputer(layer, C, gru)
    return imp, stats, C
