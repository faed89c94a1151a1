"""Single-layer GRU that reshapes each spatially imputed voxel series over time.

The cell is the standard GRU, run over a scalar input sequence::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h  = (1 - z) * h + z * h~
    y  = w_o . h + b_o

Sequences are processed in batches: ``x`` is (N, T), hidden state is (N, H).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corruption import RemovalSpec, corrupt
from .data import DistanceMatrix, Recording, as_rng
from .errors import FormatError, TrainingError, ValidationError
from .fileio import Reader, check_dims
from .optim import AdamState, RegConfig, adam_step, l1_grad, sample_dropout_mask
from .phi import PhiTrainConfig, SpatialLayer, masked_mae, train_spatial

GATES = ("z", "r", "h")
WEIGHT_BLOCKS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "w_o")
BIAS_BLOCKS = ("b_z", "b_r", "b_h", "b_o")
# on-disk and field order
BLOCK_ORDER = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h", "w_o", "b_o")


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _orthogonal(H, rng):
    q, r = np.linalg.qr(rng.standard_normal((H, H)))
    return q * np.sign(np.diag(r))


class GruDenoiser:
    def __init__(self, params: dict[str, np.ndarray], reg: RegConfig = RegConfig()):
        H = params["U_z"].shape[0]
        self.H = H
        self.reg = reg
        self.params = {}
        for name in BLOCK_ORDER:
            if name in BIAS_BLOCKS and not reg.use_bias:
                continue
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != self._shape(name):
                raise ValidationError(f"{name} has shape {arr.shape}, expected {self._shape(name)}")
            self.params[name] = arr

    def _shape(self, name):
        H = self.H
        if name.startswith("U_"):
            return (H, H)
        if name == "b_o":
            return ()
        return (H,)

    @classmethod
    def init(cls, H: int = 16, reg: RegConfig = RegConfig(), rng=None) -> "GruDenoiser":
        """Glorot-uniform input/readout weights, orthogonal recurrent weights, zero biases."""
        rng = as_rng(rng)
        lim_in = np.sqrt(6.0 / (1 + H))
        p = {}
        for g in GATES:
            p[f"W_{g}"] = rng.uniform(-lim_in, lim_in, size=H)
        for g in GATES:
            p[f"U_{g}"] = _orthogonal(H, rng)
        for g in GATES:
            p[f"b_{g}"] = np.zeros(H)
        p["w_o"] = rng.uniform(-lim_in, lim_in, size=H)
        p["b_o"] = np.array(0.0)
        return cls(p, reg)

    @classmethod
    def zeros(cls, H: int, reg: RegConfig = RegConfig()) -> "GruDenoiser":
        p = {}
        for g in GATES:
            p[f"W_{g}"] = np.zeros(H)
            p[f"U_{g}"] = np.zeros((H, H))
            p[f"b_{g}"] = np.zeros(H)
        p["w_o"] = np.zeros(H)
        p["b_o"] = np.array(0.0)
        return cls(p, reg)

    def _get(self, name):
        if name in self.params:
            return self.params[name]
        return 0.0

    # ------------------------------------------------------------

    def forward(self, x, train: bool = False, rng=None) -> tuple[np.ndarray, dict]:
        """Run the GRU over ``x`` of shape (T,) or (N, T); returns outputs of the same shape."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        N, T = X.shape
        if T < 1:
            raise ValidationError("sequence must have at least one step")
        H = self.H
        m_in = sample_dropout_mask((N, 1), self.reg.dropout_p, rng, train)
        m_rec = sample_dropout_mask((N, H), self.reg.recurrent_dropout_p, rng, train)
        Xd = X * m_in
        W_z, W_r, W_h = self.params["W_z"], self.params["W_r"], self.params["W_h"]
        U_z, U_r, U_h = self.params["U_z"], self.params["U_r"], self.params["U_h"]
        b_z, b_r, b_h = self._get("b_z"), self._get("b_r"), self._get("b_h")
        w_o, b_o = self.params["w_o"], self._get("b_o")

        hs = np.zeros((T + 1, N, H))
        zs = np.empty((T, N, H))
        rs = np.empty((T, N, H))
        ns = np.empty((T, N, H))
        for t in range(T):
            h = hs[t]
            hd = h * m_rec
            xt = Xd[:, t:t + 1]
            z = _sigmoid(xt * W_z + hd @ U_z.T + b_z)
            r = _sigmoid(xt * W_r + hd @ U_r.T + b_r)
            n = np.tanh(xt * W_h + (r * hd) @ U_h.T + b_h)
            hs[t + 1] = (1.0 - z) * h + z * n
            zs[t], rs[t], ns[t] = z, r, n
        Y = hs[1:] @ w_o + b_o  # (T, N)
        Y = Y.T
        if not np.all(np.isfinite(Y)):
            raise TrainingError("non-finite GRU output")
        cache = dict(Xd=Xd, m_rec=m_rec, hs=hs, zs=zs, rs=rs, ns=ns, single=single)
        return (Y[0] if single else Y), cache

    def backward(self, cache: dict, dy) -> dict[str, np.ndarray]:
        """BPTT gradients of sum_t dy_t * y_t plus the L1 penalty on weight blocks."""
        dy = np.asarray(dy, dtype=np.float64)
        Dy = dy[None, :] if cache["single"] else dy
        Xd, m_rec, hs, zs, rs, ns = (cache[k] for k in ("Xd", "m_rec", "hs", "zs", "rs", "ns"))
        T, N, H = zs.shape
        if Dy.shape != (N, T):
            raise ValidationError(f"dy has shape {Dy.shape}, forward produced {(N, T)}")
        p = self.params
        g = {name: np.zeros_like(v) for name, v in p.items()}
        gb = {k: np.zeros(H) for k in ("b_z", "b_r", "b_h")}
        U_z, U_r, U_h, w_o = p["U_z"], p["U_r"], p["U_h"], p["w_o"]

        g["w_o"] += np.einsum("tnh,nt->h", hs[1:], Dy)
        gbo = Dy.sum()
        dh = np.zeros((N, H))
        for t in reversed(range(T)):
            dh = dh + Dy[:, t:t + 1] * w_o
            h_prev = hs[t]
            hd = h_prev * m_rec
            z, r, n = zs[t], rs[t], ns[t]
            xt = Xd[:, t:t + 1]
            dz = dh * (n - h_prev)
            dn = dh * z
            dh_prev = dh * (1.0 - z)

            da_h = dn * (1.0 - n * n)
            q = r * hd
            g["W_h"] += (da_h * xt).sum(axis=0)
            g["U_h"] += da_h.T @ q
            gb["b_h"] += da_h.sum(axis=0)
            dq = da_h @ U_h
            dhd = dq * r
            dr = dq * hd

            da_r = dr * r * (1.0 - r)
            g["W_r"] += (da_r * xt).sum(axis=0)
            g["U_r"] += da_r.T @ hd
            gb["b_r"] += da_r.sum(axis=0)
            dhd += da_r @ U_r

            da_z = dz * z * (1.0 - z)
            g["W_z"] += (da_z * xt).sum(axis=0)
            g["U_z"] += da_z.T @ hd
            gb["b_z"] += da_z.sum(axis=0)
            dhd += da_z @ U_z

            dh = dh_prev + dhd * m_rec

        if self.reg.use_bias:
            for k in ("b_z", "b_r", "b_h"):
                g[k] = gb[k]
            g["b_o"] = np.array(gbo)
        if self.reg.l1 > 0:
            for name in WEIGHT_BLOCKS:
                g[name] += l1_grad(p[name], self.reg.l1)
        return g

    def l1_penalty(self) -> float:
        if self.reg.l1 == 0:
            return 0.0
        return self.reg.l1 * float(sum(np.abs(self.params[n]).sum() for n in WEIGHT_BLOCKS))

    def predict(self, x) -> np.ndarray:
        y, _ = self.forward(x, train=False)
        return y

    # ------------------------------------------------------------

    def save(self, path) -> None:
        flags = 1 if self.reg.use_bias else 0
        with open(path, "wb") as fh:
            fh.write(b"GRUD" + struct.pack("<HIB", 1, self.H, flags))
            for name in BLOCK_ORDER:
                if name in self.params:
                    fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, reg: RegConfig | None = None) -> "GruDenoiser":
        r = Reader(Path(path).read_bytes())
        magic = r.take(4, "magic")
        if magic != b"GRUD":
            raise FormatError(f"bad magic {magic!r}, expected b'GRUD'", 0)
        version, H, flags = r.unpack(struct.Struct("<HIB"), "header")
        if version != 1:
            raise FormatError(f"unsupported version {version}", 4)
        if H < 1:
            raise FormatError("hidden size must be positive", 6)
        check_dims(6, H, H)
        use_bias = bool(flags & 1)
        reg = RegConfig(use_bias=use_bias) if reg is None else RegConfig(
            reg.l1, reg.dropout_p, reg.recurrent_dropout_p, use_bias)
        shapes = {"U": (H, H), "b_o": ()}
        params = {}
        for name in BLOCK_ORDER:
            if name in BIAS_BLOCKS and not use_bias:
                continue
            shape = shapes.get(name, shapes.get(name[0], (H,)))
            params[name] = r.array("<f8", shape, name)
        r.finish()
        return cls(params, reg)


def gru_forward(model: GruDenoiser, x, train_mode: bool = False, rng=None):
    return model.forward(x, train_mode, rng)


def gru_backward(model: GruDenoiser, cache, dy):
    return model.backward(cache, dy)


def denoise_recording(model: GruDenoiser, imputed: np.ndarray, mask) -> np.ndarray:
    """Replace every missing voxel's series with the GRU output; observed rows are untouched."""
    imputed = np.asarray(imputed, dtype=np.float64)
    mask = np.asarray(mask)
    missing = (mask[:, 0] if mask.ndim == 2 else mask).astype(bool)
    out = imputed.copy()
    if missing.any():
        out[missing] = model.predict(imputed[missing])
    return out


# ------------------------------------------------------------
# Training
# ------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserTrainConfig:
    lr: float = 5e-3
    epochs_per_alternation: int = 5
    alternations: int = 10
    # recordings per Adam step
    batch_size: int = 4

    def __post_init__(self):
        if not 0.0 <= self.lr <= 1e-2:
            raise ValidationError(f"lr must be in [0, 1e-2], got {self.lr}")
        if self.epochs_per_alternation < 1 or self.alternations < 1 or self.batch_size < 1:
            raise ValidationError("epoch counts and batch size must be positive")


def denoiser_pairs(spatial: SpatialLayer, recs: Sequence[Recording], spec: RemovalSpec, C,
                   d: DistanceMatrix | None, rng) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``recs`` afresh, impute spatially, and stack (imputed, truth) missing series."""
    xs, ys = [], []
    for rec in recs:
        masked = corrupt(rec, spec, d, rng)
        miss = masked.missing_voxels
        if not miss.any():
            continue
        out = spatial.impute(masked, C)
        xs.append(out[miss])
        ys.append(masked.truth[miss])
    if not xs:
        return np.zeros((0, recs[0].T)), np.zeros((0, recs[0].T))
    return np.concatenate(xs), np.concatenate(ys)


def train_denoiser(model: GruDenoiser, spatial: SpatialLayer, train: Sequence[Recording],
                   spec: RemovalSpec, epochs: int, batch_size: int, C, adam: AdamState,
                   d: DistanceMatrix | None = None, rng=None) -> list[float]:
    """Fit the GRU on (spatially imputed missing series -> true series) with MAE + L1."""
    rng = as_rng(spec.seed if rng is None else rng)
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(perm), batch_size):
            batch = [train[i] for i in perm[start:start + batch_size]]
            X, Y = denoiser_pairs(spatial, batch, spec, C, d, rng)
            if len(X) == 0:
                continue
            pred, cache = model.forward(X, train=True, rng=rng)
            every = np.ones(len(X), dtype=bool)
            loss, g = masked_mae(pred, Y, every)
            loss += model.l1_penalty()
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite denoiser loss ({loss})")
            adam_step(model.params, model.backward(cache, g), adam)
            losses.append(loss)
        trace.append(float(np.mean(losses)) if losses else 0.0)
    return trace


@dataclass
class AlternatingResult:
    spatial_trace: list
    denoiser_trace: list


def train_alternating(spatial: SpatialLayer, denoiser: GruDenoiser, train: Sequence[Recording],
                      spec: RemovalSpec, spatial_cfg: PhiTrainConfig, d_cfg: DenoiserTrainConfig,
                      C, d: DistanceMatrix | None = None, rng=None) -> AlternatingResult:
    """Interleave spatial-layer epochs with denoiser epochs for ``d_cfg.alternations`` rounds.

    The spatial layer is frozen while the denoiser trains; every epoch draws new masks.
    The two optimizers keep their moment estimates across rounds.
    """
    rng = as_rng(spec.seed if rng is None else rng)
    # independent streams so the spatial layer sees the same masks with or without a denoiser
    spatial_rng, denoise_rng = rng.spawn(2)
    adam_s = AdamState(lr=spatial_cfg.lr)
    adam_d = AdamState(lr=d_cfg.lr)
    s_trace, d_trace = [], []
    for _ in range(d_cfg.alternations):
        s_trace += train_spatial(spatial, train, spec, spatial_cfg.epochs_per_alternation,
                                 C, adam_s, d, spatial_rng)
        d_trace += train_denoiser(denoiser, spatial, train, spec, d_cfg.epochs_per_alternation,
                                  d_cfg.batch_size, C, adam_d, d, denoise_rng)
    return AlternatingResult(s_trace, d_trace)
