"""Adam, L1 penalty, inverted dropout masks and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import TrainingError, ValidationError

Params = dict[str, np.ndarray]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


@dataclass(frozen=True)
class RegConfig:
    l1: float = 0.0
    dropout_p: float = 0.0
    recurrent_dropout_p: float = 0.0
    use_bias: bool = True

    def __post_init__(self):
        if self.l1 < 0:
            raise ValidationError("l1 must be nonnegative")
        for name in ("dropout_p", "recurrent_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 0.3:
                raise ValidationError(f"{name} must be in [0, 0.3], got {p}")


def adam_step(params: Params, grads: Params, state: AdamState) -> None:
    """One in-place Adam update of every block in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def l1_grad(param: np.ndarray, l1: float) -> np.ndarray:
    """Subgradient of ``l1 * sum(|param|)`` with sign(0) = 0."""
    if l1 < 0:
        raise ValidationError("l1 must be nonnegative")
    return l1 * np.sign(param)


def sample_dropout_mask(shape, p: float, rng: np.random.Generator | None = None,
                        train: bool = True) -> np.ndarray:
    """Inverted dropout: zeros with probability p, else 1/(1-p). Identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return np.ones(shape)
    if rng is None:
        raise ValidationError("training-mode dropout needs an rng")
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def numeric_gradient(f: Callable[[], float], param: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        idx = it.multi_index
        old = param[idx]
        param[idx] = old + eps
        fp = f()
        param[idx] = old - eps
        fm = f()
        param[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Block-wise ||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(f: Callable[[], float], params: Params, grads: Params,
                    eps: float = 1e-6, skip: Callable[[str], bool] | None = None) -> dict[str, float]:
    """Relative error of analytic ``grads`` against central differences of ``f`` per block."""
    out = {}
    for name, p in params.items():
        if skip is not None and skip(name):
            continue
        out[name] = relative_error(grads[name], numeric_gradient(f, p, eps))
    return out
