"""Low-rank error compensator for sparsified FFN blocks.

A two-layer bottleneck (d_model -> d_model/8 -> d_model, SiLU inside) adds a
learned correction to the sparse FFN output, distilled against the dense
output with a squared-error objective. Inference runs on the counted float32
kernels; loss/gradients compute in float64 (see predictor module for why).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError
from .model import ModelConfig

F32 = np.float32


def default_comp_dim(d_model: int) -> int:
    """Bottleneck width: d_model/8, floored, at least 1."""
    return max(1, d_model // 8)


@dataclass
class CompensatorParams:
    w1: np.ndarray   # (d_model, r_comp)
    w2: np.ndarray   # (r_comp, d_model)

    @property
    def r(self) -> int:
        return self.w1.shape[1]

    def validate(self, cfg: ModelConfig) -> None:
        d = cfg.d_model
        if self.w1.shape[0] != d or self.w2.shape != (self.w1.shape[1], d):
            raise ValidationError(
                f"compensator shapes inconsistent: w1 {self.w1.shape}, w2 {self.w2.shape}"
            )


def init_compensator(cfg: ModelConfig, rng: np.random.Generator,
                     r: int | None = None, scale: float = 0.02) -> CompensatorParams:
    # zeros would be a saddle (every gradient vanishes), so init small random
    r = default_comp_dim(cfg.d_model) if r is None else r
    return CompensatorParams(
        w1=(rng.standard_normal((cfg.d_model, r)) * scale).astype(F32),
        w2=(rng.standard_normal((r, cfg.d_model)) * scale).astype(F32),
    )


def compensator_forward(params: CompensatorParams, x: np.ndarray) -> np.ndarray:
    """Correction term (n, d_model) for a block of FFN inputs (n, d_model)."""
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ValidationError(
            f"compensator input shape {x.shape}, d_model={params.w1.shape[0]}"
        )
    return kernels.matmul(kernels.silu(kernels.matmul(x, params.w1)), params.w2)


def apply_compensation(y_sparse: np.ndarray, correction: np.ndarray) -> np.ndarray:
    if y_sparse.shape != correction.shape:
        raise ValidationError(
            f"compensation shape mismatch: {y_sparse.shape} vs {correction.shape}"
        )
    return y_sparse + correction


def _silu64(u):
    e = np.exp(-np.abs(u))
    sig = np.where(u >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return u * sig, sig


def mse_distill_loss(params: CompensatorParams, x: np.ndarray,
                     y_dense: np.ndarray, y_sparse: np.ndarray):
    """Squared error of the compensated sparse output against the dense one.

    Loss is the sum of squared entries over the block (callers average over
    blocks). Returns (loss, (d_w1, d_w2)); everything float64 internally.
    """
    if not (y_dense.shape == y_sparse.shape == x.shape):
        raise ValidationError(
            f"distill shapes differ: x {x.shape}, dense {y_dense.shape}, "
            f"sparse {y_sparse.shape}"
        )
    w1 = params.w1.astype(np.float64)
    w2 = params.w2.astype(np.float64)
    xb = np.asarray(x, dtype=np.float64)
    yd = np.asarray(y_dense, dtype=np.float64)
    ys = np.asarray(y_sparse, dtype=np.float64)

    u = xb @ w1
    s, sig = _silu64(u)
    corr = s @ w2
    err = yd - (ys + corr)
    loss = float((err * err).sum())

    g_corr = -2.0 * err
    d_w2 = s.T @ g_corr
    g_s = g_corr @ w2.T
    g_u = g_s * (sig * (1.0 + u * (1.0 - sig)))   # d silu / du
    d_w1 = xb.T @ g_u
    return loss, (d_w1, d_w2)
