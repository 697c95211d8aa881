"""Per-layer neuron-activation predictor.

A learned query attends over the block's (normalized) FFN inputs, pooling
them into one summary vector; a small two-layer ReLU net maps the summary to
one logit per FFN neuron. Ranking those logits and keeping the top K gives
the block's expert mask without touching the FFN weights.

Inference (`predictor_forward`) runs on the counted float32 kernels. Loss
and gradient routines compute in float64 internally: parameters are stored
float32, but an f32 forward makes finite-difference gradient verification
meaningless, so the training path upcasts first.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError
from .model import ModelConfig

F32 = np.float32

# per-tranche positive weights, strongest activations first
TRANCHE_WEIGHTS = (32.0, 16.0, 8.0, 4.0, 2.0)
SIGMOID_CLAMP = 1e-7


def default_reduced_dim(d_model: int) -> int:
    """Hidden width: d_model/16 rounded up to a power of two (at least 1)."""
    target = d_model / 16
    r = 1
    while r < target:
        r <<= 1
    return r


@dataclass
class PredictorParams:
    query: np.ndarray   # (1, d_model) pooling query
    w1: np.ndarray      # (d_model, r)
    w2: np.ndarray      # (r, d_ffn)

    @property
    def r(self) -> int:
        return self.w1.shape[1]

    def validate(self, cfg: ModelConfig) -> None:
        d, f = cfg.d_model, cfg.d_ffn
        if self.query.shape != (1, d):
            raise ValidationError(f"predictor query shape {self.query.shape}")
        if self.w1.shape[0] != d or self.w2.shape != (self.w1.shape[1], f):
            raise ValidationError(
                f"predictor shapes inconsistent: w1 {self.w1.shape}, w2 {self.w2.shape}"
            )


def init_predictor(cfg: ModelConfig, rng: np.random.Generator,
                   r: int | None = None, scale: float = 0.02) -> PredictorParams:
    r = default_reduced_dim(cfg.d_model) if r is None else r
    return PredictorParams(
        query=(rng.standard_normal((1, cfg.d_model)) * scale).astype(F32),
        w1=(rng.standard_normal((cfg.d_model, r)) * scale).astype(F32),
        w2=(rng.standard_normal((r, cfg.d_ffn)) * scale).astype(F32),
    )


def predictor_forward(params: PredictorParams, x: np.ndarray) -> np.ndarray:
    """Neuron scores (d_ffn,) for one block of FFN inputs x (n, d_model).

    Pooling is non-causal: the whole block is visible when its mask is chosen.
    """
    d = params.query.shape[1]
    if x.ndim != 2 or x.shape[1] != d:
        raise ValidationError(f"predictor input shape {x.shape}, d_model={d}")
    logits = kernels.matmul(params.query, x.T) / np.float32(np.sqrt(d))
    weights = kernels.softmax_rows(logits)
    pooled = kernels.matmul(weights, x)
    hidden = kernels.relu(kernels.matmul(pooled, params.w1))
    scores = kernels.matmul(hidden, params.w2)
    return scores[0]


def generate_labels(hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels and loss weights for one block's gated activations (n, d_ffn).

    Neurons are ranked by the L2 norm of their activation column; the top
    half (ceil(d_ffn/2)) are positives. Positives are split into five
    magnitude tranches (boundaries at ceil(t*n_pos/5)) weighted 32, 16, 8,
    4, 2 from strongest to weakest; negatives weigh 1.
    """
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 2:
        raise ValidationError(f"hidden must be 2-D, got {h.shape}")
    d_ffn = h.shape[1]
    norms = np.sqrt((h * h).sum(axis=0))
    order = np.argsort(-norms.astype(np.float32), kind="stable")
    n_pos = -(-d_ffn // 2)

    y = np.zeros(d_ffn, dtype=np.uint8)
    w = np.ones(d_ffn, dtype=F32)
    y[order[:n_pos]] = 1
    for t, weight in enumerate(TRANCHE_WEIGHTS):
        lo = -(-n_pos * t // 5)
        hi = -(-n_pos * (t + 1) // 5)
        w[order[lo:hi]] = weight
    return y, w


def weighted_bce_loss(scores, y, w) -> tuple[float, np.ndarray]:
    """Weighted binary cross-entropy over neuron logits; float64 throughout.

    Returns (loss, dloss/dscores). Probabilities are clamped away from 0/1
    inside the logs; the gradient uses the unclamped sigmoid w*(sigma-y).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (s.shape == y.shape == w.shape):
        raise ValidationError(
            f"scores/labels/weights shapes differ: {s.shape} {y.shape} {w.shape}"
        )
    e = np.exp(-np.abs(s))
    sig = np.where(s >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    p = np.clip(sig, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    loss = -(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))).sum()
    grad = w * (sig - y)
    return float(loss), grad


def predictor_loss_and_grads(params: PredictorParams, x: np.ndarray,
                             y: np.ndarray, w: np.ndarray):
    """Loss and analytic parameter gradients for one labeled block.

    Float64 replica of the forward chain (pooling softmax included), then
    backprop by hand. Returns (loss, (d_query, d_w1, d_w2)).
    """
    q = params.query.astype(np.float64)
    w1 = params.w1.astype(np.float64)
    w2 = params.w2.astype(np.float64)
    xb = np.asarray(x, dtype=np.float64)
    d = q.shape[1]
    inv_sqrt_d = 1.0 / np.sqrt(d)

    z = (q @ xb.T) * inv_sqrt_d                   # (1, n)
    z_shift = z - z.max()
    e = np.exp(z_shift)
    p = e / e.sum()                               # (1, n)
    pooled = p @ xb                               # (1, d)
    u = pooled @ w1                               # (1, r)
    hid = np.maximum(u, 0.0)
    scores = (hid @ w2)[0]                        # (d_ffn,)

    loss, g_scores = weighted_bce_loss(scores, y, w)

    g_scores = g_scores[None, :]                  # (1, d_ffn)
    d_w2 = hid.T @ g_scores
    g_hid = g_scores @ w2.T
    g_u = g_hid * (u > 0.0)
    d_w1 = pooled.T @ g_u
    g_pooled = g_u @ w1.T                         # (1, d)
    g_p = g_pooled @ xb.T                         # (1, n)
    g_z = p * (g_p - (g_p * p).sum())             # softmax backprop
    d_query = (g_z @ xb) * inv_sqrt_d
    return loss, (d_query, d_w1, d_w2)


def mask_recall(pred_indices: np.ndarray, oracle_indices: np.ndarray) -> float:
    """|predicted ∩ oracle| / |oracle|."""
    inter = np.intersect1d(pred_indices, oracle_indices).size
    return inter / max(1, oracle_indices.size)
