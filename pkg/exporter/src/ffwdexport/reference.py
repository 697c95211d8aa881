"""Reference forward pass used to validate exported checkpoints numerically.

This is an independent float64 implementation of the engine's fixed
architecture: pre-norm RMS decoder blocks, rotary position embeddings
applied to each head's half-split channels, SiLU-gated FFN, optional untied
output head, with activations as row vectors multiplying stored weights on
the right. The engine computes in float32 storage with float64 matmul
accumulation; last-position logits from the two implementations agreeing
within a small tolerance is the evidence that an export oriented and cast
every tensor correctly.
"""

import numpy as np

from .errors import ValidationError
from .namemap import LAYER_FIELDS

ROPE_BASE = 10000.0
RMS_EPS = 1e-6


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    return x * scale * gain


def rotate_positions(m: np.ndarray, positions: np.ndarray, n_heads: int) -> np.ndarray:
    """Rotary embedding: per head, (first-half, second-half) channel pairs
    rotate by an angle set by absolute position and channel frequency."""
    d_head = m.shape[1] // n_heads
    half = d_head // 2
    freqs = ROPE_BASE ** (-2.0 * np.arange(half) / d_head)
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = np.empty_like(m)
    for h in range(n_heads):
        lo = h * d_head
        x1 = m[:, lo:lo + half]
        x2 = m[:, lo + half:lo + d_head]
        out[:, lo:lo + half] = x1 * cos - x2 * sin
        out[:, lo + half:lo + d_head] = x1 * sin + x2 * cos
    return out


def _layer_tensors(tensors: dict, layer: int) -> dict[str, np.ndarray]:
    out = {}
    for field in LAYER_FIELDS:
        key = f"layers.{layer}.{field}"
        if key not in tensors:
            raise ValidationError(f"checkpoint tensors missing {key}")
        out[field] = tensors[key].astype(np.float64)
    return out


def _attention(x: np.ndarray, lt: dict, n_heads: int) -> np.ndarray:
    n = x.shape[0]
    positions = np.arange(n)
    q = rotate_positions(x @ lt["wq"], positions, n_heads)
    k = rotate_positions(x @ lt["wk"], positions, n_heads)
    v = x @ lt["wv"]
    d_head = x.shape[1] // n_heads
    causal = np.tril(np.ones((n, n), dtype=bool))
    out = np.empty_like(x)
    for h in range(n_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(d_head)
        scores = np.where(causal, scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, sl] = weights @ v[:, sl]
    return out @ lt["wo"]


def _gated_ffn(x: np.ndarray, lt: dict) -> np.ndarray:
    gate = x @ lt["w_gate"]
    hidden = gate / (1.0 + np.exp(-gate)) * (x @ lt["w_up"])
    return hidden @ lt["w_down"]


def reference_last_logits(config: dict, tensors: dict, token_ids) -> np.ndarray:
    """Logits for the final position of one token sequence, float64."""
    ids = np.asarray(token_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError("token sequence must be a non-empty 1-D array")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError(f"token ids must be integers, got {ids.dtype}")
    if ids.min() < 0 or ids.max() >= config["vocab_size"]:
        raise ValidationError(
            f"token ids must lie in [0, {config['vocab_size']})"
        )
    if ids.size > config["max_context"]:
        raise ValidationError(
            f"sequence length {ids.size} exceeds max_context={config['max_context']}"
        )
    tok_emb = tensors["tok_emb"].astype(np.float64)
    x = tok_emb[ids]
    for layer in range(config["n_layers"]):
        lt = _layer_tensors(tensors, layer)
        x = x + _attention(_rmsnorm(x, lt["attn_norm"]), lt, config["n_heads"])
        x = x + _gated_ffn(_rmsnorm(x, lt["ffn_norm"]), lt)
    final = _rmsnorm(x[-1:], tensors["final_norm"].astype(np.float64))
    if "out_head" in tensors:
        head = tensors["out_head"].astype(np.float64)
    else:
        head = tok_emb.T
    return (final @ head)[0]


def read_token_sequences(path) -> list[list[int]]:
    """One whitespace-separated integer sequence per line; blanks skipped."""
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sequences.append([int(tok) for tok in line.split()])
            except ValueError as exc:
                raise ValidationError(
                    f"{path}:{line_no}: token ids must be integers ({exc})"
                ) from exc
    if not sequences:
        raise ValidationError(f"{path} contains no token sequences")
    return sequences
